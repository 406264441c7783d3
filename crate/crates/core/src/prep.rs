//! Thermogram preprocessing: smoothing, Otsu thresholding, background
//! removal, 8-bit remapping and cropping.
//!
//! All arithmetic is integer and every rounding step rounds half up, so
//! results are exact and reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Raw 16-bit frame, one per minute of acquisition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThermalFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub subject_id: String,
    pub minute_index: usize,
}

impl ThermalFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(ThermalFrame {
            width,
            height,
            pixels,
            subject_id: String::new(),
            minute_index: 0,
        })
    }

    pub fn with_origin(mut self, subject_id: impl Into<String>, minute_index: usize) -> Self {
        self.subject_id = subject_id.into();
        self.minute_index = minute_index;
        self
    }

    fn with_pixels(&self, pixels: Vec<u16>) -> Self {
        ThermalFrame {
            width: self.width,
            height: self.height,
            pixels,
            subject_id: self.subject_id.clone(),
            minute_index: self.minute_index,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Gray8Frame { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Re-embeds the 8-bit values into a 16-bit frame unchanged.
    pub fn to_thermal(&self) -> ThermalFrame {
        ThermalFrame {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| u16::from(p)).collect(),
            subject_id: String::new(),
            minute_index: 0,
        }
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height != len {
        return Err(Error::InvalidArgument(format!(
            "frame {width}x{height} does not match {len} pixels"
        )));
    }
    Ok(())
}

/// Axis-aligned rectangle with exclusive upper corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Rect::new(0, 0, width, height)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::InvalidArgument(format!(
                "crop {self} is empty or outside a {width}x{height} image"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for Rect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad rectangle `{s}`, expected x0,y0,x1,y1")))?;
        match parts[..] {
            [x0, y0, x1, y1] => Ok(Rect::new(x0, y0, x1, y1)),
            _ => Err(Error::InvalidArgument(format!("bad rectangle `{s}`, expected x0,y0,x1,y1"))),
        }
    }
}

fn crop_pixels<T: Copy>(pixels: &[T], width: usize, rect: &Rect) -> Vec<T> {
    let mut out = Vec::with_capacity(rect.width() * rect.height());
    for y in rect.y0..rect.y1 {
        out.extend_from_slice(&pixels[y * width + rect.x0..y * width + rect.x1]);
    }
    out
}

pub fn crop(frame: &ThermalFrame, rect: &Rect) -> Result<ThermalFrame> {
    rect.check(frame.width, frame.height)?;
    Ok(ThermalFrame {
        width: rect.width(),
        height: rect.height(),
        ..frame.with_pixels(crop_pixels(&frame.pixels, frame.width, rect))
    })
}

pub fn crop_gray8(frame: &Gray8Frame, rect: &Rect) -> Result<Gray8Frame> {
    rect.check(frame.width, frame.height)?;
    Ok(Gray8Frame {
        width: rect.width(),
        height: rect.height(),
        pixels: crop_pixels(&frame.pixels, frame.width, rect),
    })
}

/// k×k mean filter with edge replication, computed with running sums.
pub fn box_filter(frame: &ThermalFrame, k: usize) -> Result<ThermalFrame> {
    let (w, h) = (frame.width, frame.height);
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("box filter size {k} must be odd")));
    }
    if k > w.min(h) {
        return Err(Error::InvalidArgument(format!(
            "box filter size {k} exceeds the {w}x{h} frame"
        )));
    }
    let r = (k / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    // horizontal window sums
    let mut rows = vec![0u64; w * h];
    for y in 0..h {
        let line = &frame.pixels[y * w..(y + 1) * w];
        let mut acc: u64 = (-r..=r).map(|i| u64::from(line[clamp(i, w)])).sum();
        for x in 0..w {
            rows[y * w + x] = acc;
            let xi = x as isize;
            acc += u64::from(line[clamp(xi + r + 1, w)]);
            acc -= u64::from(line[clamp(xi - r, w)]);
        }
    }

    let area = (k * k) as u64;
    let mut out = vec![0u16; w * h];
    for x in 0..w {
        let mut acc: u64 = (-r..=r).map(|i| rows[clamp(i, h) * w + x]).sum();
        for y in 0..h {
            out[y * w + x] = ((2 * acc + area) / (2 * area)) as u16;
            let yi = y as isize;
            acc += rows[clamp(yi + r + 1, h) * w + x];
            acc -= rows[clamp(yi - r, h) * w + x];
        }
    }
    Ok(frame.with_pixels(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OtsuResult {
    pub threshold: u16,
    /// Set when the frame holds a single intensity and no split exists.
    pub degenerate: bool,
}

/// Full 65536-bin intensity histogram.
pub fn histogram(pixels: &[u16]) -> Vec<u64> {
    let mut hist = vec![0u64; 1 << 16];
    for &p in pixels {
        hist[p as usize] += 1;
    }
    hist
}

pub fn otsu_threshold(frame: &ThermalFrame) -> OtsuResult {
    otsu_from_histogram(&histogram(&frame.pixels))
}

/// Otsu's threshold over a histogram indexed by intensity.
///
/// Class 0 holds intensities `<= t`. The between-class variance is
/// proportional to `(N·S0 − S·n0)² / (n0·n1)`, which is compared exactly in
/// integer arithmetic so the smallest maximizing `t` wins ties reliably.
pub fn otsu_from_histogram(hist: &[u64]) -> OtsuResult {
    let total: u64 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * u128::from(c)).sum();
    let lo = hist.iter().position(|&c| c > 0);
    let hi = hist.iter().rposition(|&c| c > 0);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return OtsuResult { threshold: 0, degenerate: true };
    };
    if lo == hi {
        return OtsuResult { threshold: lo as u16, degenerate: true };
    }

    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(usize, u128, u64)> = None;
    for (t, &c) in hist.iter().enumerate().take(hi).skip(lo) {
        n0 += c;
        s0 += t as u128 * u128::from(c);
        let n1 = total - n0;
        let d = (u128::from(total) * s0).abs_diff(sum * u128::from(n0));
        let q = n0 * n1;
        let better = match best {
            None => true,
            Some((_, bd, bq)) => ratio_gt((d, q), (bd, bq)),
        };
        if better {
            best = Some((t, d, q));
        }
    }
    let (t, _, _) = best.expect("lo < hi leaves at least one candidate");
    OtsuResult { threshold: t as u16, degenerate: false }
}

/// `a.0² / a.1 > b.0² / b.1` for positive denominators, without overflow.
fn ratio_gt(a: (u128, u64), b: (u128, u64)) -> bool {
    mul3(a.0, a.0, b.1) > mul3(b.0, b.0, a.1)
}

/// Exact product `x·y·z` as big-endian 64-bit limbs.
fn mul3(x: u128, y: u128, z: u64) -> [u64; 5] {
    let mut acc = [0u64; 5];
    let xs = [x as u64, (x >> 64) as u64];
    let ys = [y as u64, (y >> 64) as u64];
    // little-endian accumulation of x·y
    let mut xy = [0u64; 4];
    for (i, &a) in xs.iter().enumerate() {
        let mut carry = 0u128;
        for (j, &b) in ys.iter().enumerate() {
            let cur = u128::from(xy[i + j]) + u128::from(a) * u128::from(b) + carry;
            xy[i + j] = cur as u64;
            carry = cur >> 64;
        }
        xy[i + 2] = carry as u64;
    }
    let mut carry = 0u128;
    for (i, &limb) in xy.iter().enumerate() {
        let cur = u128::from(limb) * u128::from(z) + carry;
        acc[i] = cur as u64;
        carry = cur >> 64;
    }
    acc[4] = carry as u64;
    acc.reverse();
    acc
}

/// Clamps every pixel `<= t_effective` to `t_effective`, leaving the others.
pub fn remove_background(frame: &ThermalFrame, t_effective: i64) -> ThermalFrame {
    let floor = t_effective.clamp(0, i64::from(u16::MAX)) as u16;
    let pixels = frame
        .pixels
        .iter()
        .map(|&p| if i64::from(p) <= t_effective { floor } else { p })
        .collect();
    frame.with_pixels(pixels)
}

/// Linear stretch of `[min, max]` onto `[0, 255]`; a constant frame maps to 0.
pub fn remap_to_8bit(frame: &ThermalFrame) -> Gray8Frame {
    let min = frame.pixels.iter().copied().min().unwrap_or(0);
    let max = frame.pixels.iter().copied().max().unwrap_or(0);
    let range = u64::from(max - min);
    let pixels = if range == 0 {
        vec![0; frame.pixels.len()]
    } else {
        frame
            .pixels
            .iter()
            .map(|&p| ((255 * u64::from(p - min) * 2 + range) / (2 * range)) as u8)
            .collect()
    };
    Gray8Frame {
        width: frame.width,
        height: frame.height,
        pixels,
    }
}

/// Nearest odd kernel size to `101·height/480`, the full-scale 101×101
/// filter scaled to the frame height.
pub fn desk_scale_kernel(height: usize) -> usize {
    // 2·round((x − 1)/2) + 1 with x = 101·h/480 reduces to 2·⌊x/2⌋ + 1
    2 * (101 * height / 960) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RemapSource {
    /// Background removal and remap act on the raw frame.
    #[default]
    Original,
    Smoothed,
}

impl FromStr for RemapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(RemapSource::Original),
            "smoothed" => Ok(RemapSource::Smoothed),
            _ => Err(Error::InvalidArgument(format!(
                "unknown remap source `{s}` (expected original or smoothed)"
            ))),
        }
    }
}

impl fmt::Display for RemapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemapSource::Original => "original",
            RemapSource::Smoothed => "smoothed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub smooth_kernel: usize,
    pub compensation: i64,
    pub crop: Option<Rect>,
    pub remap_source: RemapSource,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            smooth_kernel: 101,
            compensation: 0,
            crop: None,
            remap_source: RemapSource::Original,
        }
    }
}

impl PreprocessConfig {
    /// Defaults with the smoothing kernel scaled to `height`.
    pub fn for_height(height: usize) -> Self {
        PreprocessConfig {
            smooth_kernel: desk_scale_kernel(height),
            ..Self::default()
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.smooth_kernel == 0 || self.smooth_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "smooth_kernel must be odd and at least 1, got {}",
                self.smooth_kernel
            )));
        }
        if let Some(rect) = &self.crop {
            rect.check(width, height).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preprocessed {
    pub image: Gray8Frame,
    pub otsu: OtsuResult,
    pub t_effective: i64,
}

/// Smooth, threshold, remove background, remap and optionally crop.
///
/// The threshold always comes from the smoothed frame; `remap_source`
/// decides which frame loses its background and is remapped.
pub fn preprocess(frame: &ThermalFrame, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate(frame.width, frame.height)?;
    let smoothed = box_filter(frame, cfg.smooth_kernel)?;
    let otsu = otsu_threshold(&smoothed);
    let t_effective = i64::from(otsu.threshold) + cfg.compensation;
    let source = match cfg.remap_source {
        RemapSource::Original => frame,
        RemapSource::Smoothed => &smoothed,
    };
    let mut image = remap_to_8bit(&remove_background(source, t_effective));
    if let Some(rect) = &cfg.crop {
        image = crop_gray8(&image, rect)?;
    }
    Ok(Preprocessed { image, otsu, t_effective })
}
