//! Synthetic thermogram subjects with exact ground-truth breast masks.
//!
//! A subject is a torso ellipse with neck and shoulder bands at body level,
//! two warmer breast lobes and, for patients, a small hotspot. Every frame
//! cools the body toward the background level and adds Gaussian noise.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pgm::{self, PgmImage};
use crate::prep::{Gray8Frame, Rect, ThermalFrame};
use crate::rng::{derive_indexed, derive_seed, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubjectKind {
    Patient,
    Volunteer,
}

impl SubjectKind {
    pub fn prefix(self) -> char {
        match self {
            SubjectKind::Patient => 'P',
            SubjectKind::Volunteer => 'V',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubjectKind::Patient => "patient",
            SubjectKind::Volunteer => "volunteer",
        }
    }
}

impl fmt::Display for SubjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubjectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patient" => Ok(SubjectKind::Patient),
            "volunteer" => Ok(SubjectKind::Volunteer),
            _ => Err(Error::InvalidArgument(format!("unknown subject kind `{s}`"))),
        }
    }
}

/// Inclusive range sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Span { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn sample(&self, r: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            r.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Generator settings. Geometric ranges are fractions of the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub image_hw: usize,
    pub frames_per_subject: usize,
    pub background_level: u16,
    pub body_level: u16,
    pub breast_excess: u16,
    pub noise_sigma: f64,
    /// Fractional loss of body excess over background per frame.
    pub cooldown_rate: f64,
    pub torso_half_width: Span,
    pub torso_half_height: Span,
    pub lobe_offset_x: Span,
    pub lobe_center_y: Span,
    pub lobe_radius: Span,
    pub small_lobe_radius: Span,
    /// Chance that a standalone subject is drawn in the small-breast regime.
    pub small_breast_prob: f64,
    /// Peak hotspot excess for patients; 0 disables it.
    pub hotspot_excess: u16,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            image_hw: 64,
            frames_per_subject: 15,
            background_level: 8000,
            body_level: 20000,
            breast_excess: 5000,
            noise_sigma: 150.0,
            cooldown_rate: 0.02,
            torso_half_width: Span::new(0.36, 0.42),
            torso_half_height: Span::new(0.44, 0.52),
            lobe_offset_x: Span::new(0.17, 0.21),
            lobe_center_y: Span::new(0.56, 0.64),
            lobe_radius: Span::new(0.176, 0.264),
            small_lobe_radius: Span::new(0.099, 0.104),
            small_breast_prob: 0.1,
            hotspot_excess: 2500,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.image_hw < 8 {
            return bad(format!("image_hw must be at least 8, got {}", self.image_hw));
        }
        if self.frames_per_subject == 0 {
            return bad("frames_per_subject must be at least 1".into());
        }
        let peak = u32::from(self.body_level) + u32::from(self.breast_excess) + u32::from(self.hotspot_excess);
        if self.background_level >= self.body_level || self.breast_excess == 0 || peak > 65535 {
            return bad(format!(
                "levels must satisfy background < body < body + excess (+ hotspot) <= 65535, got {} / {} / {} / {}",
                self.background_level, self.body_level, self.breast_excess, self.hotspot_excess
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        let total_cool = self.cooldown_rate * (self.frames_per_subject - 1) as f64;
        if !(self.cooldown_rate >= 0.0 && total_cool < 1.0) {
            return bad(format!(
                "cooldown_rate must satisfy 0 <= rate*(frames-1) < 1, got {}",
                self.cooldown_rate
            ));
        }
        let spans = [
            ("torso_half_width", self.torso_half_width),
            ("torso_half_height", self.torso_half_height),
            ("lobe_offset_x", self.lobe_offset_x),
            ("lobe_center_y", self.lobe_center_y),
            ("lobe_radius", self.lobe_radius),
            ("small_lobe_radius", self.small_lobe_radius),
        ];
        for (name, span) in spans {
            if !span.is_valid() || span.lo <= 0.0 {
                return bad(format!("{name} range [{}, {}] is invalid", span.lo, span.hi));
            }
        }
        if self.small_lobe_radius.hi >= 0.5 * self.lobe_radius.mid() {
            return bad("small_lobe_radius must stay below half the mean lobe radius".into());
        }
        if !(0.0..=1.0).contains(&self.small_breast_prob) {
            return bad(format!("small_breast_prob must lie in [0, 1], got {}", self.small_breast_prob));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subject {
    pub subject_id: String,
    pub kind: SubjectKind,
    pub seed: u64,
    pub small_breast: bool,
    pub frames: Vec<ThermalFrame>,
    /// 255 inside the breast region, 0 elsewhere.
    pub mask: Gray8Frame,
    /// 255 on the rendered body (torso, neck, shoulders), 0 on background.
    pub body: Gray8Frame,
    pub recommended_crop: Rect,
}

impl Subject {
    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    /// FNV-1a over every frame, the mask and the metadata.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3);
            }
        };
        eat(self.subject_id.as_bytes());
        eat(&self.seed.to_le_bytes());
        for f in &self.frames {
            for p in &f.pixels {
                eat(&p.to_le_bytes());
            }
        }
        eat(&self.mask.pixels);
        h
    }
}

#[derive(Clone, Copy, Debug)]
struct Lobe {
    cx: f64,
    cy: f64,
    r: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.ax, (y - self.cy) / self.ay);
        u * u + v * v <= 1.0
    }
}

/// Lobe profile: height 1 at the centre, falling to 0.35 at the rim so the
/// boundary stays visible above the noise.
fn lobe_profile(rho: f64) -> f64 {
    0.35 + 0.65 * (1.0 - rho * rho)
}

/// Draws one subject, choosing the small-breast regime at random.
///
/// The returned id is the bare kind prefix; [`generate_dataset`] numbers them.
pub fn generate_subject(seed: u64, params: &PhantomParams, kind: SubjectKind) -> Result<Subject> {
    params.validate()?;
    let mut r = rng(derive_seed(seed, "regime"));
    let small = r.random_bool(params.small_breast_prob);
    render(kind.prefix().to_string(), seed, params, kind, small)
}

/// `n_patients` patients `P1…` followed by `n_volunteers` volunteers `V1…`.
///
/// Subject `i` of the combined list uses seed `derive_indexed(seed, "subject", i)`;
/// every tenth subject (`i % 10 == 9`) is drawn in the small-breast regime.
pub fn generate_dataset(
    n_patients: usize,
    n_volunteers: usize,
    seed: u64,
    params: &PhantomParams,
) -> Result<Vec<Subject>> {
    if n_patients == 0 || n_volunteers == 0 {
        return Err(Error::config("a dataset needs at least one patient and one volunteer"));
    }
    params.validate()?;
    let kinds = std::iter::repeat_n(SubjectKind::Patient, n_patients)
        .chain(std::iter::repeat_n(SubjectKind::Volunteer, n_volunteers));
    let mut out = Vec::with_capacity(n_patients + n_volunteers);
    let mut numbering = [0usize; 2];
    for (i, kind) in kinds.enumerate() {
        let slot = &mut numbering[usize::from(kind == SubjectKind::Volunteer)];
        *slot += 1;
        let id = format!("{}{}", kind.prefix(), slot);
        let sub_seed = derive_indexed(seed, "subject", i as u64);
        out.push(render(id, sub_seed, params, kind, i % 10 == 9)?);
    }
    Ok(out)
}

fn render(id: String, seed: u64, p: &PhantomParams, kind: SubjectKind, small: bool) -> Result<Subject> {
    let n = p.image_hw;
    let s = n as f64;
    let mut g = rng(derive_seed(seed, "geometry"));

    let torso = Ellipse {
        cx: s * (0.5 + g.random_range(-0.02..=0.02)),
        cy: s * 0.62,
        ax: s * p.torso_half_width.sample(&mut g),
        ay: s * p.torso_half_height.sample(&mut g),
    };
    let torso_top = torso.cy - torso.ay;
    let neck_half = s * g.random_range(0.08..=0.11);
    let shoulder = Ellipse {
        cx: torso.cx,
        cy: torso_top + s * 0.06,
        ax: s * g.random_range(0.42..=0.47),
        ay: s * g.random_range(0.07..=0.09),
    };

    let radius_span = if small { p.small_lobe_radius } else { p.lobe_radius };
    let base_r = radius_span.sample(&mut g);
    let offset = p.lobe_offset_x.sample(&mut g);
    let cy = p.lobe_center_y.sample(&mut g);
    let lobes: Vec<Lobe> = [-1.0, 1.0]
        .iter()
        .map(|side| {
            let jitter = |g: &mut crate::rng::SeededRng, a: f64| g.random_range(-a..=a);
            Lobe {
                cx: torso.cx + s * side * offset + s * jitter(&mut g, 0.01),
                cy: s * (cy + jitter(&mut g, 0.015)),
                r: s * base_r * (1.0 + jitter(&mut g, 0.05)),
            }
        })
        .collect();

    let hotspot = (kind == SubjectKind::Patient && p.hotspot_excess > 0).then(|| {
        let lobe = lobes[g.random_range(0..lobes.len())];
        let ang = g.random_range(0.0..std::f64::consts::TAU);
        let dist = lobe.r * g.random_range(0.0..0.5);
        let sigma = lobe.r * g.random_range(0.15..0.25);
        (lobe.cx + dist * ang.cos(), lobe.cy + dist * ang.sin(), sigma)
    });

    // excess over background per pixel at minute 0, plus masks
    let bg = f64::from(p.background_level);
    let body_excess = f64::from(p.body_level) - bg;
    let mut raw = vec![0.0; n * n];
    let mut mask = vec![0u8; n * n];
    let mut body = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_torso = torso.contains(fx, fy);
            let in_neck = fy <= torso_top + s * 0.05 && (fx - torso.cx).abs() <= neck_half;
            let in_shoulder = shoulder.contains(fx, fy);
            if !(in_torso || in_neck || in_shoulder) {
                continue;
            }
            let i = y * n + x;
            body[i] = 255;
            let mut v = body_excess;
            if in_torso {
                let lobe = lobes
                    .iter()
                    .filter_map(|l| {
                        let rho = ((fx - l.cx).powi(2) + (fy - l.cy).powi(2)).sqrt() / l.r;
                        (rho <= 1.0).then(|| lobe_profile(rho))
                    })
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
                if let Some(level) = lobe {
                    mask[i] = 255;
                    v += f64::from(p.breast_excess) * level;
                    if let Some((hx, hy, sigma)) = hotspot {
                        let d2 = (fx - hx).powi(2) + (fy - hy).powi(2);
                        v += f64::from(p.hotspot_excess) * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            raw[i] = v;
        }
    }

    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let frames = (0..p.frames_per_subject)
        .map(|t| {
            let keep = 1.0 - p.cooldown_rate * t as f64;
            let mut nr = rng(derive_indexed(seed, "noise", t as u64));
            let pixels = raw
                .iter()
                .map(|&e| {
                    let jitter = if p.noise_sigma > 0.0 { noise.sample(&mut nr) } else { 0.0 };
                    (bg + e * keep + jitter).round().clamp(0.0, 65535.0) as u16
                })
                .collect();
            ThermalFrame {
                width: n,
                height: n,
                pixels,
                subject_id: id.clone(),
                minute_index: t,
            }
        })
        .collect();

    let crop = crop_around(&lobes, n);
    Ok(Subject {
        subject_id: id,
        kind,
        seed,
        small_breast: small,
        frames,
        mask: Gray8Frame { width: n, height: n, pixels: mask },
        body: Gray8Frame { width: n, height: n, pixels: body },
        recommended_crop: crop,
    })
}

/// Full-width band from a margin above the lobes to a margin below them.
fn crop_around(lobes: &[Lobe], n: usize) -> Rect {
    let margin = 0.1 * n as f64;
    let top = lobes.iter().map(|l| l.cy - l.r).fold(f64::INFINITY, f64::min) - margin;
    let bottom = lobes.iter().map(|l| l.cy + l.r).fold(f64::NEG_INFINITY, f64::max) + margin;
    let y0 = top.floor().clamp(0.0, (n - 1) as f64) as usize;
    let y1 = (bottom.ceil().clamp(0.0, n as f64) as usize).max(y0 + 1);
    Rect::new(0, y0, n, y1)
}

/// Orders ids like `P2` before `P10`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn split(s: &str) -> (&str, Option<u64>, &str) {
        let start = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let end = s[start..]
            .find(|c: char| !c.is_ascii_digit())
            .map_or(s.len(), |i| start + i);
        (&s[..start], s[start..end].parse().ok(), &s[end..])
    }
    let (pa, na, ra) = split(a);
    let (pb, nb, rb) = split(b);
    pa.cmp(pb).then(na.cmp(&nb)).then_with(|| ra.cmp(rb)).then_with(|| a.cmp(b))
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:02}.pgm")
}

/// Writes `dir/<id>/` with frames, `mask.pgm`, `body.pgm` and `meta.txt`.
pub fn write_subject(root: impl AsRef<Path>, subject: &Subject) -> Result<PathBuf> {
    let dir = root.as_ref().join(&subject.subject_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for f in &subject.frames {
        pgm::write_gray16(dir.join(frame_file_name(f.minute_index)), f.width, f.height, &f.pixels)?;
    }
    let (w, h) = (subject.width(), subject.height());
    pgm::write_gray8(dir.join("mask.pgm"), w, h, &subject.mask.pixels)?;
    pgm::write_gray8(dir.join("body.pgm"), w, h, &subject.body.pixels)?;
    let meta = format!(
        "id={}\nkind={}\ncrop={}\nseed={}\nframes={}\nsmall_breast={}\n",
        subject.subject_id,
        subject.kind,
        subject.recommended_crop,
        subject.seed,
        subject.frames.len(),
        u8::from(subject.small_breast),
    );
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

pub fn write_dataset(root: impl AsRef<Path>, subjects: &[Subject]) -> Result<()> {
    for s in subjects {
        write_subject(root.as_ref(), s)?;
    }
    Ok(())
}

fn read_gray8(path: &Path) -> Result<Gray8Frame> {
    match pgm::read(path)? {
        PgmImage::Gray8 { width, height, pixels } => Ok(Gray8Frame { width, height, pixels }),
        PgmImage::Gray16 { .. } => Err(Error::format("PGM", format!("{}: expected an 8-bit image", path.display()))),
    }
}

fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::format("meta.txt", format!("line `{l}` is not key=value")))
        })
        .collect()
}

/// Loads a directory written by [`write_subject`].
pub fn read_subject(dir: impl AsRef<Path>) -> Result<Subject> {
    let dir = dir.as_ref();
    let meta = read_meta(&dir.join("meta.txt"))?;
    let get = |key: &str| {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format("meta.txt", format!("{}: missing key `{key}`", dir.display())))
    };
    let bad = |key: &str| Error::format("meta.txt", format!("{}: bad value for `{key}`", dir.display()));
    let id = get("id")?.to_string();
    let kind: SubjectKind = get("kind")?.parse()?;
    let crop: Rect = get("crop")?.parse()?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
    let count: usize = get("frames")?.parse().map_err(|_| bad("frames"))?;
    let small_breast = get("small_breast").map(|v| v == "1").unwrap_or(false);

    let mask = read_gray8(&dir.join("mask.pgm"))?;
    let body_path = dir.join("body.pgm");
    let body = if body_path.exists() {
        read_gray8(&body_path)?
    } else {
        Gray8Frame { width: mask.width, height: mask.height, pixels: vec![0; mask.pixels.len()] }
    };
    let mut frames = Vec::with_capacity(count);
    for t in 0..count {
        let path = dir.join(frame_file_name(t));
        let PgmImage::Gray16 { width, height, pixels } = pgm::read(&path)? else {
            return Err(Error::format("PGM", format!("{}: expected a 16-bit frame", path.display())));
        };
        if (width, height) != (mask.width, mask.height) {
            return Err(Error::format("PGM", format!("{}: frame size differs from mask", path.display())));
        }
        frames.push(ThermalFrame { width, height, pixels, subject_id: id.clone(), minute_index: t });
    }
    Ok(Subject { subject_id: id, kind, seed, small_breast, frames, mask, body, recommended_crop: crop })
}

/// Reads every subject directory under `root` in natural id order.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join("meta.txt").is_file() {
            dirs.push(entry.path());
        }
    }
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no subject directories found", root.display())));
    }
    let mut subjects = dirs.iter().map(read_subject).collect::<Result<Vec<_>>>()?;
    subjects.sort_by(|a, b| natural_cmp(&a.subject_id, &b.subject_id));
    Ok(subjects)
}
