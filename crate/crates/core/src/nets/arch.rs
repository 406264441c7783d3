use std::fmt;
use std::str::FromStr;

use super::graph::{GraphBuilder, LayerGraph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    Cdcnn,
    Unet,
    MultiResUnet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Cdcnn, Arch::Unet, Arch::MultiResUnet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cdcnn => "cdcnn",
            Arch::Unet => "unet",
            Arch::MultiResUnet => "multiresunet",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Arch::Cdcnn => "C-DCNN",
            Arch::Unet => "U-Net",
            Arch::MultiResUnet => "MultiResUnet",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cdcnn" => Ok(Arch::Cdcnn),
            "unet" => Ok(Arch::Unet),
            "multiresunet" => Ok(Arch::MultiResUnet),
            _ => Err(Error::config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub arch: Arch,
    /// Pooling levels of the U-Net family. The C-DCNN always pools twice.
    pub depth: usize,
    /// Channels at the top level.
    pub base_width: usize,
    pub input_hw: usize,
    pub seed: u64,
    /// Res-Path lengths from the shallowest to the deepest skip; defaults to
    /// `depth, depth - 1, ..., 1`.
    pub res_path_lengths: Option<Vec<usize>>,
    /// Widths of the first two fully connected layers of the C-DCNN.
    pub fc_widths: [usize; 2],
    /// Channels of the map the C-DCNN bottleneck vector is reshaped into.
    pub bottleneck_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: Arch::MultiResUnet,
            depth: 4,
            base_width: 16,
            input_hw: 64,
            seed: 0,
            res_path_lengths: None,
            fc_widths: [128, 64],
            bottleneck_channels: 2,
        }
    }
}

impl NetConfig {
    pub fn new(arch: Arch) -> Self {
        NetConfig {
            arch,
            ..Self::default()
        }
    }

    fn pooling_levels(&self) -> usize {
        match self.arch {
            Arch::Cdcnn => 2,
            _ => self.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 6 {
            return Err(Error::config(format!("base_width must be >= 6, got {}", self.base_width)));
        }
        if self.arch != Arch::Cdcnn && self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        let levels = self.pooling_levels();
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(1 << levels) {
            return Err(Error::config(format!(
                "input_hw {} must be a positive multiple of 2^{levels}",
                self.input_hw
            )));
        }
        if self.arch == Arch::MultiResUnet {
            let lengths = self.res_path_lengths();
            if lengths.len() != self.depth || lengths.contains(&0) {
                return Err(Error::config(format!(
                    "res_path_lengths needs {} entries >= 1, got {lengths:?}",
                    self.depth
                )));
            }
        }
        if self.arch == Arch::Cdcnn && (self.fc_widths.contains(&0) || self.bottleneck_channels == 0) {
            return Err(Error::config("C-DCNN widths must be positive"));
        }
        Ok(())
    }

    pub fn res_path_lengths(&self) -> Vec<usize> {
        self.res_path_lengths
            .clone()
            .unwrap_or_else(|| (1..=self.depth).rev().collect())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Channel layout of one MultiRes block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiResBlockSpec {
    pub in_ch: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl MultiResBlockSpec {
    /// Splits `width` into W/6, W/3 and the remainder (rounded half up).
    pub fn new(in_ch: usize, width: usize) -> Result<Self> {
        let c1 = (width + 3) / 6;
        let c2 = (width + 1) / 3;
        let spec = MultiResBlockSpec {
            in_ch,
            width,
            c1,
            c2,
            c3: width.saturating_sub(c1 + c2),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.c1 == 0 || self.c2 == 0 || self.c3 == 0 || self.c1 + self.c2 + self.c3 != self.width {
            return Err(Error::config(format!("invalid MultiRes block split {self:?}")));
        }
        Ok(())
    }
}

/// Three chained 3×3 convolutions (in→c1→c2→c3) whose outputs are
/// concatenated, plus a 1×1 residual projection of the input, then relu.
pub fn build_multires_block(b: &mut GraphBuilder, x: NodeId, spec: &MultiResBlockSpec) -> Result<NodeId> {
    spec.validate()?;
    if b.channels(x) != spec.in_ch {
        return Err(Error::config(format!(
            "MultiRes block expects {} input channels, got {}",
            spec.in_ch,
            b.channels(x)
        )));
    }
    let a = b.conv_relu(x, spec.c1, 3, "conv3x3_a")?;
    let m = b.conv_relu(a, spec.c2, 3, "conv3x3_b")?;
    let z = b.conv_relu(m, spec.c3, 3, "conv3x3_c")?;
    let am = b.concat(a, m)?;
    let cat = b.concat(am, z)?;
    let shortcut = b.conv(x, spec.width, 1, "shortcut")?;
    let sum = b.add(cat, shortcut)?;
    Ok(b.relu(sum))
}

/// `length` repetitions of relu(conv3x3(x) + conv1x1(x)), channel-preserving.
pub fn build_res_path(b: &mut GraphBuilder, x: NodeId, ch: usize, length: usize) -> Result<NodeId> {
    if length < 1 {
        return Err(Error::config("Res-Path length must be >= 1"));
    }
    if b.channels(x) != ch {
        return Err(Error::config(format!(
            "Res-Path expects {ch} channels, got {}",
            b.channels(x)
        )));
    }
    let mut cur = x;
    for i in 0..length {
        cur = b.scoped(format!("step{i}"), |b| -> Result<NodeId> {
            let conv = b.conv(cur, ch, 3, "conv3x3")?;
            let shortcut = b.conv(cur, ch, 1, "shortcut")?;
            let sum = b.add(conv, shortcut)?;
            Ok(b.relu(sum))
        })?;
    }
    Ok(cur)
}

/// Standalone graph holding a single MultiRes block on an `hw`×`hw` input.
pub fn multires_block_graph(spec: &MultiResBlockSpec, hw: usize) -> Result<LayerGraph> {
    let (mut b, x) = GraphBuilder::new(spec.in_ch, hw, hw);
    let y = b.scoped("block", |b| build_multires_block(b, x, spec))?;
    Ok(b.finish(y, None))
}

/// Standalone graph holding a single Res-Path on an `hw`×`hw` input.
pub fn res_path_graph(ch: usize, length: usize, hw: usize) -> Result<LayerGraph> {
    let (mut b, x) = GraphBuilder::new(ch, hw, hw);
    let y = b.scoped("respath", |b| build_res_path(b, x, ch, length))?;
    Ok(b.finish(y, None))
}

fn check_arch(cfg: &NetConfig, want: Arch) -> Result<()> {
    if cfg.arch != want {
        return Err(Error::config(format!("config is for {}, not {want}", cfg.arch)));
    }
    cfg.validate()
}

/// Upsample, then a linear 1×1 convolution to `out_ch` channels.
fn up_project(b: &mut GraphBuilder, x: NodeId, out_ch: usize) -> Result<NodeId> {
    let up = b.upsample2(x)?;
    b.conv(up, out_ch, 1, "up_proj")
}

fn head(b: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
    let logits = b.scoped("head", |b| b.conv(x, 1, 1, "conv1x1"))?;
    Ok(b.sigmoid(logits))
}

pub fn build_multiresunet(cfg: &NetConfig) -> Result<LayerGraph> {
    check_arch(cfg, Arch::MultiResUnet)?;
    let lengths = cfg.res_path_lengths();
    let hw = cfg.input_hw;
    let (mut b, input) = GraphBuilder::new(1, hw, hw);

    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.depth);
    for (level, &len) in lengths.iter().enumerate() {
        let width = cfg.width(level);
        let (pooled, skip) = b.scoped(format!("enc{level}"), |b| -> Result<(NodeId, NodeId)> {
            let spec = MultiResBlockSpec::new(b.channels(x), width)?;
            let block = b.scoped("block", |b| build_multires_block(b, x, &spec))?;
            let skip = b.scoped("respath", |b| build_res_path(b, block, width, len))?;
            Ok((b.maxpool2(block)?, skip))
        })?;
        skips.push(skip);
        x = pooled;
    }
    x = b.scoped("bottleneck", |b| {
        let spec = MultiResBlockSpec::new(b.channels(x), cfg.width(cfg.depth))?;
        b.scoped("block", |b| build_multires_block(b, x, &spec))
    })?;
    for level in (0..cfg.depth).rev() {
        let width = cfg.width(level);
        x = b.scoped(format!("dec{level}"), |b| -> Result<NodeId> {
            let up = up_project(b, x, width)?;
            let cat = b.concat(up, skips[level])?;
            let spec = MultiResBlockSpec::new(2 * width, width)?;
            b.scoped("block", |b| build_multires_block(b, cat, &spec))
        })?;
    }
    let out = head(&mut b, x)?;
    Ok(b.finish(out, Some(Arch::MultiResUnet)))
}

fn double_conv(b: &mut GraphBuilder, x: NodeId, width: usize) -> Result<NodeId> {
    let y = b.conv_relu(x, width, 3, "conv1")?;
    b.conv_relu(y, width, 3, "conv2")
}

pub fn build_unet(cfg: &NetConfig) -> Result<LayerGraph> {
    check_arch(cfg, Arch::Unet)?;
    let hw = cfg.input_hw;
    let (mut b, input) = GraphBuilder::new(1, hw, hw);

    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let features = b.scoped(format!("enc{level}"), |b| double_conv(b, x, cfg.width(level)))?;
        skips.push(features);
        x = b.maxpool2(features)?;
    }
    x = b.scoped("bottleneck", |b| double_conv(b, x, cfg.width(cfg.depth)))?;
    for level in (0..cfg.depth).rev() {
        let width = cfg.width(level);
        x = b.scoped(format!("dec{level}"), |b| -> Result<NodeId> {
            let up = up_project(b, x, width)?;
            let cat = b.concat(up, skips[level])?;
            double_conv(b, cat, width)
        })?;
    }
    let out = head(&mut b, x)?;
    Ok(b.finish(out, Some(Arch::Unet)))
}

/// Convolutional encoder, fully connected bottleneck, convolutional decoder:
/// six convolutions, two poolings, two upsamplings, three FC layers and one
/// flattening.
pub fn build_cdcnn(cfg: &NetConfig) -> Result<LayerGraph> {
    check_arch(cfg, Arch::Cdcnn)?;
    let hw = cfg.input_hw;
    let widths = [cfg.base_width / 2, cfg.base_width, 2 * cfg.base_width];
    let q = hw / 4;
    let (mut b, input) = GraphBuilder::new(1, hw, hw);

    let x = b.conv_relu(input, widths[0], 3, "enc.conv1")?;
    let x = b.conv_relu(x, widths[1], 3, "enc.conv2")?;
    let x = b.maxpool2(x)?;
    let x = b.conv_relu(x, widths[2], 3, "enc.conv3")?;
    let x = b.maxpool2(x)?;

    let v = b.flatten(x);
    let v = b.linear(v, cfg.fc_widths[0], "fc1")?;
    let v = b.relu(v);
    let v = b.linear(v, cfg.fc_widths[1], "fc2")?;
    let v = b.relu(v);
    let v = b.linear(v, cfg.bottleneck_channels * q * q, "fc3")?;
    let x = b.reshape(v, [cfg.bottleneck_channels, q, q])?;

    let x = b.upsample2(x)?;
    let x = b.conv_relu(x, widths[1], 3, "dec.conv1")?;
    let x = b.upsample2(x)?;
    let x = b.conv_relu(x, widths[0], 3, "dec.conv2")?;
    let logits = b.conv(x, 1, 3, "dec.conv3")?;
    let out = b.sigmoid(logits);
    Ok(b.finish(out, Some(Arch::Cdcnn)))
}

pub fn build(cfg: &NetConfig) -> Result<LayerGraph> {
    match cfg.arch {
        Arch::Cdcnn => build_cdcnn(cfg),
        Arch::Unet => build_unet(cfg),
        Arch::MultiResUnet => build_multiresunet(cfg),
    }
}
