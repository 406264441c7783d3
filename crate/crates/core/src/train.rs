//! Adam + binary cross-entropy training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::prep::Gray8Frame;
use crate::rng::{derive_indexed, rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        // lr = 0 is accepted so a run can be checked as a no-op
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between `pred` and `target`, recorded in `g`.
pub fn bce_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    g.bce(pred, target)
}

/// [`bce_loss`] of `sigmoid(logits)`, with the gradient taken through the
/// fused op so saturated outputs still train.
pub fn bce_with_logits(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    g.sigmoid_bce(logits, target)
}

/// Value-only BCE for tensors outside a graph.
pub fn bce_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.bce(p, target)?;
    Ok(g.value(l).data()[0])
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// An 8-bit input image and its 0/255 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub image: Gray8Frame,
    pub mask: Gray8Frame,
}

/// Stacks images into an N×1×H×W tensor scaled by 1/255.
pub fn image_batch(images: &[&Gray8Frame]) -> Result<Tensor> {
    stack(images, |p| f64::from(p) / 255.0)
}

/// Stacks masks into an N×1×H×W tensor of 0/1 (pixels above 127 count as 1).
pub fn mask_batch(masks: &[&Gray8Frame]) -> Result<Tensor> {
    stack(masks, |p| if p > 127 { 1.0 } else { 0.0 })
}

fn stack(frames: &[&Gray8Frame], f: impl Fn(u8) -> f64) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("cannot batch zero frames".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for fr in frames {
        if (fr.width, fr.height) != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: vec![h, w],
                right: vec![fr.height, fr.width],
            });
        }
        data.extend(fr.pixels.iter().map(|&p| f(p)));
    }
    Tensor::new(vec![frames.len(), 1, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    /// `epoch,loss,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.9},{:.3}", e.epoch, e.loss, e.seconds);
        }
        out
    }

    /// `epoch,loss` without wall-clock times, so reruns with the same seed
    /// produce identical files.
    pub fn to_loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.9}", e.epoch, e.loss);
        }
        out
    }

    /// Reads either CSV layout; a missing `seconds` column reads as 0.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let timed = match lines.next().map(str::trim) {
            Some("epoch,loss,seconds") => true,
            Some("epoch,loss") => false,
            _ => return Err(Error::format("history CSV", "missing header epoch,loss[,seconds]")),
        };
        let epochs = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let bad = || Error::format("history CSV", format!("bad row `{l}`"));
                let fields: Vec<&str> = l.split(',').map(str::trim).collect();
                if fields.len() != 2 + usize::from(timed) {
                    return Err(bad());
                }
                let epoch = fields[0].parse().map_err(|_| bad())?;
                let loss = fields[1].parse().map_err(|_| bad())?;
                let seconds = if timed { fields[2].parse().map_err(|_| bad())? } else { 0.0 };
                Ok(EpochRecord { epoch, loss, seconds })
            })
            .collect::<Result<_>>()?;
        Ok(TrainHistory { epochs })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_loss_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn train(model: &mut Model, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, pairs, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
///
/// Epoch `e` visits the pairs in an order shuffled by the stream
/// `derive_indexed(cfg.seed, "shuffle", e)`. The final batch may be short.
pub fn train_with(
    model: &mut Model,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let input = model.graph.input_shape().to_vec();
    for (i, p) in pairs.iter().enumerate() {
        let dims = [1, p.image.height, p.image.width];
        if dims[..] != input[..] || (p.mask.width, p.mask.height) != (p.image.width, p.image.height) {
            return Err(Error::InvalidArgument(format!(
                "pair {i}: image {}x{} / mask {}x{} does not fit network input {input:?}",
                p.image.width, p.image.height, p.mask.width, p.mask.height
            )));
        }
    }

    let mut state = AdamState::new(model.params.tensors());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng(derive_indexed(cfg.seed, "shuffle", epoch as u64)));
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Gray8Frame> = batch.iter().map(|&i| &pairs[i].image).collect();
            let masks: Vec<&Gray8Frame> = batch.iter().map(|&i| &pairs[i].mask).collect();
            let x = image_batch(&images)?;
            let y = mask_batch(&masks)?;

            let mut g = Graph::new();
            let xv = g.constant(x);
            let (logits, vars) = model.forward_logits(&mut g, xv)?;
            let loss = bce_with_logits(&mut g, logits, &y)?;
            weighted += g.value(loss).data()[0] * batch.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            drop(g);
            adam_step(model.params.tensors_mut(), &grads, &mut state, cfg)?;
        }
        let record = EpochRecord {
            epoch,
            loss: weighted / pairs.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
