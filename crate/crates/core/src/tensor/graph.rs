use super::kernels::{self, ConvGeometry};
use super::{PaddingMode, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        dims: (usize, usize, usize),
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to predictions before taking logarithms in the
/// binary cross-entropy; the upper clamp is `1 - BCE_CLAMP`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so the node vector is already a
/// topological order and reverse iteration is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf (an input or a trainable parameter).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stride-1 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: PaddingMode) -> Result<Var> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            padding,
        )?;
        let data = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.output_shape(), data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// Fully connected layer over an N×I input with an O×I weight matrix.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        let (&[batch, inputs], &[outputs, w_in]) = (xs, ws) else {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        };
        if inputs != w_in || bs != [outputs] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            batch,
            inputs,
            outputs,
        );
        let value = Tensor::new(vec![batch, outputs], data)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                dims: (batch, inputs, outputs),
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("maxpool2")?;
        let (data, argmax) = kernels::maxpool2_forward(x)?;
        let value = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("upsample2")?;
        let data = kernels::upsample2_forward(x)?;
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Upsample2(input), rg))
    }

    /// Stacks the channels of `a` before the channels of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = va.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = vb.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&vb.data()[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| kernels::stable_sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let total = vx.data().iter().sum::<f64>() / vx.len().max(1) as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of `pred` against a fixed `target`.
    ///
    /// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// logarithms; the clamp passes no gradient where it is active.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                left: vp.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = vp.len().max(1) as f64;
        let total: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// `bce(sigmoid(logits), target)` as one op. The value is identical, but
    /// the gradient is `(sigmoid(z) - y) / n` everywhere, including where the
    /// clamp is active, so a saturated output still receives a signal.
    pub fn sigmoid_bce(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let vz = self.value(logits);
        if vz.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_bce",
                left: vz.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = vz.len().max(1) as f64;
        let total: f64 = vz
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| {
                let p = kernels::stable_sigmoid(z).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SigmoidBce {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: lv.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let out = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    &g,
                    [needs(*input), needs(*kernel), needs(*bias)],
                );
                accumulate(grads, *input, out.input);
                accumulate(grads, *kernel, out.kernel);
                accumulate(grads, *bias, out.bias);
            }
            Op::Linear {
                input,
                weight,
                bias,
                dims,
            } => {
                let out = kernels::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    &g,
                    *dims,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                accumulate(grads, *input, out.input);
                accumulate(grads, *weight, out.kernel);
                accumulate(grads, *bias, out.bias);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (&src, &go) in argmax.iter().zip(&g) {
                    dx[src] += go;
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::Upsample2(x) => {
                let dx = kernels::upsample2_backward(self.value(*x).shape(), &g);
                accumulate(grads, *x, Some(dx));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let plane = sa[2] * sa[3];
                let (la, lb) = (sa[1] * plane, sb[1] * plane);
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for chunk in g.chunks_exact((la + lb).max(1)).take(sa[0]) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                accumulate(grads, *a, Some(da));
                accumulate(grads, *b, Some(db));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if needs(*b) {
                    accumulate(grads, *b, Some(g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(grads, *a, Some(g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if needs(*b) {
                    accumulate(grads, *b, Some(g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(vx)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Reshape(x) => accumulate(grads, *x, Some(g)),
            Op::Sum(x) => {
                accumulate(grads, *x, Some(vec![g[0]; self.value(*x).len()]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, Some(vec![g[0] / n.max(1) as f64; n]));
            }
            Op::Bce { pred, target } => {
                let vp = self.value(*pred).data();
                let n = vp.len().max(1) as f64;
                let scale = g[0] / n;
                let dp = vp
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            scale * (p - y) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                accumulate(grads, *pred, Some(dp));
            }
            Op::SigmoidBce { logits, target } => {
                let vz = self.value(*logits).data();
                let scale = g[0] / vz.len().max(1) as f64;
                let dz = vz
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| scale * (kernels::stable_sigmoid(z) - y))
                    .collect();
                accumulate(grads, *logits, Some(dz));
            }
        }
    }

    /// Discrete state of every non-smooth op in the recorded pass: the sign
    /// of each relu input, each pooling argmax and each active BCE clamp.
    ///
    /// Two passes with equal patterns lie on the same smooth piece of the
    /// function, which is what a finite-difference comparison needs.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    let mut word = 0u64;
                    for (i, &v) in self.value(*x).data().iter().enumerate() {
                        word = (word << 1) | u64::from(v > 0.0);
                        if i % 64 == 63 {
                            pattern.push(word);
                            word = 0;
                        }
                    }
                    pattern.push(word);
                }
                Op::MaxPool2 { argmax, .. } => pattern.extend(argmax.iter().map(|&i| i as u64)),
                Op::Bce { pred, .. } => {
                    let clamped = self
                        .value(*pred)
                        .data()
                        .iter()
                        .filter(|&&p| !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p))
                        .count();
                    pattern.push(clamped as u64);
                }
                Op::SigmoidBce { logits, .. } => {
                    let clamped = self
                        .value(*logits)
                        .data()
                        .iter()
                        .map(|&z| kernels::stable_sigmoid(z))
                        .filter(|p| !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(p))
                        .count();
                    pattern.push(clamped as u64);
                }
                _ => {}
            }
        }
        pattern
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Option<Vec<f64>>) {
    let Some(delta) = delta else { return };
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; exactly zero when `var`
    /// does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}
