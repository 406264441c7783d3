//! Finite-difference gradient suite over every differentiable op and a
//! full forward pass of each architecture.

use rand::Rng;

use crate::error::Result;
use crate::nets::{self, Arch, NetConfig};
use crate::rng::{derive_indexed, derive_seed, rng};
use crate::tensor::{grad_check_inputs, GradCheckOptions, GradCheckReport, Graph, PaddingMode, Tensor, Var};

/// Relative error every case must stay below.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Central-difference step for the single-op cases.
    pub eps: f64,
    /// Step for the architecture cases; smaller, so fewer perturbations
    /// cross one of the many relu kinks.
    pub arch_eps: f64,
    /// Coordinates sampled per parameter tensor in the architecture cases.
    pub coords_per_tensor: Option<usize>,
    pub arch_depth: usize,
    pub arch_base_width: usize,
    pub arch_hw: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            eps: 1e-3,
            arch_eps: 1e-5,
            coords_per_tensor: Some(64),
            arch_depth: 2,
            arch_base_width: 6,
            arch_hw: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

/// Values with magnitude in [0.1, 1.1) so relu and pooling stay off their kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = 0.1 + r.random::<f64>();
        if r.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

type OpCase = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Squared sum, a smooth scalar readout that weights every output.
fn sq_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let y2 = g.mul(y, y)?;
    Ok(g.sum(y2))
}

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpCase)> {
    vec![
        ("conv2d same 3x3", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Same)?;
            sq_sum(g, y)
        }),
        ("conv2d valid 3x3", vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3], vec![2]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Valid)?;
            sq_sum(g, y)
        }),
        ("conv2d 1x1", vec![vec![2, 3, 3, 3], vec![2, 3, 1, 1], vec![2]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Same)?;
            sq_sum(g, y)
        }),
        ("linear", vec![vec![2, 5], vec![3, 5], vec![3]], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            sq_sum(g, y)
        }),
        ("maxpool2", vec![vec![2, 2, 4, 4]], |g, v| {
            let y = g.maxpool2(v[0])?;
            sq_sum(g, y)
        }),
        ("upsample2", vec![vec![1, 2, 2, 3]], |g, v| {
            let y = g.upsample2(v[0])?;
            sq_sum(g, y)
        }),
        ("concat_channels", vec![vec![2, 1, 2, 2], vec![2, 3, 2, 2]], |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            sq_sum(g, y)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.add(v[0], v[1])?;
            sq_sum(g, y)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            sq_sum(g, y)
        }),
        ("relu", vec![vec![8], vec![8]], |g, v| {
            let y = g.relu(v[0]);
            let z = g.mul(y, v[1])?;
            Ok(g.sum(z))
        }),
        ("sigmoid", vec![vec![2, 4]], |g, v| {
            let y = g.sigmoid(v[0]);
            sq_sum(g, y)
        }),
        ("reshape", vec![vec![2, 6], vec![3, 4]], |g, v| {
            let y = g.reshape(v[0], vec![3, 4])?;
            let z = g.mul(y, v[1])?;
            sq_sum(g, z)
        }),
        ("mean", vec![vec![3, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            let y = g.mul(y, v[0])?;
            Ok(g.mean(y))
        }),
        ("bce", vec![vec![1, 1, 4, 4]], |g, v| {
            let p = g.sigmoid(v[0]);
            let target = Tensor::from_fn([1, 1, 4, 4], |i| f64::from(i % 3 == 0));
            g.bce(p, &target)
        }),
        ("sigmoid_bce", vec![vec![1, 1, 4, 4]], |g, v| {
            let target = Tensor::from_fn([1, 1, 4, 4], |i| f64::from(i % 3 == 0));
            g.sigmoid_bce(v[0], &target)
        }),
    ]
}

pub fn op_cases(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let base = derive_seed(opts.seed, "gradsuite/ops");
    op_table()
        .into_iter()
        .enumerate()
        .map(|(c, (name, shapes, f))| {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| away_from_zero(s, derive_indexed(base, name, (c * 16 + i) as u64)))
                .collect();
            let skip = GradCheckOptions {
                skip_kinks: true,
                ..GradCheckOptions::default()
            };
            let report = grad_check_inputs(f, &inputs, opts.eps, &skip)?;
            Ok(SuiteCase { name: name.to_string(), report })
        })
        .collect()
}

/// BCE of a full forward pass against a random binary target, checked with
/// respect to the input and every parameter tensor.
pub fn arch_case(arch: Arch, opts: &SuiteOptions) -> Result<SuiteCase> {
    let hw = opts.arch_hw;
    let seed = derive_seed(opts.seed, &format!("gradsuite/{arch}"));
    let cfg = NetConfig {
        arch,
        depth: opts.arch_depth,
        base_width: opts.arch_base_width,
        input_hw: hw,
        seed,
        ..NetConfig::default()
    };
    let graph = nets::build(&cfg)?;
    let params = nets::init_params(&graph, seed);
    let mut r = rng(derive_seed(seed, "data"));
    let input = Tensor::from_fn([1, 1, hw, hw], |_| r.random_range(0.0..1.0));
    let target = Tensor::from_fn([1, 1, hw, hw], |_| f64::from(r.random_bool(0.4)));

    let mut all = vec![input];
    all.extend(params.tensors().iter().cloned());
    let report = grad_check_inputs(
        |g, v| {
            let out = graph.forward(g, &v[1..], v[0])?;
            g.bce(out, &target)
        },
        &all,
        opts.arch_eps,
        &GradCheckOptions {
            max_coords_per_input: opts.coords_per_tensor,
            skip_kinks: true,
            seed,
        },
    )?;
    let name = format!("{} forward (depth {}, base {}, {hw}x{hw})", arch.label(), cfg.depth, cfg.base_width);
    Ok(SuiteCase { name, report })
}

pub fn arch_cases(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    Arch::ALL.iter().map(|&a| arch_case(a, opts)).collect()
}

pub fn run(opts: &SuiteOptions) -> Result<Vec<SuiteCase>> {
    let mut cases = op_cases(opts)?;
    cases.extend(arch_cases(opts)?);
    Ok(cases)
}
