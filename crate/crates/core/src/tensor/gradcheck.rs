use rand::seq::index;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// Relative error with a floor of one in the denominator, so coordinates
/// with tiny gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug)]
#[derive(Default)]
pub struct GradCheckOptions {
    /// Check at most this many coordinates of each input (sampled with
    /// `seed`); `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    /// Skip coordinates whose perturbation flips a relu sign, a pooling
    /// argmax or a loss clamp. Such points are non-differentiable and central
    /// differences there do not estimate the gradient.
    pub skip_kinks: bool,
    pub seed: u64,
}


#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares the analytic gradient of scalar `f` at `x` against central
/// differences at every coordinate and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_inputs(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        &GradCheckOptions::default(),
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`grad_check`]; every tensor in `inputs` is
/// recorded as a differentiable leaf and checked.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");

    let evaluate = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (graph, vars, out) = evaluate(inputs)?;
    let grads = graph.backward(out)?;
    let base_pattern = opts.skip_kinks.then(|| graph.activation_pattern());
    drop(graph);

    let mut rng = rng::rng(opts.seed);
    let mut report = GradCheckReport::default();
    let mut perturbed: Vec<Tensor> = inputs.to_vec();

    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let len = inputs[which].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < len => {
                let mut c = index::sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for i in coords {
            let original = inputs[which].data()[i];
            let mut side = |delta: f64| -> Result<(f64, Option<Vec<u64>>)> {
                perturbed[which].data_mut()[i] = original + delta;
                let (g, _, out) = evaluate(&perturbed)?;
                let value = g.value(out).data()[0];
                Ok((value, opts.skip_kinks.then(|| g.activation_pattern())))
            };
            let (plus, plus_pattern) = side(eps)?;
            let (minus, minus_pattern) = side(-eps)?;
            perturbed[which].data_mut()[i] = original;

            if let Some(base) = &base_pattern {
                if plus_pattern.as_ref() != Some(base) || minus_pattern.as_ref() != Some(base) {
                    report.skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, i));
            }
        }
    }
    Ok(report)
}
