use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

/// Random tensor with |x| in [0.1, 1.1), keeping inputs away from relu kinks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = 0.1 + r.random::<f64>();
        if r.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn conv_same(g: &mut Graph, x: Var, k: Tensor, b: Tensor) -> Var {
    let k = g.constant(k);
    let b = g.constant(b);
    g.conv2d(x, k, b, PaddingMode::Same).unwrap()
}

#[test]
fn conv2d_all_ones_same_padding() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = conv_same(&mut g, x, Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1]));
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let input = uniform(&[2, 1, 5, 4], 3);
    let mut delta = Tensor::zeros([1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = conv_same(&mut g, x, delta, Tensor::zeros([1]));
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv2d_matches_direct_summation() {
    // direct nested-loop cross-correlation as an independent reference
    let input = uniform(&[2, 3, 6, 5], 10);
    let kernel = uniform(&[4, 3, 3, 3], 11);
    let bias = uniform(&[4], 12);
    for padding in [PaddingMode::Same, PaddingMode::Valid] {
        let pad = if padding == PaddingMode::Same { 1isize } else { 0 };
        let (oh, ow) = if pad == 1 { (6, 5) } else { (4, 3) };
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let k = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        let y = g.conv2d(x, k, b, padding).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, oh, ow]);
        let got = g.value(y).data();
        for n in 0..2 {
            for f in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[f];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - pad;
                                    let ix = ox as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                        continue;
                                    }
                                    acc += input.data()[((n * 3 + c) * 6 + iy as usize) * 5 + ix as usize]
                                        * kernel.data()[((f * 3 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let idx = ((n * 4 + f) * oh + oy) * ow + ox;
                        assert!((got[idx] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv2d_same_preserves_extent_for_odd_kernels() {
    for k in [1, 3, 5] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 7, 6]));
        let y = conv_same(&mut g, x, Tensor::zeros([3, 2, k, k]), Tensor::zeros([3]));
        assert_eq!(g.value(y).shape(), &[1, 3, 7, 6]);
    }
}

#[test]
fn conv2d_rejects_mismatched_channels_and_even_kernels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros([1]));
    match g.conv2d(x, k, b, PaddingMode::Same) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![1, 2, 4, 4]);
            assert_eq!(right, vec![1, 3, 3, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let k = g.constant(Tensor::zeros([1, 2, 2, 2]));
    assert!(g.conv2d(x, k, b, PaddingMode::Same).is_err());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let inputs = [
        uniform(&[1, 2, 5, 5], 1),
        uniform(&[3, 2, 3, 3], 2),
        uniform(&[3], 3),
    ];
    for padding in [PaddingMode::Same, PaddingMode::Valid] {
        let report = grad_check_inputs(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], padding)?;
                let w = g.constant(uniform(g.value(y).shape(), 4));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &inputs,
            EPS,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 50 + 54 + 3);
        assert!(report.max_rel_error < TOL, "{report:?}");
    }
}

#[test]
fn pointwise_conv_gradients_match_finite_differences() {
    let inputs = [uniform(&[2, 3, 4, 4], 5), uniform(&[2, 3, 1, 1], 6), uniform(&[2], 7)];
    let report = grad_check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Same)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        },
        &inputs,
        EPS,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn maxpool2_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let x = g.constant(Tensor::full([1, 2, 4, 6], 2.5));
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y), &Tensor::full([1, 2, 2, 3], 2.5));

    let x = g.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(g.maxpool2(x).is_err());
}

#[test]
fn maxpool2_gradient_routes_to_argmax() {
    let input = away_from_zero(&[1, 2, 4, 4], 9);
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let y = g.maxpool2(x).unwrap();
    let loss = g.sum(y);
    let grad = g.backward(loss).unwrap().get(x);
    for plane in 0..2 {
        for wy in 0..2 {
            for wx in 0..2 {
                let idx: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| plane * 16 + (2 * wy + dy) * 4 + 2 * wx + dx)
                    .collect();
                let best = *idx
                    .iter()
                    .max_by(|a, b| input.data()[**a].total_cmp(&input.data()[**b]))
                    .unwrap();
                for i in idx {
                    assert_eq!(grad.data()[i], if i == best { 1.0 } else { 0.0 });
                }
            }
        }
    }
    let err = grad_check(
        |g, x| {
            let y = g.maxpool2(x)?;
            Ok(g.sum(y))
        },
        &input,
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn maxpool2_ties_go_to_first_in_row_major_order() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new([1, 1, 2, 2], vec![0.0, 5.0, 5.0, 5.0]).unwrap());
    let y = g.maxpool2(x).unwrap();
    let loss = g.sum(y);
    assert_eq!(g.backward(loss).unwrap().get(x).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn upsample2_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.upsample2(x).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let input = uniform(&[2, 3, 3, 5], 4);
    let x = g.constant(input.clone());
    let up = g.upsample2(x).unwrap();
    let back = g.maxpool2(up).unwrap();
    assert_eq!(g.value(back), &input);

    let err = grad_check(
        |g, x| {
            let y = g.upsample2(x)?;
            let w = g.constant(uniform(&[1, 1, 6, 6], 8));
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        },
        &uniform(&[1, 1, 3, 3], 7),
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn concat_channels_examples() {
    let a = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new([1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b));
    let c = g.concat_channels(va, vb).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 3, 1, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let empty = g.constant(Tensor::zeros([1, 0, 1, 2]));
    let same = g.concat_channels(va, empty).unwrap();
    assert_eq!(g.value(same), &a);

    let wrong = g.constant(Tensor::zeros([1, 1, 2, 2]));
    assert!(matches!(g.concat_channels(va, wrong), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn concat_channels_gradient_splits() {
    let inputs = [uniform(&[2, 1, 3, 3], 1), uniform(&[2, 2, 3, 3], 2)];
    let report = grad_check_inputs(
        |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let w = g.constant(uniform(&[2, 3, 3, 3], 3));
            let c = g.mul(c, w)?;
            Ok(g.sum(c))
        },
        &inputs,
        EPS,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[1.0, 0.0]);
    let loss = g.sum(r);
    assert_eq!(g.backward(loss).unwrap().get(x).data(), &[1.0, 0.0]);

    let z = g.variable(Tensor::new([3], vec![0.0, -800.0, 800.0]).unwrap());
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5, 0.0, 1.0]);
    assert!(g.value(s).is_finite());

    let kink = g.variable(Tensor::scalar(0.0));
    let r = g.relu(kink);
    let loss = g.sum(r);
    assert_eq!(g.backward(loss).unwrap().get(kink).data(), &[0.0]);

    let a = g.constant(Tensor::zeros([2]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn add_gradient_is_one_per_operand() {
    let a = uniform(&[2, 3], 1);
    let b = uniform(&[2, 3], 2);
    let mut g = Graph::new();
    let (va, vb) = (g.variable(a.clone()), g.variable(b.clone()));
    let s = g.add(va, vb).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(va), Tensor::full([2, 3], 1.0));
    assert_eq!(grads.get(vb), Tensor::full([2, 3], 1.0));
    let report = grad_check_inputs(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            Ok(g.sum(s))
        },
        &[a, b],
        EPS,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL);
}

#[test]
fn backward_closed_forms() {
    let x0 = uniform(&[3, 4], 5);
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let loss = g.sum(x);
    assert_eq!(g.backward(loss).unwrap().get(x), Tensor::full([3, 4], 1.0));

    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grad = g.backward(loss).unwrap().get(x);
    for (gi, xi) in grad.data().iter().zip(x0.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros([2, 2]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::InvalidShape { .. })));
}

#[test]
fn unreachable_parameter_has_exactly_zero_gradient() {
    let mut g = Graph::new();
    let used = g.variable(uniform(&[4], 1));
    let unused = g.variable(uniform(&[3], 2));
    let _dangling = g.relu(unused);
    let loss = g.sum(used);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused), Tensor::zeros([3]));
}

#[test]
fn gradient_accumulates_over_shared_inputs() {
    // loss = sum(x + x) + sum(relu(x)) exercises fan-out accumulation
    let x0 = away_from_zero(&[5], 3);
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let d = g.add(x, x).unwrap();
    let r = g.relu(x);
    let s = g.add(d, r).unwrap();
    let loss = g.sum(s);
    let grad = g.backward(loss).unwrap().get(x);
    for (gi, xi) in grad.data().iter().zip(x0.data()) {
        assert_eq!(*gi, if *xi > 0.0 { 3.0 } else { 2.0 });
    }
}

#[test]
fn linear_and_reshape_gradients() {
    let inputs = [uniform(&[2, 1, 2, 3], 1), uniform(&[4, 6], 2), uniform(&[4], 3)];
    let report = grad_check_inputs(
        |g, v| {
            let flat = g.reshape(v[0], [2, 6])?;
            let y = g.linear(flat, v[1], v[2])?;
            let y = g.sigmoid(y);
            Ok(g.mean(y))
        },
        &inputs,
        EPS,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.checked, 12 + 24 + 4);
    assert!(report.max_rel_error < TOL);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut r = rng::rng(4);
    let pred = Tensor::from_fn([1, 1, 4, 4], |_| r.random_range(0.05..0.95));
    let target = Tensor::from_fn([1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let err = grad_check(|g, p| g.bce(p, &target), &pred, EPS).unwrap();
    assert!(err < TOL);
}

#[test]
fn sigmoid_bce_matches_the_two_op_chain() {
    let mut r = rng::rng(5);
    let z = Tensor::from_fn([1, 1, 4, 4], |_| r.random_range(-4.0..4.0));
    let target = Tensor::from_fn([1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let err = grad_check(|g, z| g.sigmoid_bce(z, &target), &z, EPS).unwrap();
    assert!(err < TOL);

    let mut g = Graph::new();
    let zv = g.variable(z.clone());
    let fused = g.sigmoid_bce(zv, &target).unwrap();
    let p = g.sigmoid(zv);
    let chain = g.bce(p, &target).unwrap();
    assert!((g.value(fused).data()[0] - g.value(chain).data()[0]).abs() < 1e-15);
    let a = g.backward(fused).unwrap().take(zv);
    let b = g.backward(chain).unwrap().take(zv);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn sigmoid_bce_keeps_a_gradient_when_saturated() {
    let z = Tensor::new(vec![2], vec![-80.0, 80.0]).unwrap();
    let target = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let zv = g.variable(z.clone());
    let fused = g.sigmoid_bce(zv, &target).unwrap();
    let p = g.sigmoid(zv);
    let chain = g.bce(p, &target).unwrap();
    assert!((g.value(fused).data()[0] + BCE_CLAMP.ln()).abs() < 1e-9);
    let dz = g.backward(fused).unwrap().take(zv);
    assert!((dz.data()[0] + 0.5).abs() < 1e-12 && (dz.data()[1] - 0.5).abs() < 1e-12);
    assert!(g.backward(chain).unwrap().take(zv).data().iter().all(|&d| d == 0.0));
}

#[test]
fn grad_check_is_tight_on_linear_functions() {
    let w = uniform(&[10], 2);
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let y = g.mul(x, w)?;
            Ok(g.sum(y))
        },
        &uniform(&[10], 1),
        EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_flags_or_skips_relu_kinks() {
    // x = 0 sits exactly on the kink: central differences give 0.5
    let x = Tensor::new([1], vec![0.0]).unwrap();
    let f = |g: &mut Graph, v: &[Var]| {
        let r = g.relu(v[0]);
        Ok(g.sum(r))
    };
    let naive = grad_check_inputs(f, std::slice::from_ref(&x), EPS, &GradCheckOptions::default()).unwrap();
    assert!(naive.max_rel_error > TOL);
    let skipping = GradCheckOptions {
        skip_kinks: true,
        ..GradCheckOptions::default()
    };
    let report = grad_check_inputs(f, std::slice::from_ref(&x), EPS, &skipping).unwrap();
    assert_eq!((report.checked, report.skipped), (0, 1));
}

#[test]
fn conv_relu_sum_chain() {
    let inputs = [away_from_zero(&[1, 2, 5, 5], 21), uniform(&[2, 2, 3, 3], 22), uniform(&[2], 23)];
    let opts = GradCheckOptions {
        skip_kinks: true,
        ..GradCheckOptions::default()
    };
    let report = grad_check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Same)?;
            let y = g.relu(y);
            Ok(g.sum(y))
        },
        &inputs,
        EPS,
        &opts,
    )
    .unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn differentiable_ops_pass_on_twenty_seeds() {
    type Case = fn(&mut Graph, &[Var]) -> crate::Result<Var>;
    let cases: [(&str, Vec<Vec<usize>>, Case); 6] = [
        ("conv2d", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3], vec![2]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], PaddingMode::Same)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("maxpool2", vec![vec![1, 2, 4, 4]], |g, v| {
            let y = g.maxpool2(v[0])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("upsample2", vec![vec![1, 2, 2, 3]], |g, v| {
            let y = g.upsample2(v[0])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("concat", vec![vec![1, 1, 2, 2], vec![1, 2, 2, 2]], |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("add+relu", vec![vec![6], vec![6]], |g, v| {
            let y = g.add(v[0], v[0])?;
            let y = g.relu(y);
            let z = g.mul(y, v[1])?;
            Ok(g.sum(z))
        }),
        ("sigmoid", vec![vec![2, 3]], |g, v| {
            let y = g.sigmoid(v[0]);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
    ];
    for (name, shapes, f) in cases {
        for seed in 0..20u64 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| away_from_zero(s, 1000 * seed + i as u64))
                .collect();
            let report = grad_check_inputs(f, &inputs, EPS, &GradCheckOptions::default()).unwrap();
            assert!(report.max_rel_error < TOL, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(uniform(&[2, 3, 8, 8], 1));
        let k = g.constant(uniform(&[4, 3, 3, 3], 2));
        let b = g.constant(uniform(&[4], 3));
        let y = g.conv2d(x, k, b, PaddingMode::Same).unwrap();
        let y = g.relu(y);
        let y = g.maxpool2(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
