use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;
use crate::tensor::{grad_check_inputs, GradCheckOptions, Graph, Tensor};

// Closed-form parameter counts, written independently of the builders.
fn conv_count(inp: usize, out: usize, k: usize) -> usize {
    out * inp * k * k + out
}

fn split(w: usize) -> (usize, usize, usize) {
    let c1 = ((w as f64) / 6.0 + 0.5).floor() as usize;
    let c2 = ((w as f64) / 3.0 + 0.5).floor() as usize;
    (c1, c2, w - c1 - c2)
}

fn multires_count(inp: usize, w: usize) -> usize {
    let (c1, c2, c3) = split(w);
    conv_count(inp, c1, 3) + conv_count(c1, c2, 3) + conv_count(c2, c3, 3) + conv_count(inp, w, 1)
}

fn res_path_count(ch: usize, len: usize) -> usize {
    len * (conv_count(ch, ch, 3) + conv_count(ch, ch, 1))
}

fn multiresunet_count(depth: usize, base: usize) -> usize {
    let w = |l: usize| base << l;
    let mut total = 0;
    let mut inp = 1;
    for l in 0..depth {
        total += multires_count(inp, w(l)) + res_path_count(w(l), depth - l);
        inp = w(l);
    }
    total += multires_count(inp, w(depth));
    for l in (0..depth).rev() {
        total += conv_count(w(l + 1), w(l), 1) + multires_count(2 * w(l), w(l));
    }
    total + conv_count(w(0), 1, 1)
}

fn unet_count(depth: usize, base: usize) -> usize {
    let w = |l: usize| base << l;
    let mut total = 0;
    let mut inp = 1;
    for l in 0..=depth {
        total += conv_count(inp, w(l), 3) + conv_count(w(l), w(l), 3);
        inp = w(l);
    }
    for l in (0..depth).rev() {
        total += conv_count(w(l + 1), w(l), 1) + conv_count(2 * w(l), w(l), 3) + conv_count(w(l), w(l), 3);
    }
    total + conv_count(w(0), 1, 1)
}

fn cdcnn_count(cfg: &NetConfig) -> usize {
    let (c0, c1, c2) = (cfg.base_width / 2, cfg.base_width, 2 * cfg.base_width);
    let q = cfg.input_hw / 4;
    let flat = c2 * q * q;
    let bott = cfg.bottleneck_channels * q * q;
    let [f1, f2] = cfg.fc_widths;
    conv_count(1, c0, 3)
        + conv_count(c0, c1, 3)
        + conv_count(c1, c2, 3)
        + (flat * f1 + f1)
        + (f1 * f2 + f2)
        + (f2 * bott + bott)
        + conv_count(cfg.bottleneck_channels, c1, 3)
        + conv_count(c1, c0, 3)
        + conv_count(c0, 1, 3)
}

fn cfg(arch: Arch, depth: usize, base: usize, hw: usize) -> NetConfig {
    NetConfig {
        arch,
        depth,
        base_width: base,
        input_hw: hw,
        seed: 5,
        ..NetConfig::default()
    }
}

fn random_image(n: usize, hw: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn([n, 1, hw, hw], |_| r.random::<f64>())
}

#[test]
fn multires_block_w6_has_99_parameters() {
    let spec = MultiResBlockSpec::new(1, 6).unwrap();
    assert_eq!((spec.c1, spec.c2, spec.c3), (1, 2, 3));
    let g = multires_block_graph(&spec, 8).unwrap();
    assert_eq!(count_params(&g), 99);
    assert_eq!(multires_count(1, 6), 99);
    assert_eq!(g.output_shape(), &[6, 8, 8]);
}

#[test]
fn res_path_ch2_len1_has_44_parameters() {
    let g = res_path_graph(2, 1, 5).unwrap();
    assert_eq!(count_params(&g), 44);
    assert_eq!(res_path_count(2, 1), 44);
    assert!(res_path_graph(2, 0, 5).is_err());
}

#[test]
fn single_conv_has_ten_parameters() {
    let (mut b, x) = GraphBuilder::new(1, 4, 4);
    let y = b.conv(x, 1, 3, "c").unwrap();
    let g = b.finish(y, None);
    assert_eq!(count_params(&g), 10);
}

#[test]
fn zero_initialized_blocks_output_zero() {
    let spec = MultiResBlockSpec::new(3, 12).unwrap();
    for g in [multires_block_graph(&spec, 8).unwrap(), res_path_graph(3, 2, 8).unwrap()] {
        let model = Model::new(g.clone(), ParamSet::zeros(&g)).unwrap();
        let mut r = rng::rng(1);
        let x = Tensor::from_fn([2, 3, 8, 8], |_| r.random_range(-1.0..1.0));
        let y = model.predict(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(&y.shape()[2..], &[8, 8]);
    }
}

#[test]
fn res_path_preserves_shape() {
    for (h, ch, len) in [(3, 2, 1), (7, 4, 3), (16, 1, 2)] {
        let g = res_path_graph(ch, len, h).unwrap();
        assert_eq!(g.output_shape(), &[ch, h, h]);
    }
}

#[test]
fn multires_channel_split_covers_width() {
    for w in 6..400 {
        let spec = MultiResBlockSpec::new(1, w).unwrap();
        assert_eq!(spec.c1 + spec.c2 + spec.c3, w);
        assert!(spec.c1 >= 1 && spec.c1 <= spec.c2 && spec.c2 <= spec.c3);
        assert_eq!((spec.c1, spec.c2, spec.c3), split(w));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(build(&cfg(Arch::Unet, 4, 16, 40)).is_err());
    assert!(build(&cfg(Arch::MultiResUnet, 3, 4, 64)).is_err());
    assert!(build(&cfg(Arch::Cdcnn, 4, 16, 66)).is_err());
    assert!(build_unet(&cfg(Arch::MultiResUnet, 2, 6, 16)).is_err());
    let mut bad = cfg(Arch::MultiResUnet, 3, 6, 32);
    bad.res_path_lengths = Some(vec![2, 1]);
    assert!(build(&bad).is_err());
}

#[test]
fn multiresunet_depth4_layout() {
    let c = cfg(Arch::MultiResUnet, 4, 16, 64);
    let g = build(&c).unwrap();
    assert_eq!(g.bottleneck_hw(), (4, 4));
    assert_eq!(g.output_shape(), &[1, 64, 64]);
    assert_eq!(count_params(&g), multiresunet_count(4, 16));
    let model = Model::from_config(&c).unwrap();
    assert_eq!(model.params.count(), count_params(&g));
    let y = model.predict(&random_image(1, 64, 3)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn unet_depth4_layout() {
    let c = cfg(Arch::Unet, 4, 16, 64);
    let g = build(&c).unwrap();
    assert_eq!(g.bottleneck_hw(), (4, 4));
    assert_eq!(count_params(&g), unet_count(4, 16));
    let y = Model::from_config(&c).unwrap().predict(&random_image(1, 64, 4)).unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn cdcnn_layer_census_and_bottleneck() {
    let c = cfg(Arch::Cdcnn, 4, 16, 64);
    let g = build(&c).unwrap();
    let census = g.census();
    assert_eq!(
        (census.conv, census.pool, census.upsample, census.fc, census.flatten),
        (6, 2, 2, 3, 1)
    );
    let flatten_input = g
        .nodes()
        .iter()
        .find_map(|n| match n.op {
            LayerOp::Flatten(x) => Some(g.node_shape(x).to_vec()),
            _ => None,
        })
        .unwrap();
    assert_eq!(&flatten_input[1..], &[16, 16]);
    assert_eq!(count_params(&g), cdcnn_count(&c));
    let y = Model::from_config(&c).unwrap().predict(&random_image(2, 64, 5)).unwrap();
    assert_eq!(y.shape(), &[2, 1, 64, 64]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn config_grid_outputs_match_input_extent() {
    for arch in Arch::ALL {
        for depth in [2, 3, 4] {
            for base in [6, 8, 16] {
                for hw in [32, 64] {
                    let c = cfg(arch, depth, base, hw);
                    let model = Model::from_config(&c).unwrap();
                    let expected = match arch {
                        Arch::MultiResUnet => multiresunet_count(depth, base),
                        Arch::Unet => unet_count(depth, base),
                        Arch::Cdcnn => cdcnn_count(&c),
                    };
                    assert_eq!(count_params(&model.graph), expected, "{c:?}");
                    let y = model.predict(&random_image(1, hw, depth as u64)).unwrap();
                    assert_eq!(y.shape(), &[1, 1, hw, hw]);
                    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{c:?}");
                }
            }
        }
    }
}

#[test]
fn construction_is_pure() {
    for arch in Arch::ALL {
        let c = cfg(arch, 2, 8, 32);
        let (a, b) = (Model::from_config(&c).unwrap(), Model::from_config(&c).unwrap());
        assert_eq!(a.graph, b.graph);
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let other = init_params(&a.graph, c.seed + 1);
        assert_ne!(other, a.params);
    }
}

#[test]
fn init_is_he_uniform_with_zero_biases() {
    let g = build(&cfg(Arch::Unet, 2, 6, 16)).unwrap();
    let p = init_params(&g, 9);
    for (spec, t) in g.params().iter().zip(p.tensors()) {
        match spec.role {
            ParamRole::Bias => assert!(t.data().iter().all(|&v| v == 0.0)),
            ParamRole::Weight => {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() < bound));
                assert!(t.data().iter().any(|&v| v != 0.0));
            }
        }
    }
}

/// Every named parameter tensor is reachable from the loss: it gets a
/// nonzero gradient from a random input/target pair.
#[test]
fn every_parameter_receives_gradient() {
    for arch in Arch::ALL {
        for c in [cfg(arch, 2, 6, 16), cfg(arch, 3, 8, 32)] {
            let model = Model::from_config(&c).unwrap();
            let mut g = Graph::new();
            let mut r = rng::rng(100);
            let hw = c.input_hw;
            let x = g.constant(Tensor::from_fn([2, 1, hw, hw], |_| r.random::<f64>()));
            let (out, vars) = model.forward(&mut g, x).unwrap();
            let target = Tensor::from_fn([2, 1, hw, hw], |_| r.random_bool(0.4) as u8 as f64);
            let loss = g.bce(out, &target).unwrap();
            let grads = g.backward(loss).unwrap();
            for (spec, v) in model.graph.params().iter().zip(&vars) {
                let nonzero = grads.get(*v).data().iter().filter(|d| **d != 0.0).count();
                assert!(nonzero > 0, "{arch}: {} gets no gradient", spec.name);
            }
        }
    }
}

#[test]
fn multires_block_gradients_match_finite_differences() {
    let spec = MultiResBlockSpec::new(1, 6).unwrap();
    let graph = multires_block_graph(&spec, 6).unwrap();
    let params = init_params(&graph, 3);
    let mut r = rng::rng(8);
    let input = Tensor::from_fn([1, 1, 6, 6], |_| r.random_range(-1.0..1.0));
    let weights = Tensor::from_fn([1, 6, 6, 6], |_| r.random_range(-1.0..1.0));
    let mut all = vec![input];
    all.extend(params.tensors().iter().cloned());
    let report = grad_check_inputs(
        |g, v| {
            let out = graph.forward(g, &v[1..], v[0])?;
            let w = g.constant(weights.clone());
            let y = g.mul(out, w)?;
            Ok(g.sum(y))
        },
        &all,
        1e-3,
        &GradCheckOptions {
            skip_kinks: true,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.checked >= 36 + 99 - report.skipped);
    assert!(report.skipped * 10 < report.checked, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let g = build(&cfg(Arch::Unet, 2, 6, 16)).unwrap();
    let params = init_params(&g, 1);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &params).unwrap();
    assert_eq!(&bytes[..5], CHECKPOINT_MAGIC);
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(&bad[..]).is_err());
    let back = read_checkpoint(&bytes[..]).unwrap();
    back.check_against(&g).unwrap();
}

#[test]
fn checkpoint_layout_is_little_endian() {
    let p = ParamSet::new(vec!["w".into()], vec![Tensor::new([2], vec![1.0, -2.5]).unwrap()]).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &p).unwrap();
    let mut expected = b"TSEG1".to_vec();
    expected.extend(1u32.to_le_bytes());
    expected.push(b'w');
    expected.extend(1u32.to_le_bytes());
    expected.extend(2u32.to_le_bytes());
    expected.extend(1.0f64.to_le_bytes());
    expected.extend((-2.5f64).to_le_bytes());
    assert_eq!(bytes, expected);
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<u64>()),
            0..5,
        )
    ) {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (i, (shape, seed)) in tensors.iter().enumerate() {
            let mut r = rng::rng(*seed);
            names.push(format!("layer{i}.weight"));
            values.push(Tensor::from_fn(shape.clone(), |_| f64::from_bits(r.random::<u64>() >> 2)));
        }
        let params = ParamSet::new(names, values).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        prop_assert_eq!(back.names(), params.names());
        for (a, b) in back.tensors().iter().zip(params.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
