use super::*;
use crate::nets::{save_checkpoint, write_checkpoint, Arch, NetConfig};
use crate::phantom::{generate_subject, PhantomParams, SubjectKind};
use crate::prep::{preprocess, PreprocessConfig};
use crate::tensor::{grad_check, Tensor};
use rand::Rng;

fn scalar(v: f64) -> Vec<Tensor> {
    vec![Tensor::new(vec![1], vec![v]).unwrap()]
}

#[test]
fn bce_closed_forms() {
    let target = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let exact = bce_value(&target, &target).unwrap();
    assert!(exact >= 0.0 && exact <= -(1.0 - 1e-7f64).ln() + 1e-15, "{exact}");
    let half = Tensor::full([1, 1, 2, 2], 0.5);
    assert!((bce_value(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let soft = Tensor::full([1, 1, 2, 2], 0.3);
    assert!((bce_value(&half, &soft).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce_value(&half, &Tensor::zeros([4])).is_err());
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut r = crate::rng::rng(17);
    let target = Tensor::from_fn([1, 1, 4, 4], |_| f64::from(r.random_bool(0.5) as u8));
    let pred = Tensor::from_fn([1, 1, 4, 4], |_| r.random_range(0.05..0.95));
    let err = grad_check(|g, x| bce_loss(g, x, &target), &pred, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn bce_is_nonnegative() {
    let mut r = crate::rng::rng(3);
    for _ in 0..200 {
        let p = Tensor::from_fn([6], |_| r.random_range(0.0..=1.0));
        let y = Tensor::from_fn([6], |_| r.random_range(0.0..=1.0));
        assert!(bce_value(&p, &y).unwrap() >= 0.0);
    }
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut p = scalar(0.7);
    let g = scalar(0.0);
    let mut st = AdamState::new(&p);
    let cfg = TrainConfig::default();
    for _ in 0..5 {
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
    }
    assert_eq!(p[0].data(), &[0.7]);
    assert_eq!(st.m, vec![vec![0.0]]);
    assert_eq!(st.v, vec![vec![0.0]]);
    assert_eq!(st.step, 5);
}

#[test]
fn adam_first_step_is_learning_rate() {
    let cfg = TrainConfig::default();
    for g0 in [0.5, 3.0, 1e-3] {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(g0), &mut st, &cfg).unwrap();
        let expected = 1.0 - cfg.learning_rate * g0 / (g0 + cfg.epsilon);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-8);
    }
}

#[test]
fn adam_on_square_matches_scalar_simulation() {
    let cfg = TrainConfig::default();
    let mut p = scalar(1.0);
    let mut st = AdamState::new(&p);
    // independent scalar run of the update equations
    let (mut q, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut prev = f64::INFINITY;
    for t in 1..=100 {
        let g = 2.0 * p[0].data()[0];
        adam_step(&mut p, &scalar(g), &mut st, &cfg).unwrap();

        let gq = 2.0 * q;
        m = 0.9 * m + 0.1 * gq;
        v = 0.999 * v + 0.001 * gq * gq;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        q -= 1e-3 * mh / (vh.sqrt() + 1e-8);

        let now = p[0].data()[0];
        assert!((now - q).abs() < 1e-14);
        assert!(now.abs() < prev, "step {t}");
        prev = now.abs();
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = scalar(1.0);
    let mut st = AdamState::new(&p);
    let g = vec![Tensor::zeros([2])];
    assert!(adam_step(&mut p, &g, &mut st, &TrainConfig::default()).is_err());
}

fn phantom_pair(hw: usize, seed: u64) -> TrainPair {
    let params = PhantomParams { image_hw: hw, ..PhantomParams::default() };
    let s = generate_subject(seed, &params, SubjectKind::Volunteer).unwrap();
    let image = preprocess(&s.frames[0], &PreprocessConfig::for_height(hw)).unwrap().image;
    TrainPair { image, mask: s.mask }
}

fn thresholded_pair(hw: usize, seed: u64) -> TrainPair {
    let image = phantom_pair(hw, seed).image;
    let mask = Gray8Frame {
        pixels: image.pixels.iter().map(|&p| if p > 127 { 255 } else { 0 }).collect(),
        ..image.clone()
    };
    TrainPair { image, mask }
}

fn small_model(arch: Arch, hw: usize) -> Model {
    let cfg = NetConfig { arch, depth: 2, base_width: 6, input_hw: hw, seed: 4, ..NetConfig::default() };
    Model::from_config(&cfg).unwrap()
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let mut model = small_model(Arch::Unet, 16);
    let before = model.params.clone();
    let pairs = vec![phantom_pair(16, 1), phantom_pair(16, 2)];
    let cfg = TrainConfig { epochs: 3, batch_size: 1, learning_rate: 0.0, ..TrainConfig::default() };
    let h = train(&mut model, &pairs, &cfg).unwrap();
    assert_eq!(model.params, before);
    assert!(h.epochs.windows(2).all(|w| w[0].loss == w[1].loss));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let pairs: Vec<_> = (0..4).map(|s| phantom_pair(16, s)).collect();
    let cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = small_model(Arch::MultiResUnet, 16);
        let h = train(&mut m, &pairs, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m.params).unwrap();
        (bytes, h.epochs.iter().map(|e| e.loss).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);

    let other = TrainConfig { seed: 10, ..cfg.clone() };
    let mut m = small_model(Arch::MultiResUnet, 16);
    train(&mut m, &pairs, &other).unwrap();
    let mut c = Vec::new();
    write_checkpoint(&mut c, &m.params).unwrap();
    assert_ne!(a, c);

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path().join("m.tseg"), &m.params).unwrap();
}

#[test]
fn trivial_pair_overfits_within_thirty_epochs() {
    let pair = thresholded_pair(64, 5);
    let cfg = NetConfig { arch: Arch::MultiResUnet, depth: 3, base_width: 12, input_hw: 64, seed: 1, ..NetConfig::default() };
    let mut model = Model::from_config(&cfg).unwrap();
    let tc = TrainConfig { epochs: 30, batch_size: 1, ..TrainConfig::default() };
    let h = train(&mut model, &[pair], &tc).unwrap();
    let last = h.final_loss().unwrap();
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn train_rejects_bad_input() {
    let mut model = small_model(Arch::Cdcnn, 16);
    assert!(train(&mut model, &[], &TrainConfig::default()).is_err());
    let wrong = phantom_pair(32, 1);
    assert!(train(&mut model, &[wrong], &TrainConfig::default()).is_err());
    let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(train(&mut model, &[phantom_pair(16, 1)], &bad).is_err());
}

#[test]
fn history_csv_round_trip() {
    let h = TrainHistory {
        epochs: vec![
            EpochRecord { epoch: 1, loss: 0.5, seconds: 1.25 },
            EpochRecord { epoch: 2, loss: 0.25, seconds: 1.5 },
        ],
    };
    let text = h.to_csv();
    assert_eq!(text, "epoch,loss,seconds\n1,0.500000000,1.250\n2,0.250000000,1.500\n");
    assert_eq!(TrainHistory::parse_csv(&text).unwrap(), h);
    let losses = h.to_loss_csv();
    assert_eq!(losses, "epoch,loss\n1,0.500000000\n2,0.250000000\n");
    let back = TrainHistory::parse_csv(&losses).unwrap();
    assert_eq!(back.epochs.iter().map(|e| (e.loss, e.seconds)).collect::<Vec<_>>(), [(0.5, 0.0), (0.25, 0.0)]);
    assert!(TrainHistory::parse_csv("epoch,loss\n1,0.5,2.0\n").is_err());
    assert!(TrainHistory::parse_csv("loss\n1").is_err());
}

#[test]
fn batches_scale_and_binarize() {
    let img = Gray8Frame::new(2, 1, vec![0, 255]).unwrap();
    let mask = Gray8Frame::new(2, 1, vec![127, 128]).unwrap();
    assert_eq!(image_batch(&[&img]).unwrap().data(), &[0.0, 1.0]);
    assert_eq!(mask_batch(&[&mask]).unwrap().data(), &[0.0, 1.0]);
    assert_eq!(image_batch(&[&img, &img]).unwrap().shape(), &[2, 1, 1, 2]);
}
