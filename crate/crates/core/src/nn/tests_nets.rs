use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{grad_check_coords, DEFAULT_STEP};
use crate::tensor::NormMode;

fn tiny() -> NetConfig {
    NetConfig {
        image_size: 16,
        channels: 1,
        base_width: 2,
        d: 4,
        blocks: 2,
        ..NetConfig::default()
    }
}

fn images(b: usize, c: &NetConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, c.channels, c.image_size, c.image_size], |_| rng.random_range(-1.0..1.0))
}

fn top_singular_value(w: &Tensor<f64>) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let m = DMatrix::from_row_slice(rows, cols, w.data());
    m.singular_values().max()
}

#[test]
fn generator_shape_and_range() {
    let cfg = NetConfig::default();
    let (mut g, _) = init_params::<f32>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Tensor::from_fn(&[2, cfg.d], |_| rng.random_range(-3.0f32..3.0));
    let a = g.generate(&z, NormMode::Train).unwrap();
    assert_eq!(a.shape(), &[2, 3, 64, 64]);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let b = g.generate(&z, NormMode::Train).unwrap();
    assert_eq!(a, b);
    let err = g.generate(&Tensor::zeros(&[2, 7]), NormMode::Eval);
    assert!(matches!(err, Err(Error::InvalidInput(_))));
}

#[test]
fn modulated_generator_starts_as_plain_affine() {
    let cfg = NetConfig { g_modulation: true, ..tiny() };
    let (mut g, _) = init_params::<f64>(&cfg, 5).unwrap();
    let z = Tensor::from_fn(&[3, cfg.d], |i| (i as f64 * 0.37).sin());
    let out = g.generate(&z, NormMode::Train).unwrap();
    assert_eq!(out.shape(), &[3, 1, 16, 16]);
    assert!(g.params().by_name("g.block0.mod.gamma.w").is_some());
    assert!(g.params().by_name("g.block0.bn.gamma").is_none());
}

#[test]
fn discriminator_shapes_and_duplicate_rows() {
    let cfg = NetConfig::default();
    let (_, mut d) = init_params::<f32>(&cfg, 6).unwrap();
    let one = images(1, &cfg, 7).cast::<f32>();
    let batch = Tensor::stack(&[&one, &one, &one, &one]).unwrap().reshape(&[4, 3, 64, 64]).unwrap();
    let tape = Tape::new();
    let bound = d.bind_all(&tape, false);
    let out = d.forward(&bound, tape.constant(batch), NormMode::Train).unwrap();
    assert_eq!(out.score.shape(), vec![4]);
    assert_eq!(out.encoding.shape(), vec![4, 128]);
    let (s, e) = (out.score.value(), out.encoding.value());
    for i in 1..4 {
        assert_eq!(s.data()[i], s.data()[0]);
        assert_eq!(e.row(i), e.row(0));
    }
    let wrong = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    assert!(d.forward(&bound, wrong, NormMode::Eval).is_err());
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let cfg = tiny();
    let (_, mut d) = init_params::<f64>(&cfg, 8).unwrap();
    let x = images(2, &cfg, 9);
    // The estimate is differentiated with u, v held fixed, which is exact
    // once u is a singular vector; warm it up first.
    d.set_sn_iters(200);
    let tape = Tape::new();
    d.forward(&d.bind_all(&tape, false), tape.constant(x.clone()), NormMode::Train).unwrap();
    d.set_sn_iters(1);
    let params: Vec<Tensor<f64>> = d.params().iter().map(|(_, t)| t.clone()).collect();
    for mode in [NormMode::Train, NormMode::Eval] {
        let err = grad_check_coords(
            |tape, vars| {
                let bound = Bound { vars: vars.to_vec() };
                let out = d.forward_frozen(&bound, tape.constant(x.clone()), mode).unwrap();
                out.score.sum_all()?.add(out.encoding.sum_all()?)
            },
            &params,
            DEFAULT_STEP,
            40,
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: max relative error {err}");
    }
}

#[test]
fn spectral_estimate_matches_dense_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = Tensor::<f64>::from_fn(&[32, 48], |_| rng.random_range(-1.0..1.0));
    let mut st = SpectralNormState::random(32, &mut rng);
    let (out, sigma) = spectral_normalize(&w, &mut st, 50).unwrap();
    let truth = top_singular_value(&w);
    assert!((sigma - truth).abs() < 1e-3, "{sigma} vs {truth}");
    assert!((top_singular_value(&out) - 1.0).abs() < 1e-3);
    assert!((st.u.l2_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn normalized_conv_weights_are_bounded() {
    let cfg = NetConfig { image_size: 32, blocks: 3, base_width: 8, channels: 3, ..NetConfig::default() };
    let (_, mut d) = init_params::<f64>(&cfg, 11).unwrap();
    d.set_sn_iters(5);
    let x = images(2, &cfg, 12);
    let tape = Tape::new();
    let bound = d.bind_all(&tape, false);
    for _ in 0..100 {
        d.forward(&bound, tape.constant(x.clone()), NormMode::Train).unwrap();
    }
    let weights: Vec<Tensor<f64>> = (0..cfg.blocks)
        .map(|i| d.params().by_name(&format!("d.block{i}.w")).unwrap().clone())
        .collect();
    for (w, st) in weights.iter().zip(d.sn_states_mut()) {
        let (out, _) = spectral_normalize(w, st, 5).unwrap();
        let top = top_singular_value(&out);
        assert!(top <= 1.0 + 1e-2, "top singular value {top}");
    }
}

#[test]
fn heads_are_independent() {
    let cfg = tiny();
    let (_, d) = init_params::<f64>(&cfg, 13).unwrap();
    let x = images(3, &cfg, 14);
    let run = |net: &DiscriminatorNet<f64>| {
        let tape = Tape::new();
        let bound = net.bind_all(&tape, false);
        let out = net.forward_frozen(&bound, tape.constant(x.clone()), NormMode::Eval).unwrap();
        (Tensor::clone(&out.score.value()), Tensor::clone(&out.encoding.value()))
    };
    let (s0, e0) = run(&d);
    let mut rf = d.clone();
    rf.params_mut().by_name_mut("d.rf.w").unwrap().data_mut()[0] += 0.5;
    let (s1, e1) = run(&rf);
    assert_ne!(s0, s1);
    assert_eq!(e0, e1);
    let mut enc = d.clone();
    enc.params_mut().by_name_mut("d.enc.w").unwrap().data_mut()[0] += 0.5;
    let (s2, e2) = run(&enc);
    assert_eq!(s0, s2);
    assert_ne!(e0, e2);
}

#[test]
fn parameter_count_is_fixed_by_config() {
    let (g, d) = init_params::<f32>(&NetConfig::default(), 0).unwrap();
    assert_eq!(g.params().count(), 1_225_619);
    assert_eq!(d.params().count(), 722_817);
    let blocks = |p: &ParamStore<f32>, prefix: &str| p.iter().filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".w")).count();
    assert_eq!(blocks(d.params(), "d.block"), 4);
    assert_eq!(blocks(g.params(), "g.block"), 4);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = tiny();
    let (g1, d1) = init_params::<f64>(&cfg, 21).unwrap();
    let (g2, d2) = init_params::<f64>(&cfg, 21).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(d1, d2);
    let (g3, _) = init_params::<f64>(&cfg, 22).unwrap();
    assert_ne!(g1, g3);
    assert!(init_params::<f64>(&NetConfig { d: 0, ..cfg }, 1).is_err());
}

#[test]
fn weight_scale_follows_fan_in() {
    let (g, d) = init_params::<f64>(&NetConfig::default(), 31).unwrap();
    let checked = g
        .params()
        .iter()
        .chain(d.params().iter())
        .filter(|(n, t)| n.ends_with(".w") && t.numel() >= 1000)
        .map(|(name, t)| {
            let fan_in = match t.rank() {
                2 => t.shape()[0],
                _ if name.starts_with("g.block") => t.shape()[0] * 16,
                _ => t.numel() / t.shape()[0],
            };
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let target = (2.0 / fan_in as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.2, "{name}: std {std} vs {target}");
        })
        .count();
    assert!(checked >= 8);
    let gamma = g.params().by_name("g.block0.bn.gamma").unwrap();
    assert!(gamma.data().iter().all(|&v| v == 1.0));
    assert!(g.params().by_name("g.block0.bn.beta").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(d.sn_states().iter().all(|s| (s.u.l2_norm() - 1.0).abs() < 1e-12));
}

#[test]
fn snapshot_is_isolated_from_live_updates() {
    let cfg = tiny();
    let (_, mut d) = init_params::<f64>(&cfg, 41).unwrap();
    let x = images(2, &cfg, 42);
    let snap = d.snapshot();
    let before = snap.encode(&x).unwrap();
    assert_eq!(before, d.encode(&x).unwrap());
    for (_, t) in d.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
    }
    assert_eq!(snap.encode(&x).unwrap(), before);
    assert_ne!(d.encode(&x).unwrap(), before);
    let restored = DiscriminatorNet::restore(&snap);
    assert_eq!(restored.encode(&x).unwrap(), before);
}
