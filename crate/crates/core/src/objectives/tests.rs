use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{grad_check, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Evaluates a loss of constant inputs.
fn eval(inputs: &[Tensor<f64>], f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&vars).unwrap().item()
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn discriminator_hinge_examples() {
    let d = |r: &[f64], f: &[f64]| eval(&[t(&[r.len()], r), t(&[f.len()], f)], |v| adv_loss_d(v[0], v[1]));
    close(d(&[1.0], &[-1.0]), 0.0);
    close(d(&[0.0], &[0.0]), 2.0);
    close(d(&[-1.0, 1.0], &[1.0]), 3.0);
    let tape = Tape::<f64>::new();
    let empty = tape.constant(Tensor::zeros(&[0]));
    assert!(adv_loss_d(empty, tape.constant(t(&[1], &[0.0]))).is_err());
}

#[test]
fn generator_hinge_examples() {
    let g = |f: &[f64]| eval(&[t(&[f.len()], f)], |v| adv_loss_g(v[0]));
    close(g(&[0.0]), 0.0);
    close(g(&[1.0, 3.0]), -2.0);
    close(g(&[-5.0]), 5.0);
}

#[test]
fn mse_examples() {
    let m = |a: Tensor<f64>, b: Tensor<f64>| eval(&[a, b], |v| recon_mse(v[0], v[1]));
    let z = t(&[1, 2], &[1.0, -1.0]);
    close(m(z.clone(), z.clone()), 0.0);
    close(m(t(&[1, 2], &[0.0, 0.0]), z), 2.0);
    // per-sample squared norms 2 and 4
    close(m(t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]), Tensor::zeros(&[2, 2])), 3.0);
    let tape = Tape::<f64>::new();
    assert!(recon_mse(tape.constant(Tensor::zeros(&[1, 2])), tape.constant(Tensor::zeros(&[1, 3]))).is_err());
}

#[test]
fn bce_examples() {
    let b = |zh: Tensor<f64>, z: Tensor<f64>| eval(&[zh, z], |v| recon_bce(v[0], v[1]));
    let ln2 = std::f64::consts::LN_2;
    close(b(Tensor::zeros(&[2, 3]), Tensor::ones(&[2, 3])), ln2);
    close(b(Tensor::zeros(&[2, 3]), Tensor::full(&[2, 3], -1.0)), ln2);
    close(b(t(&[1, 2], &[2.0, -2.0]), t(&[1, 2], &[1.0, -1.0])), 0.126928);
    // -log(sigmoid(2)) by direct evaluation
    close(b(t(&[1, 2], &[2.0, -2.0]), t(&[1, 2], &[1.0, -1.0])), -(1.0 / (1.0 + (-2.0f64).exp())).ln());
    let tape = Tape::<f64>::new();
    let bad = recon_bce(tape.constant(Tensor::zeros(&[1, 2])), tape.constant(t(&[1, 2], &[1.0, 0.5])));
    assert!(matches!(bad, Err(Error::InvalidInput(_))));
}

#[test]
fn bce_is_stable_for_large_logits() {
    let v = eval(&[t(&[1, 2], &[800.0, -800.0]), t(&[1, 2], &[1.0, -1.0])], |v| recon_bce(v[0], v[1]));
    assert_eq!(v, 0.0);
    let v = eval(&[t(&[1, 1], &[-800.0]), t(&[1, 1], &[1.0])], |v| recon_bce(v[0], v[1]));
    close(v, 800.0);
}

#[test]
fn cosine_examples() {
    close(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    close(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
    close(cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), 2.0);
    assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    let rows = eval(&[t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]), t(&[2, 2], &[0.0, 2.0, 2.0, 2.0])], |v| {
        cosine_distance_rows(v[0], v[1])?.sum_all().map_err(Into::into)
    });
    close(rows, 1.0);
}

/// Unit vectors at angles whose cosine distances to `e1` are the given values.
fn at_distances(ds: &[f64]) -> Vec<f64> {
    ds.iter()
        .flat_map(|&d| {
            let c = 1.0 - d;
            [c, (1.0 - c * c).max(0.0).sqrt()]
        })
        .collect()
}

fn triplet(anchor: &[f64], pos: &[f64], neg: &[f64], rho: f64) -> f64 {
    let d = anchor.len();
    let a = t(&[1, d], anchor);
    let p = t(&[pos.len() / d, d], pos);
    let n = t(&[neg.len() / d, d], neg);
    eval(&[a, p, n], |v| triplet_loss(v[0], v[1], v[2], rho))
}

#[test]
fn triplet_examples() {
    let e1 = [1.0, 0.0];
    close(triplet(&e1, &at_distances(&[0.2, 0.2]), &at_distances(&[0.9, 0.9]), 0.5), 0.0);
    close(triplet(&e1, &at_distances(&[0.1, 0.6]), &at_distances(&[0.4, 0.8]), 0.5), 0.7);
    close(triplet(&e1, &e1, &at_distances(&[0.3, 0.7]), 0.5), 0.2);
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(&[2, 2]));
    assert!(triplet_loss(a, tape.constant(Tensor::ones(&[3, 2])), tape.constant(Tensor::ones(&[2, 2])), 0.5).is_err());
}

#[test]
fn triplet_averages_over_anchors() {
    let a = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
    let p = t(&[2, 2], &at_distances(&[0.6, 0.2]));
    let n = t(&[2, 2], &at_distances(&[0.4, 0.9]));
    close(eval(&[a, p, n], |v| triplet_loss(v[0], v[1], v[2], 0.5)), (0.7 + 0.0) / 2.0);
}

#[test]
fn regularizer_examples() {
    let r = |a: Tensor<f64>, b: Tensor<f64>| eval(&[a, b], |v| stage2_regularizer(v[0], v[1]));
    let x = t(&[1, 2], &[0.3, -0.7]);
    close(r(x.clone(), x.clone()), 0.0);
    close(r(t(&[1, 2], &[1.0, 0.0]), t(&[1, 2], &[0.0, 1.0])), 2.0);
    let y = t(&[1, 2], &[1.1, 0.2]);
    let base = r(x.clone(), y.clone());
    close(r(x.map(|v| 2.0 * v), y.map(|v| 2.0 * v)), 4.0 * base);
}

fn scalar_parts<'t>(tape: &'t Tape<f64>, adv: f64, recon: f64, triplet: f64, reg: f64) -> LossParts<'t, f64> {
    let c = |v: f64| Some(tape.constant(Tensor::scalar(v)));
    LossParts {
        adv: c(adv),
        recon: c(recon),
        triplet: c(triplet),
        reg: c(reg),
    }
}

#[test]
fn composition_examples() {
    let tape = Tape::new();
    let cfg = LossConfig::default();
    let parts = scalar_parts(&tape, 1.5, 0.4, 0.7, 0.5);
    close(total_stage1_d(&parts, &cfg).unwrap().item(), 1.9);
    close(total_stage2_d(&parts, &cfg).unwrap().item(), 0.8);
    let no_beta = LossConfig { beta: 0.0, ..cfg.clone() };
    let g = scalar_parts(&tape, -0.37, 0.91, 0.0, 0.0);
    assert_eq!(total_stage1_g(&g, &no_beta).unwrap().item(), -0.37);
    let plain = LossConfig { recon_kind: ReconKind::None, ..cfg.clone() };
    let only_adv = LossParts { adv: g.adv, ..LossParts::default() };
    assert_eq!(total_stage1_g(&only_adv, &plain).unwrap().item(), -0.37);
    assert!(total_stage1_g(&only_adv, &cfg).is_err());
    let single = LossConfig { triplet_kind: TripletKind::SingleStage, gamma: 0.5, ..cfg };
    close(total_stage1_d(&parts, &single).unwrap().item(), 1.5 + 0.5 * 0.4 + 0.5 * 0.7);
}

#[test]
fn prior_pairing() {
    let mut cfg = LossConfig::default();
    assert!(cfg.validate(PriorKind::Bernoulli).is_ok());
    assert!(cfg.validate(PriorKind::Uniform).is_err());
    cfg.recon_kind = ReconKind::Mse;
    assert!(cfg.validate(PriorKind::Uniform).is_ok());
    assert!(cfg.validate(PriorKind::Gaussian).is_ok());
    assert!(cfg.validate(PriorKind::Bernoulli).is_err());
    cfg.recon_kind = ReconKind::None;
    assert!(cfg.validate(PriorKind::Bernoulli).is_ok());
    cfg.rho = -0.1;
    assert!(matches!(cfg.validate(PriorKind::Uniform), Err(Error::InvalidConfig { field: "rho", .. })));
}

/// Random tensor with entries kept at least `gap` away from `kinks`.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

#[test]
fn losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = off_kink(&mut rng, &[5], &[1.0], 0.05);
    let fake = off_kink(&mut rng, &[4], &[-1.0], 0.05);
    let check = |err: f64, what: &str| assert!(err < 1e-4, "{what}: {err}");
    check(grad_check(|_, v| adv_loss_d(v[0], v[1]).map_err(unwrap_tensor), &[real, fake.clone()], DEFAULT_STEP).unwrap(), "adv_d");
    check(grad_check(|_, v| adv_loss_g(v[0]).map_err(unwrap_tensor), &[fake], DEFAULT_STEP).unwrap(), "adv_g");
    let zh = off_kink(&mut rng, &[3, 4], &[], 0.0);
    let z = off_kink(&mut rng, &[3, 4], &[], 0.0);
    check(grad_check(|_, v| recon_mse(v[0], v[1]).map_err(unwrap_tensor), &[zh.clone(), z], DEFAULT_STEP).unwrap(), "mse");
    let code = Tensor::from_fn(&[3, 4], |i| if i % 3 == 0 { 1.0 } else { -1.0 });
    check(
        grad_check(
            |tape, v| recon_bce(v[0], tape.constant(code.clone())).map_err(unwrap_tensor),
            &[zh],
            DEFAULT_STEP,
        )
        .unwrap(),
        "bce",
    );
    let live = off_kink(&mut rng, &[3, 4], &[], 0.0);
    let frozen = off_kink(&mut rng, &[3, 4], &[], 0.0);
    check(
        grad_check(
            |tape, v| stage2_regularizer(v[0], tape.constant(frozen.clone())).map_err(unwrap_tensor),
            &[live],
            DEFAULT_STEP,
        )
        .unwrap(),
        "reg",
    );
    let a = off_kink(&mut rng, &[2, 5], &[], 0.0);
    let b = off_kink(&mut rng, &[2, 5], &[], 0.0);
    check(
        grad_check(|_, v| cosine_distance_rows(v[0], v[1]).map_err(unwrap_tensor)?.sum_all(), &[a, b], DEFAULT_STEP).unwrap(),
        "cosine",
    );
}

#[test]
fn triplet_passes_gradient_check() {
    // Large margin keeps the hinge active; random draws avoid ties in max/min.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = off_kink(&mut rng, &[2, 6], &[], 0.0);
    let p = off_kink(&mut rng, &[6, 6], &[], 0.0);
    let n = off_kink(&mut rng, &[8, 6], &[], 0.0);
    let err = grad_check(|_, v| triplet_loss(v[0], v[1], v[2], 3.0).map_err(unwrap_tensor), &[a, p, n], DEFAULT_STEP).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn unwrap_tensor(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #[test]
    fn hinge_d_is_nonnegative_and_zero_only_when_separated(real in vec_strategy(4), fake in vec_strategy(3)) {
        let v = eval(&[t(&[4], &real), t(&[3], &fake)], |v| adv_loss_d(v[0], v[1]));
        prop_assert!(v >= 0.0);
        let separated = real.iter().all(|&r| r >= 1.0) && fake.iter().all(|&f| f <= -1.0);
        prop_assert_eq!(v == 0.0, separated);
    }

    #[test]
    fn bce_shrinks_as_logits_agree_with_code(signs in prop::collection::vec(any::<bool>(), 3), start in -4.0f64..0.0) {
        let code: Vec<f64> = signs.iter().map(|&s| if s { 1.0 } else { -1.0 }).collect();
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let m = start + 0.4 * step as f64;
            let logits: Vec<f64> = code.iter().map(|c| c * m).collect();
            let v = eval(&[t(&[1, 3], &logits), t(&[1, 3], &code)], |v| recon_bce(v[0], v[1]));
            prop_assert!(v >= 0.0);
            prop_assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn cosine_is_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), s in 0.01f64..100.0, r in 0.01f64..100.0) {
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(na > 1e-3 && nb > 1e-3);
        let base = cosine_distance(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * r).collect();
        prop_assert!((cosine_distance(&sa, &sb).unwrap() - base).abs() < 1e-10);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn triplet_ignores_set_order(
        a in vec_strategy(3),
        p in vec_strategy(12),
        n in vec_strategy(15),
        rot_p in 0usize..4,
        rot_n in 0usize..5,
    ) {
        let norm = |v: &[f64]| v.chunks(3).all(|c| c.iter().map(|x| x * x).sum::<f64>() > 1e-4);
        prop_assume!(norm(&a) && norm(&p) && norm(&n));
        let base = triplet(&a, &p, &n, 0.5);
        let mut rp: Vec<Vec<f64>> = p.chunks(3).map(|c| c.to_vec()).collect();
        rp.rotate_left(rot_p);
        rp.swap(0, 3);
        let mut rn: Vec<Vec<f64>> = n.chunks(3).map(|c| c.to_vec()).collect();
        rn.rotate_left(rot_n);
        rn.reverse();
        let shuffled = triplet(&a, &rp.concat(), &rn.concat(), 0.5);
        prop_assert_eq!(base, shuffled);
        prop_assert!((0.0..=2.5 + 1e-12).contains(&base));
    }

    #[test]
    fn compositions_are_linear(
        x in prop::array::uniform4(-2.0f64..2.0),
        y in prop::array::uniform4(-2.0f64..2.0),
        s in 0.0f64..1.0,
    ) {
        let tape = Tape::new();
        let cfg = LossConfig { triplet_kind: TripletKind::SingleStage, ..LossConfig::default() };
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        let px = scalar_parts(&tape, x[0], x[1], x[2], x[3]);
        let py = scalar_parts(&tape, y[0], y[1], y[2], y[3]);
        let pm = scalar_parts(&tape, mix[0], mix[1], mix[2], mix[3]);
        type Total = for<'t> fn(&LossParts<'t, f64>, &LossConfig) -> Result<Var<'t, f64>>;
        let totals: [Total; 3] = [total_stage1_g, total_stage1_d, total_stage2_d];
        for total in totals {
            let fx = total(&px, &cfg).unwrap().item();
            let fy = total(&py, &cfg).unwrap().item();
            let fm = total(&pm, &cfg).unwrap().item();
            prop_assert!((fm - ((1.0 - s) * fx + s * fy)).abs() < 1e-12);
        }
    }
}
