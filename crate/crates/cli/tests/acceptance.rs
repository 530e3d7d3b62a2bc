//! Acceptance suite: one pass/fail line per criterion.
//!
//! `SSGAN_ACCEPT_ONLY=2,5` runs a subset. The direction report trains at a
//! shortened adversarial schedule unless `SSGAN_DIRECTION_T1` overrides it
//! (3000 for the full desk schedule).

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssgan::commands::{cmd_eval, cmd_gradcheck, cmd_train, EvalArgs};
use ssgan::config::RunConfig;
use ssgan::dataset::{Manifest, Split};
use ssgan::synthetic::{generate, render, SyntheticSpec};
use ssgan_core::data::ImageSet;
use ssgan_core::fewshot::{classify_query, compute_prototypes, evaluate, evaluate_encodings, sample_episode, EpisodeConfig, EvalReport};
use ssgan_core::masking::{build_triplets, make_grid, NegativeMode};
use ssgan_core::nn::{power_iteration, NetConfig, RF_HEAD_PREFIX};
use ssgan_core::objectives::{
    adv_loss_d, adv_loss_g, cosine_distance, recon_bce, recon_mse, stage2_regularizer, triplet_loss,
};
use ssgan_core::tensor::{Tape, Tensor, Var};
use ssgan_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint, HyperParams, LossReport, Preset, TrainState};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. gradient suite

fn gradient_suite() -> Result<Verdict> {
    let start = Instant::now();
    let rows = cmd_gradcheck(0)?;
    let took = start.elapsed();
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).context("empty suite")?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let required = [
        "conv2d", "conv2d_transpose", "batch_norm_train", "matmul", "relu", "leaky_relu", "tanh", "sigmoid",
        "softplus", "adv_loss_d", "adv_loss_g", "recon_mse", "recon_bce", "cosine_distance", "stage2_regularizer",
        "triplet_loss",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !rows.iter().any(|r| r.name == *n)).collect();
    let pass = failed.is_empty() && missing.is_empty() && took < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "{} rows, worst {} at {:.2e} (< 1e-4), failed {failed:?}, missing {missing:?}, {} (< 120s)",
            rows.len(),
            worst.name,
            worst.max_rel_error,
            secs(took)
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. spectral norm against a dense SVD

fn spectral_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (rows, cols) = if i == 0 { (64, 64) } else { (rng.random_range(2..=64), rng.random_range(2..=64)) };
        let w: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= n);
        let (_, sigma) = power_iteration(&w, rows, cols, &mut u, 50)?;
        let exact = DMatrix::from_row_slice(rows, cols, &w).singular_values().max();
        worst = worst.max((sigma - exact).abs() / exact);
    }
    verdict(worst < 1e-3, format!("20 matrices up to 64x64, worst relative error {worst:.2e} (< 1e-3)"))
}

// ---------------------------------------------------------------------------
// 3. loss example values

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).expect("shape matches values")
}

fn eval_loss(inputs: &[Tensor<f64>], f: impl for<'t> Fn(&[Var<'t, f64>]) -> ssgan_core::Result<Var<'t, f64>>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    Ok(f(&vars)?.item())
}

/// Unit vectors in the plane at the given cosine distances from `(1, 0)`.
fn at_distance(ds: &[f64]) -> Vec<f64> {
    ds.iter()
        .flat_map(|d| {
            let c: f64 = 1.0 - d;
            [c, (1.0 - c * c).max(0.0).sqrt()]
        })
        .collect()
}

fn loss_examples() -> Result<Verdict> {
    let ln2 = std::f64::consts::LN_2;
    let anchor = t(&[1, 2], &[1.0, 0.0]);
    let triplet = |pos: &[f64], neg: &[f64]| {
        eval_loss(
            &[anchor.clone(), t(&[pos.len(), 2], &at_distance(pos)), t(&[neg.len(), 2], &at_distance(neg))],
            |v| triplet_loss(v[0], v[1], v[2], 0.5),
        )
    };
    let cases: Vec<(&str, f64, f64)> = vec![
        ("adv_d [1]/[-1]", eval_loss(&[t(&[1], &[1.0]), t(&[1], &[-1.0])], |v| adv_loss_d(v[0], v[1]))?, 0.0),
        ("adv_d [0]/[0]", eval_loss(&[t(&[1], &[0.0]), t(&[1], &[0.0])], |v| adv_loss_d(v[0], v[1]))?, 2.0),
        ("adv_d [-1,1]/[1]", eval_loss(&[t(&[2], &[-1.0, 1.0]), t(&[1], &[1.0])], |v| adv_loss_d(v[0], v[1]))?, 3.0),
        ("adv_g [0]", eval_loss(&[t(&[1], &[0.0])], |v| adv_loss_g(v[0]))?, 0.0),
        ("adv_g [1,3]", eval_loss(&[t(&[2], &[1.0, 3.0])], |v| adv_loss_g(v[0]))?, -2.0),
        ("adv_g [-5]", eval_loss(&[t(&[1], &[-5.0])], |v| adv_loss_g(v[0]))?, 5.0),
        ("mse equal", eval_loss(&[t(&[1, 2], &[1.0, -1.0]), t(&[1, 2], &[1.0, -1.0])], |v| recon_mse(v[0], v[1]))?, 0.0),
        ("mse [0,0]/[1,-1]", eval_loss(&[t(&[1, 2], &[0.0, 0.0]), t(&[1, 2], &[1.0, -1.0])], |v| recon_mse(v[0], v[1]))?, 2.0),
        (
            "mse norms 2,4",
            eval_loss(&[t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]), Tensor::zeros(&[2, 2])], |v| recon_mse(v[0], v[1]))?,
            3.0,
        ),
        ("bce +1/0", eval_loss(&[Tensor::zeros(&[2, 3]), Tensor::ones(&[2, 3])], |v| recon_bce(v[0], v[1]))?, ln2),
        ("bce -1/0", eval_loss(&[Tensor::zeros(&[2, 3]), Tensor::full(&[2, 3], -1.0)], |v| recon_bce(v[0], v[1]))?, ln2),
        ("bce (2,-2)/(+1,-1)", eval_loss(&[t(&[1, 2], &[2.0, -2.0]), t(&[1, 2], &[1.0, -1.0])], |v| recon_bce(v[0], v[1]))?, 0.126928),
        ("cosine equal", cosine_distance(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0])?, 0.0),
        ("cosine orthogonal", cosine_distance(&[1.0, 0.0], &[0.0, 3.0])?, 1.0),
        ("cosine opposite", cosine_distance(&[1.0, -2.0], &[-1.0, 2.0])?, 2.0),
        ("triplet 0.2/0.9", triplet(&[0.2; 4], &[0.9; 12])?, 0.0),
        ("triplet hardest pair", triplet(&[0.1, 0.6], &[0.4, 0.8])?, 0.7),
        ("triplet positives=anchor", triplet(&[0.0; 4], &[0.3, 0.5, 0.9])?, 0.2),
        ("reg identical", eval_loss(&[t(&[1, 2], &[0.5, 0.5]), t(&[1, 2], &[0.5, 0.5])], |v| stage2_regularizer(v[0], v[1]))?, 0.0),
        ("reg (1,0)/(0,1)", eval_loss(&[t(&[1, 2], &[1.0, 0.0]), t(&[1, 2], &[0.0, 1.0])], |v| stage2_regularizer(v[0], v[1]))?, 2.0),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        if err > worst.0 {
            worst = (err, name);
        }
    }
    verdict(
        worst.0 < 1e-6,
        format!("{} examples, worst |error| {:.1e} ({})", cases.len(), worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------
// 4. masking geometry

fn masking_geometry() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (size, patch) in [(64usize, 16usize), (32, 8)] {
        let grid = make_grid(size, patch, NegativeMode::AllNonCorner)?;
        let counts_ok = grid.positions.len() == 16 && grid.corner_cells.len() == 4 && grid.negative_cells.len() == 12;
        let c = 3;
        let x = Tensor::<f64>::from_fn(&[c, size, size], |_| rng.random_range(-1.0..1.0));
        let plane = size * size;
        let means: Vec<f64> = (0..c).map(|ch| x.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let tr = build_triplets(&x, &grid)?;
        let cells = grid.corner_cells.iter().chain(&grid.negative_cells);
        let mut worst_fill = 0.0f64;
        let mut outside_exact = true;
        for (m, &(r, col)) in tr.positives.iter().chain(&tr.negatives).zip(cells) {
            for ch in 0..c {
                for y in 0..size {
                    for xx in 0..size {
                        let i = ch * plane + y * size + xx;
                        let inside = (r * patch..(r + 1) * patch).contains(&y) && (col * patch..(col + 1) * patch).contains(&xx);
                        if inside {
                            worst_fill = worst_fill.max((m.data()[i] - means[ch]).abs());
                        } else {
                            outside_exact &= m.data()[i].to_bits() == x.data()[i].to_bits();
                        }
                    }
                }
            }
        }
        let ok = counts_ok && worst_fill < 1e-6 && outside_exact && tr.positives.len() == 4 && tr.negatives.len() == 12;
        pass &= ok;
        notes.push(format!(
            "({size},{patch}): {} placements, {} positives, {} negatives, fill error {worst_fill:.1e}, outside identical {outside_exact}",
            grid.positions.len(),
            tr.positives.len(),
            tr.negatives.len()
        ));
    }
    verdict(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 5. few-shot oracles

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn fewshot_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (classes, per, d) = (12usize, 30usize, 16usize);
    let labels: Vec<usize> = (0..classes * per).map(|i| 100 + i / per).collect();
    let mut disagreements = 0;
    let mut queries = 0;
    let mut worst_proto = 0.0f64;
    for _ in 0..100 {
        let n_way = rng.random_range(2..=6);
        let k_shot = rng.random_range(1..=5);
        let cfg = EpisodeConfig { n_way, k_shot, queries: 5 };
        let enc = Tensor::<f64>::from_fn(&[labels.len(), d], |_| rng.sample(StandardNormal));
        let ep = sample_episode(&labels, cfg, &mut rng)?;
        let support: Vec<f64> = ep.support.iter().flat_map(|&i| enc.data()[i * d..(i + 1) * d].to_vec()).collect();
        let protos = compute_prototypes(&Tensor::new(vec![ep.support.len(), d], support)?, &ep.support_labels, n_way)?;
        // Independent accumulation: class by class, members in episode order.
        let mut oracle = vec![0.0; n_way * d];
        for class in 0..n_way {
            let members: Vec<usize> = ep.support.iter().zip(&ep.support_labels).filter(|(_, &l)| l == class).map(|(&i, _)| i).collect();
            for j in 0..d {
                oracle[class * d + j] = members.iter().map(|&i| enc.data()[i * d + j]).sum::<f64>() / members.len() as f64;
            }
        }
        for (a, b) in protos.data().iter().zip(&oracle) {
            worst_proto = worst_proto.max((a - b).abs());
        }
        for &q in &ep.query {
            let z = &enc.data()[q * d..(q + 1) * d];
            let dists: Vec<f64> = (0..n_way).map(|n| oracle_cosine(z, &oracle[n * d..(n + 1) * d])).collect();
            let best = (0..n_way).fold(0, |b, n| if dists[n] < dists[b] { n } else { b });
            disagreements += (classify_query(z, &protos)? != best) as usize;
            queries += 1;
        }
    }

    // Encodings that carry no label information.
    let (n_way, episodes) = (5usize, 1000usize);
    let cfg = EpisodeConfig::new(n_way, 1);
    let pool_labels: Vec<usize> = (0..40 * 60).map(|i| i / 60).collect();
    let enc = Tensor::<f64>::from_fn(&[pool_labels.len(), d], |_| rng.sample(StandardNormal));
    let report = evaluate_encodings(&enc, &pool_labels, cfg, episodes, &mut rng)?;
    let p = 1.0 / n_way as f64;
    let trials = (episodes * n_way * cfg.queries) as f64;
    let sd = (p * (1.0 - p) / trials).sqrt();
    let z = (report.mean - p) / sd;
    let pass = disagreements == 0 && worst_proto < 1e-12 && z.abs() <= 3.0;
    verdict(
        pass,
        format!(
            "{queries} queries over 100 episodes, {disagreements} disagreements; prototype error {worst_proto:.1e} (< 1e-12); \
             random encoder {:.4} vs 1/N = {p:.4}, {z:+.2} sd (|z| <= 3)",
            report.mean
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. training-loop structure

fn shapes_set(n_per_class: usize, classes: usize, seed: u64) -> Result<ImageSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class * classes {
        let class = i % classes;
        data.extend_from_slice(render(class, 32, 1, &mut rng).data());
        labels.push(class);
    }
    Ok(ImageSet::new(Tensor::new(vec![labels.len(), 1, 32, 32], data)?, labels)?)
}

fn small_hp(t1: usize, t2: usize) -> HyperParams {
    HyperParams {
        t1,
        t2,
        batch_stage1: 8,
        batch_stage2: 4,
        seed: 6,
        ..HyperParams::desk().with_preset(Preset::GdBT2)
    }
}

fn loop_structure() -> Result<Verdict> {
    let data = shapes_set(8, 5, 60)?;
    let mut s = TrainState::<f32>::new(NetConfig::desk(), small_hp(3, 3))?;
    let mut counts_ok = true;
    for _ in 0..3 {
        let before = s.counters;
        s.stage1_iteration(&data)?;
        counts_ok &= s.counters.g_steps - before.g_steps == 1 && s.counters.d_steps - before.d_steps == 3;
    }
    let stage1 = s.counters;
    s.begin_stage2();
    let g_before = s.g.params().clone();
    let bn_before = s.g.bn_states().to_vec();
    let rf_before: Vec<(String, Tensor<f32>)> =
        s.d.params().iter().filter(|(n, _)| n.starts_with(RF_HEAD_PREFIX)).map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut first_reg = None;
    for _ in 0..3 {
        let r = s.stage2_iteration(&data)?;
        first_reg.get_or_insert(r.loss_reg);
    }
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let g_same = s.g.params().iter().zip(g_before.iter()).all(|((_, a), (_, b))| bits(a) == bits(b)) && s.g.bn_states() == bn_before;
    let rf_same = rf_before.iter().all(|(n, t)| s.d.params().by_name(n).map(bits) == Some(bits(t)));
    let enc_moved = s.d.params().iter().any(|(n, t)| n.starts_with("d.enc") && s.d1.as_ref().is_some_and(|d1| d1.net().params().by_name(n).map(bits) != Some(bits(t))));
    let reg0 = first_reg.flatten();
    let pass = counts_ok && g_same && rf_same && reg0 == Some(0.0)
        && (stage1.g_steps, stage1.d_steps) == (3, 9)
        && (s.counters.g_steps, s.counters.d_steps) == (3, 12);
    verdict(
        pass,
        format!(
            "stage 1: {} G and {} D updates over 3 iterations; stage 2: {} G and {} D updates, G unchanged {g_same}, \
             real/fake head unchanged {rf_same}, encoder trained {enc_moved}; first regularizer {reg0:?}",
            stage1.g_steps,
            stage1.d_steps,
            s.counters.g_steps - stage1.g_steps,
            s.counters.d_steps - stage1.d_steps
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. persistence

fn persistence(dir: &Path) -> Result<Verdict> {
    let data = shapes_set(8, 5, 80)?;
    let (t1, t2, cut) = (6, 10, 4);
    let mut s = TrainState::<f32>::new(NetConfig::desk(), small_hp(t1, t2))?;
    let mut full = Vec::new();
    let mut mid: Option<Checkpoint> = None;
    while let Some(r) = s.next_iteration(&data)? {
        full.push(r);
        if s.global_iter() == cut {
            mid = Some(s.to_checkpoint());
        }
    }
    let mid = mid.context("run ended before the cut")?;

    // save → load → save, at the cut and at the end (with the stage-1 snapshot).
    let mut identical = true;
    for (name, ckpt) in [("mid", mid.clone()), ("end", s.to_checkpoint())] {
        let a = dir.join(format!("{name}_a.ssgf"));
        let b = dir.join(format!("{name}_b.ssgf"));
        save_checkpoint(&a, &ckpt)?;
        let state = TrainState::<f32>::from_checkpoint(&load_checkpoint(&a)?)?;
        save_checkpoint(&b, &state.to_checkpoint())?;
        identical &= fs::read(&a)? == fs::read(&b)?;
    }

    let mut resumed = TrainState::<f32>::from_checkpoint(&Checkpoint::from_bytes(&mid.to_bytes()?)?)?;
    let mut tail: Vec<LossReport> = Vec::new();
    while let Some(r) = resumed.next_iteration(&data)? {
        tail.push(r);
    }
    let expected = &full[cut..];
    let same = tail == expected;
    let params_same = resumed.d.params().iter().zip(s.d.params().iter()).all(|((_, a), (_, b))| a == b);
    verdict(
        identical && same && params_same && tail.len() >= 10,
        format!(
            "save-load-save byte-identical {identical}; resumed at iteration {cut}, {} of {} following iterations \
             match exactly (>= 10 required), final parameters equal {params_same}",
            tail.iter().zip(expected).take_while(|(a, b)| a == b).count(),
            expected.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. end-to-end desk run and direction report

struct Desk {
    root: PathBuf,
    manifest: PathBuf,
}

fn desk_dataset(root: &Path) -> Result<Desk> {
    let spec = SyntheticSpec { n_train_classes: 5, n_test_classes: 3, per_class: 200, image_size: 32, channels: 1, seed: 0 };
    let (manifest, m) = generate(&root.join("data"), &spec)?;
    ensure!(m.rows.len() == 1600, "expected 1600 images, got {}", m.rows.len());
    Ok(Desk { root: root.to_path_buf(), manifest })
}

fn desk_config(desk: &Desk, preset: Preset, seed: u64, t1: Option<usize>, name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults(ssgan::config::Profile::Desk, preset);
    cfg.manifest = desk.manifest.clone();
    cfg.out_dir = desk.root.join(name);
    cfg.hp.seed = seed;
    cfg.log_every = 0;
    cfg.checkpoint_every = 0;
    if let Some(t1) = t1 {
        cfg.hp.t1 = t1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn two_way_one_shot(cfg: &RunConfig, checkpoint: &Path, episodes: usize, seed: u64) -> Result<EvalReport> {
    cmd_eval(&EvalArgs {
        checkpoint: checkpoint.to_path_buf(),
        manifest: cfg.manifest.clone(),
        episode: EpisodeConfig::new(2, 1),
        episodes,
        seed,
        resize: false,
        out_dir: cfg.out_dir.join("eval_2w1s"),
    })
}

fn progress(label: String) -> impl FnMut(&LossReport) {
    move |r: &LossReport| {
        if r.iter % 500 == 0 {
            eprintln!("  [{label}] iter {} stage {} total {:.4}", r.iter, r.stage, r.total);
        }
    }
}

fn desk_run(desk: &Desk) -> Result<Verdict> {
    let cfg = desk_config(desk, Preset::GdBT2, 0, None, "gdbt2")?;
    ensure!(cfg.hp.t1 == 3000 && cfg.hp.t2 == 1000 && cfg.hp.batch_stage1 == 64 && cfg.hp.batch_stage2 == 32, "desk profile drifted");
    let start = Instant::now();
    let out = cmd_train(&cfg, false, progress("GdBT2".into()))?;
    let trained = start.elapsed();
    let report = two_way_one_shot(&cfg, &out.checkpoint, 500, 0)?;
    let took = start.elapsed();
    let pass = report.mean > 0.60 && took <= Duration::from_secs(30 * 60);
    // Same episodes through the untrained discriminator, for context only.
    let test = Manifest::read(&cfg.manifest)?.load::<f32>(Split::Test, cfg.net.channels, cfg.net.image_size, false)?;
    let untrained = TrainState::<f32>::new(cfg.net, cfg.hp.clone())?;
    let baseline = evaluate(&untrained.d, &test, EpisodeConfig::new(2, 1), 500, &mut ChaCha8Rng::seed_from_u64(0))?;
    verdict(
        pass,
        format!(
            "GdBT2 desk, {} iterations: 2-way 1-shot {:.2}% +- {:.2}% over 500 episodes (> 60%; untrained {:.2}%), train {} + eval, total {} (<= 30 min)",
            out.iterations,
            100.0 * report.mean,
            100.0 * report.ci95,
            100.0 * baseline.mean,
            secs(trained),
            secs(took)
        ),
    )
}

fn direction_report(desk: &Desk) -> Result<String> {
    let t1 = env::var("SSGAN_DIRECTION_T1").ok().map(|v| v.parse::<usize>()).transpose()?.unwrap_or(300);
    let acc = |preset: Preset| -> Result<Vec<f64>> {
        (0..3u64)
            .map(|seed| {
                let cfg = desk_config(desk, preset, seed, Some(t1), &format!("dir_{preset:?}_{seed}"))?;
                let out = cmd_train(&cfg, false, progress(format!("{preset:?} seed {seed}")))?;
                Ok(two_way_one_shot(&cfg, &out.checkpoint, 500, seed)?.mean)
            })
            .collect()
    };
    let gd = acc(Preset::Gd)?;
    let gdb = acc(Preset::GdB)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = gd.iter().zip(&gdb).filter(|(a, b)| b >= a).count();
    let pct = |v: &[f64]| v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/");
    Ok(format!(
        "direction report (not gated, T1={t1}): GdB {}% mean {:.2}% vs Gd {}% mean {:.2}%; GdB >= Gd on mean {}, on {wins}/3 seeds",
        pct(&gdb),
        100.0 * mean(&gdb),
        pct(&gd),
        100.0 * mean(&gd),
        mean(&gdb) >= mean(&gd)
    ))
}

// ---------------------------------------------------------------------------
// 9. evaluation protocol

fn protocol(desk: &Desk) -> Result<Verdict> {
    let defaults = RunConfig::from_json("{}")?.eval;
    let defaults_ok = defaults.episodes == 1000 && defaults.queries == 15 && EpisodeConfig::new(5, 1).queries == 15;

    // Fixed accuracy vector, CI by hand: 1000 episodes cycling 0.2, 0.4, 0.6, 0.8 and 1.0.
    let acc: Vec<f64> = (0..1000).map(|i| 0.2 * (i % 5 + 1) as f64).collect();
    let report = EvalReport::from_accuracies(EpisodeConfig::new(5, 1), acc.clone())?;
    // mean 0.6, population variance 0.08
    let hand = 1.96 * 0.08f64.sqrt() / 1000f64.sqrt();
    let fixed_err = (report.ci95 - hand).abs().max((report.mean - 0.6).abs());

    // Through the command on a briefly trained checkpoint, default episode count.
    let mut cfg = desk_config(desk, Preset::GdBT2, 9, Some(2), "protocol")?;
    cfg.hp.t2 = 2;
    let out = cmd_train(&cfg, false, |_| {})?;
    let r = two_way_one_shot(&cfg, &out.checkpoint, defaults.episodes, 9)?;
    let csv = fs::read_to_string(cfg.out_dir.join("eval_2w1s/eval.csv"))?;
    let accs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap_or("nan").parse()).collect::<Result<_, _>>()?;
    let n = accs.len() as f64;
    let m = accs.iter().sum::<f64>() / n;
    let sd = (accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("eval_2w1s/eval.json"))?)?;
    let cmd_err = (json["ci95"].as_f64().unwrap_or(f64::NAN) - 1.96 * sd / n.sqrt())
        .abs()
        .max((json["mean"].as_f64().unwrap_or(f64::NAN) - m).abs());
    let pass = defaults_ok && fixed_err < 1e-12 && cmd_err < 1e-12 && accs.len() == 1000 && r.episodes == 1000;
    verdict(
        pass,
        format!(
            "defaults {} episodes, Q={}; fixed vector CI {:.6} vs hand {hand:.6} (error {fixed_err:.1e}); \
             eval command over {} episodes, CI error against its CSV {cmd_err:.1e} (< 1e-12)",
            defaults.episodes,
            defaults.queries,
            report.ci95,
            accs.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = env::var("SSGAN_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let dir = tempfile::tempdir().expect("temp dir");
    let needs_desk = want(7) || want(9);
    let desk = if needs_desk { Some(desk_dataset(dir.path()).expect("synthetic dataset")) } else { None };

    type Check<'a> = Box<dyn FnOnce() -> Result<Verdict> + 'a>;
    let checks: Vec<(u32, &str, Check)> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "spectral norm oracle", Box::new(spectral_oracle)),
        (3, "loss oracles", Box::new(loss_examples)),
        (4, "masking geometry", Box::new(masking_geometry)),
        (5, "few-shot oracle equivalence", Box::new(fewshot_oracles)),
        (6, "training-loop structure", Box::new(loop_structure)),
        (7, "end-to-end desk run", Box::new(|| desk_run(desk.as_ref().expect("dataset")))),
        (8, "persistence", Box::new(|| persistence(dir.path()))),
        (9, "evaluation protocol", Box::new(|| protocol(desk.as_ref().expect("dataset")))),
    ];
    let mut lines = Vec::new();
    let mut all = true;
    for (n, name, check) in checks {
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        all &= pass;
        let line = format!("criterion {n} [{}] {name} ({}): {detail}", if pass { "PASS" } else { "FAIL" }, secs(start.elapsed()));
        println!("{line}");
        lines.push(line);
    }
    if want(7) && env::var("SSGAN_SKIP_DIRECTION").is_err() {
        let line = match direction_report(desk.as_ref().expect("dataset")) {
            Ok(s) => format!("criterion 7 [REPORT] {s}"),
            Err(e) => format!("criterion 7 [REPORT] direction report failed: {e:#}"),
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("  {}", l.split(": ").next().unwrap_or(l));
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
