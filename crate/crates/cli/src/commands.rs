//! Subcommand bodies. Each returns its result so tests can call it directly;
//! `main` only parses flags and prints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssgan_core::fewshot::{evaluate, EpisodeConfig, EvalReport};
use ssgan_core::gradsuite::{run_suite, GradRow};
use ssgan_core::masking::{make_grid, mask_image, Cell};
use ssgan_core::nn::{DiscriminatorNet, NetConfig};
use ssgan_core::objectives::cosine_distance;
use ssgan_core::tensor::{NormMode, Tensor};
use ssgan_core::trainer::{
    load_checkpoint, load_discriminator, load_generator, run_training, HyperParams, LossReport, RunOptions, TrainState,
};

use crate::config::RunConfig;
use crate::dataset::{Manifest, Split};
use crate::images::{load_png, save_png, tile};
use crate::synthetic::{generate, SyntheticSpec};

pub fn cmd_gen_synthetic(out: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    let (path, manifest) = generate(out, spec)?;
    info!("wrote {} images and {}", manifest.rows.len(), path.display());
    Ok(manifest)
}

/// Where a training run left its files.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    /// Global iteration reached.
    pub iterations: usize,
    pub resumed_from: Option<usize>,
}

/// Trains in 32-bit on the manifest's train split. With `resume`, an
/// existing checkpoint in the output directory is continued; its network
/// and hyperparameters must match the config.
pub fn cmd_train(cfg: &RunConfig, resume: bool, mut on_report: impl FnMut(&LossReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.manifest)?;
    let data = manifest.load::<f32>(Split::Train, cfg.net.channels, cfg.net.image_size, cfg.resize)?;
    info!("{} training images from {}", data.len(), cfg.manifest.display());
    let opts = RunOptions {
        out_dir: cfg.out_dir.clone(),
        checkpoint_every: cfg.checkpoint_every,
        log_every: cfg.log_every,
    };
    fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let ckpt_path = opts.checkpoint_path();
    let (mut state, resumed_from) = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.meta.net != cfg.net || ckpt.meta.hp != cfg.hp {
            bail!("{} was written with a different network or hyperparameters", ckpt_path.display());
        }
        let state = TrainState::<f32>::from_checkpoint(&ckpt)?;
        let at = state.global_iter();
        info!("resuming at iteration {at}");
        (state, Some(at))
    } else {
        (TrainState::<f32>::new(cfg.net.clone(), cfg.hp.clone())?, None)
    };
    fs::write(opts.out_dir.join("config.json"), cfg.to_json())?;
    let checkpoint = run_training(&mut state, &data, &opts, &mut on_report)?;
    Ok(TrainOutcome {
        checkpoint,
        losses: opts.loss_path(),
        iterations: state.global_iter(),
        resumed_from,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub seed: u64,
    pub resize: bool,
    /// Receives `eval.csv` and `eval.json`.
    pub out_dir: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net = &ckpt.meta.net;
    let d: DiscriminatorNet<f32> = load_discriminator(&ckpt)?;
    let manifest = Manifest::read(&args.manifest)?;
    let test = manifest.load::<f32>(Split::Test, net.channels, net.image_size, args.resize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = evaluate(&d, &test, args.episode, args.episodes, &mut rng)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    report.write(&args.out_dir, "eval", Some(&args.checkpoint.display().to_string()))?;
    Ok(report)
}

/// Every op and loss checked in 64-bit against central differences.
pub fn cmd_gradcheck(seed: u64) -> Result<Vec<GradRow>> {
    Ok(run_suite(seed)?)
}

pub fn format_grad_table(rows: &[GradRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>12}  result\n", "item", "max_rel_err");
    for r in rows {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:>12.3e}  {verdict}\n", r.name, r.max_rel_error));
    }
    s
}

/// One masked placement and, with a checkpoint, its encoding distance to
/// the unmasked image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTile {
    pub cell: Cell,
    pub distance: Option<f64>,
}

/// Renders every grid masking of `image` into `out_dir/mask_preview.png`
/// (original first) and lists the cells in `out_dir/mask_preview.csv`.
/// With a checkpoint, tiles are ordered by descending cosine distance of
/// the encodings; without one, by grid position.
pub fn cmd_mask_preview(image: &Path, checkpoint: Option<&Path>, cfg: &RunConfig, out_dir: &Path) -> Result<Vec<MaskTile>> {
    let (net, hp, d): (NetConfig, HyperParams, Option<DiscriminatorNet<f64>>) = match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let d = load_discriminator(&ckpt)?;
            (ckpt.meta.net, ckpt.meta.hp, Some(d))
        }
        None => (cfg.net.clone(), cfg.hp.clone(), None),
    };
    let x: Tensor<f64> = load_png(image, net.channels, None)?;
    if x.shape() != [net.channels, net.image_size, net.image_size] {
        bail!(
            "{} decodes to {:?}, expected {:?}",
            image.display(),
            x.shape(),
            [net.channels, net.image_size, net.image_size]
        );
    }
    let grid = make_grid(net.image_size, hp.patch_size, hp.negative_mode)?;
    let masked = grid
        .positions
        .iter()
        .map(|&cell| mask_image(&x, cell, &grid))
        .collect::<ssgan_core::Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..masked.len()).collect();
    let mut tiles: Vec<MaskTile> = grid.positions.iter().map(|&cell| MaskTile { cell, distance: None }).collect();
    if let Some(d) = &d {
        let mut shape = vec![masked.len() + 1];
        shape.extend_from_slice(x.shape());
        let data = std::iter::once(&x).chain(&masked).flat_map(|t| t.data().iter().copied()).collect();
        let enc = d.encode(&Tensor::new(shape, data)?)?;
        let w = net.d;
        let anchor = &enc.data()[..w];
        for (i, t) in tiles.iter_mut().enumerate() {
            t.distance = Some(cosine_distance(anchor, &enc.data()[(i + 1) * w..(i + 2) * w])?);
        }
        // Stable sort keeps grid order among ties.
        order.sort_by(|&a, &b| tiles[b].distance.unwrap().total_cmp(&tiles[a].distance.unwrap()));
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut sheet = vec![x];
    sheet.extend(order.iter().map(|&i| masked[i].clone()));
    save_png(&out_dir.join("mask_preview.png"), &tile(&sheet, sheet.len(), 2)?)?;
    let ordered: Vec<MaskTile> = order.iter().map(|&i| tiles[i].clone()).collect();
    let mut w = csv::Writer::from_path(out_dir.join("mask_preview.csv"))?;
    w.write_record(["row", "col", "distance"])?;
    for t in &ordered {
        let dist = t.distance.map(|v| format!("{v:.9}")).unwrap_or_default();
        w.write_record([t.cell.0.to_string(), t.cell.1.to_string(), dist])?;
    }
    w.flush()?;
    Ok(ordered)
}

/// `count` generator samples (eval-mode batch norm) tiled into a square-ish
/// grid at `out`.
pub fn cmd_sample(checkpoint: &Path, count: usize, seed: u64, out: &Path) -> Result<Tensor<f32>> {
    if count == 0 {
        bail!("count must be >= 1");
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let mut g = load_generator::<f32>(&ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = ckpt.meta.hp.prior.sample::<f32>(count, &mut rng)?;
    let images = g.generate(&z, NormMode::Eval)?;
    let [_, c, h, w]: [usize; 4] = images.shape().try_into().context("generator output rank")?;
    let plane = c * h * w;
    let tiles = (0..count)
        .map(|i| Tensor::new(vec![c, h, w], images.data()[i * plane..(i + 1) * plane].to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let cols = (count as f64).sqrt().ceil() as usize;
    let sheet = tile(&tiles, cols, 2)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_png(out, &sheet)?;
    Ok(sheet)
}
