use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ssgan::commands::{
    cmd_eval, cmd_gen_synthetic, cmd_gradcheck, cmd_mask_preview, cmd_sample, cmd_train, format_grad_table, EvalArgs,
};
use ssgan::config::RunConfig;
use ssgan::synthetic::SyntheticSpec;
use ssgan_core::fewshot::EpisodeConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "ssgan", version, about = "Self-supervised GAN training and few-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::from_json("{}")?,
        };
        if let Some(s) = self.seed {
            cfg.hp.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a shape-class dataset with a manifest.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        train_classes: usize,
        #[arg(long, default_value_t = 3)]
        test_classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Train per the configuration; writes checkpoint.ssgf, losses.csv and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot evaluation of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configuration's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Check every op and loss gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Contact sheet of every masked placement of an image.
    MaskPreview {
        #[command(flatten)]
        common: Common,
        image: PathBuf,
        /// Order tiles by encoding distance under this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tiled generator samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynthetic { common, train_classes, test_classes, per_class, image_size, channels } => {
            let spec = SyntheticSpec {
                n_train_classes: train_classes,
                n_test_classes: test_classes,
                per_class,
                image_size,
                channels,
                seed: common.seed.unwrap_or(0),
            };
            let out = common.out.unwrap_or_else(|| PathBuf::from("data"));
            let m = cmd_gen_synthetic(&out, &spec)?;
            println!("{} images, manifest {}", m.rows.len(), out.join("manifest.csv").display());
        }
        Command::Train { common, resume } => {
            let cfg = common.run_config()?;
            let done = cmd_train(&cfg, resume, |_| {})?;
            println!("{} iterations, checkpoint {}", done.iterations, done.checkpoint.display());
        }
        Command::Eval { common, checkpoint, manifest, n_way, k_shot, queries, episodes } => {
            let cfg = common.run_config()?;
            let e = cfg.eval;
            let mut episode = EpisodeConfig::new(n_way.unwrap_or(e.n_way), k_shot.unwrap_or(e.k_shot));
            episode.queries = queries.unwrap_or(e.queries);
            let args = EvalArgs {
                checkpoint,
                manifest: manifest.unwrap_or(cfg.manifest),
                episode,
                episodes: episodes.unwrap_or(e.episodes),
                seed: cfg.hp.seed,
                resize: cfg.resize,
                out_dir: cfg.out_dir,
            };
            let r = cmd_eval(&args)?;
            println!(
                "{}-way {}-shot over {} episodes: {:.2}% ± {:.2}%",
                r.n_way,
                r.k_shot,
                r.episodes,
                100.0 * r.mean,
                100.0 * r.ci95
            );
        }
        Command::Gradcheck { common } => {
            let rows = cmd_gradcheck(common.seed.unwrap_or(0))?;
            print!("{}", format_grad_table(&rows));
            return Ok(rows.iter().all(|r| r.passed()));
        }
        Command::MaskPreview { common, image, checkpoint } => {
            let cfg = common.run_config()?;
            let tiles = cmd_mask_preview(&image, checkpoint.as_deref(), &cfg, &cfg.out_dir)?;
            println!("{} masked tiles in {}", tiles.len(), cfg.out_dir.join("mask_preview.png").display());
        }
        Command::Sample { common, checkpoint, count } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(".")).join("samples.png");
            cmd_sample(&checkpoint, count, common.seed.unwrap_or(0), &out)?;
            println!("{count} samples in {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
