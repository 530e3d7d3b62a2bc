use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use super::{save_checkpoint, LossReport, TrainState};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const LOSS_CSV_HEADER: &str = "iter,stage,loss_g_adv,loss_d_adv,loss_recon,loss_triplet,loss_reg,total";

/// Per-iteration loss rows, one CSV line each.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens `path` for appending. Rows past iteration `keep_through` (left
    /// over from a run that went further than the checkpoint being resumed)
    /// are dropped.
    pub fn open(path: &Path, keep_through: usize) -> Result<Self> {
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut kept = String::new();
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let iter = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                if iter.is_some_and(|i| i <= keep_through) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io)?;
        writeln!(f, "{LOSS_CSV_HEADER}").map_err(io)?;
        f.write_all(kept.as_bytes()).map_err(io)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            r.stage,
            opt(r.loss_g_adv),
            opt(r.loss_d_adv),
            opt(r.loss_recon),
            opt(r.loss_triplet),
            opt(r.loss_reg),
            r.total
        )
        .map_err(|source| Error::Io { path: self.path.clone(), source })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|source| Error::Io { path: self.path.clone(), source })
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Receives `losses.csv` and `checkpoint.ssgf`.
    pub out_dir: PathBuf,
    /// Iterations between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            checkpoint_every: 500,
            log_every: 100,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.ssgf")
    }

    pub fn loss_path(&self) -> PathBuf {
        self.out_dir.join("losses.csv")
    }
}

/// Trains until the schedule completes, starting from wherever `state`
/// stands (a fresh state or one restored from a checkpoint). Returns the
/// path of the final checkpoint.
pub fn run_training<T: Scalar>(
    state: &mut TrainState<T>,
    data: &ImageSet<T>,
    opts: &RunOptions,
    mut on_report: impl FnMut(&LossReport),
) -> Result<PathBuf> {
    fs::create_dir_all(&opts.out_dir).map_err(|source| Error::Io { path: opts.out_dir.clone(), source })?;
    let mut log = LossLog::open(&opts.loss_path(), state.global_iter())?;
    let ckpt = opts.checkpoint_path();
    while let Some(report) = state.next_iteration(data)? {
        log.write(&report)?;
        on_report(&report);
        if opts.log_every > 0 && report.iter % opts.log_every == 0 {
            info!(
                "iter {} stage {} total {:.4} g_adv {:?} triplet {:?}",
                report.iter, report.stage, report.total, report.loss_g_adv, report.loss_triplet
            );
        }
        if opts.checkpoint_every > 0 && report.iter % opts.checkpoint_every == 0 {
            log.flush()?;
            save_checkpoint(&ckpt, &state.to_checkpoint())?;
        }
    }
    log.flush()?;
    save_checkpoint(&ckpt, &state.to_checkpoint())?;
    Ok(ckpt)
}
