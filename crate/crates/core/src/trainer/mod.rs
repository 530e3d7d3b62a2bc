//! Latent sampling, Adam, the two-stage training loop and checkpoints.

mod adam;
mod checkpoint;
mod hyper;
mod prior;
mod run;
mod state;

pub use adam::{adam_step, adam_update, AdamConfig, Moments};
pub use checkpoint::{
    load_checkpoint, load_discriminator, load_generator, save_checkpoint, Checkpoint, CheckpointMeta, RngState,
    StoredTensor, MAGIC, VERSION,
};
pub use hyper::{HyperParams, Preset};
pub use prior::{LatentPrior, PriorKind};
pub use run::{run_training, LossLog, RunOptions, LOSS_CSV_HEADER};
pub use state::{Counters, LossReport, TrainState};
