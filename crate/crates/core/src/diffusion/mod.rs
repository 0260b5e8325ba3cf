//! DDPM noising and sampling, a procedural dataset with sharp edges, and
//! the training loop for the toy model.

mod data;
mod probe;
mod sample;
mod schedule;
mod train;

pub use data::{Batch, ToyDataset, ToyKind, TOY_CLASSES};
pub use probe::DiffusionProbe;
pub use sample::{ddpm_sample, draw_noised, training_loss, NoisePredictor};
pub use schedule::{q_sample, q_sample_batch, NoiseSchedule, ScheduleConfig};
pub use train::{
    load_checkpoint, loss_and_grads, save_checkpoint, train, AdamW, CheckpointManifest, TrainConfig, TrainReport,
    METRICS_HEADER,
};
