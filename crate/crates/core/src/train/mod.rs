//! Optimisation, checkpoints, the training loop and synthetic data
//! generation.

mod checkpoint;
mod datagen;
mod fixture;
mod optim;
mod trainer;

pub use checkpoint::{quantize, Checkpoint, RngState, VERSION as CHECKPOINT_VERSION};
pub use datagen::{datagen, datagen_file, parse_manifest, DatagenOptions, ManifestEntry};
pub use fixture::{fixture_config, overfit_fixture, FixtureSpec};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use trainer::{
    evaluate, init_model, prepare_items, split_indices, train, write_report, EpochRecord, Item, LogLine, LossLog,
    TrainOptions, TrainOutcome,
};
