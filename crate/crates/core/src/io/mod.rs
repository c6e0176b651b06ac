//! File formats: WAV audio, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod wav;

pub use checkpoint::{list_tensors, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    parse_override, Preset, RunConfig, Split, SplitConfig, EFFECTIVE_CONFIG_FILE, SEED_FILE,
};
