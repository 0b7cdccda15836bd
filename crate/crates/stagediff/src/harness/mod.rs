//! Experiment harness: synthetic datasets, the stage-aware training loop,
//! evaluation metrics, and checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Task, TrainConfig};
pub use data::{gen_dataset, Dataset, Sample};
pub use eval::{evaluate, Metrics};
pub use train::{train, RunLog, TrainOutcome};

/// Derive an independent substream seed from a master seed and a stream tag
/// (splitmix64 finalizer). Keeps data, noise, timestep, and monitor draws on
/// separate streams so toggling one mechanism never shifts another.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags used across the harness.
pub mod streams {
    pub const PARAMS: u64 = 1;
    pub const ENCODER: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const BATCH: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const TIMESTEP: u64 = 8;
    pub const MONITOR_NOISE: u64 = 9;
    pub const EVAL_DRAWS: u64 = 10;
}

/// Dataset splits sharing one task distribution but disjoint sample noise.
pub mod splits {
    pub const TRAIN: u64 = 0;
    pub const MONITOR: u64 = 1;
    pub const EVAL: u64 = 2;
}
