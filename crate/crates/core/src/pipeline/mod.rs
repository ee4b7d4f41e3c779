//! Training, inference, evaluation and ablation.

mod checkpoint;
mod config;
mod denoise;
mod estimate;
mod eval;
mod objective;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{
    format_kv, parse_kv, read_kv, DenoiseConfig, Engine, NoiseModel, TrainConfig, Variant,
};
pub use denoise::{denoise, Denoiser};
pub use estimate::estimate_noise;
pub use eval::{
    ablate, ablation_csv, evaluate, load_pairs, mean_sem, read_manifest, training_key,
    AblationGrid, AblationRow, AblationSetup, ImagePair, MetricsRow, MetricsTable,
};
pub use objective::{
    learned_priors, normalize_stacks, prior_from_heads, prior_objective, ObjectiveOutput, RefBatch,
    StackNorm, MIN_STACK_SCALE,
};
pub use train::{
    image_files, load_training_images, train, train_images, EpochReport, NOISE_REGULARIZER,
};
