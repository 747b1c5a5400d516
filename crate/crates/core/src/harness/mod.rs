//! Dataset windows, training, checkpoints, evaluation and robustness sweeps.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod train;

pub use checkpoint::{check_params, load_checkpoint, save_checkpoint, Checkpoint, DataInfo, RngState};
pub use data::{load_dataset, split_sequences, window_count, window_samples, MotionSample, SequenceStore};
pub use eval::{
    evaluate, horizon_frame, robustness_sweep, standard_horizons, EvalReport, ModelPredictor, MotionPredictor, SweepMode,
    SweepRow, Sweeps,
};
pub use train::{train, LossRecord, TrainConfig, Trainer};
