//! Config-driven experiment orchestration: corpus generation, CE training
//! with modality mixing, expected-error fine-tuning, evaluation and latency
//! reporting, all behind one CLI.

mod cli;
mod config;
mod evaluate;
mod train;

pub use cli::{gradcheck, main_entry, run};
pub use config::{ConfigError, DecodeConfig, ExperimentConfig, TextInjectionConfig, TrainConfig};
pub use evaluate::{
    decode_split, eval_row, evaluate, latency_report, verify_checkpoint_shape, EvalRow, EvalTable,
};
pub use train::{replay_log, stream_rng, train, PreparedText, TrainContext, TrainOutcome};
