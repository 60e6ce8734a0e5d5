//! Experiment harness: synthetic rooms, point-cloud files, configuration,
//! Adam training with checkpoints, evaluation and ablation sweeps.

pub mod ablate;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod pcio;
pub mod scene;
pub mod train;

pub use ablate::{run_ablation, AblationPlan, AblationReport, Arm, Preset};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{HarnessError, Result};
pub use eval::{evaluate, predict};
pub use scene::{generate_scene, generate_suite, SceneClass, SceneSpec};
pub use train::{train, EpochSummary, LogRecord, TrainOptions, TrainRun, Trainer};
