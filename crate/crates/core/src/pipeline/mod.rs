//! Multi-stage training: architectures, schedules, optimizer, checkpoints and trainers.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod model;
pub mod optimizer;
pub mod plan;
pub mod train;

pub use checkpoint::{Checkpoint, ModelKind, RngState, TrainingState};
pub use config::{LossMode, Method, TrainConfig};
pub use model::{layer_prefix, Action, EncElem, Encoded, ModelArch, BPE_HEAD, CHAR_HEAD};
pub use optimizer::{Adam, AdamConfig, StepInfo};
pub use plan::{build_stage, LossWeights, ScheduleEvent, StageKind, StagePlan};
pub use train::{batch_loss, epoch_batches, BatchLoss, Corpus, Example, Trainer};
pub use infer::{Encodings, Output, Recognizer, Search};
