//! End-to-end orchestration: the de-tilt -> motion-enhance -> de-blur
//! restoration chain, the stage-wise joint training strategy, stage-order and
//! stage-removal ablations, and complexity reporting.

pub mod ablate;
pub mod complexity;
pub mod data;
pub mod restore;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unsupported stage order: {0}")]
    UnsupportedOrder(String),
    #[error("no training data supplied")]
    NoData,
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Media(#[from] pmr_core::media::MediaError),
    #[error(transparent)]
    Flow(#[from] pmr_core::flow::FlowError),
    #[error(transparent)]
    Dei(#[from] pmr_core::dei::DeiError),
    #[error(transparent)]
    Mse(#[from] pmr_core::motion_enhance::MseError),
    #[error(transparent)]
    Nn(#[from] pmr_nn::NnError),
    #[error(transparent)]
    Sim(#[from] pmr_core::turbsim::SimError),
    #[error("i/o error at {path}: {reason}")]
    Io { path: std::path::PathBuf, reason: String },
}

pub use ablate::{ablate_orders, ablate_stages, OrderRow, StageAblation, StageRow};
pub use complexity::{complexity_report, ComplexityReport};
pub use restore::{charbonnier, restore, restore_with_order, RestoreOptions, Stage, StageOrder};
pub use train::{train_stagewise, EpochRecord, LrPolicy, ModelSpec, OptimizerKind, TrainOutcome, TrainSchedule};
