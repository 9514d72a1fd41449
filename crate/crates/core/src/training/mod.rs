//! Optimisation, curriculum, gradient checking and the training loop.

pub mod config;
pub mod curriculum;
pub mod gradcheck;
pub mod optim;
pub mod trainer;

pub use config::TrainConfig;
pub use curriculum::{CurriculumConfig, CurriculumState};
pub use gradcheck::{gradient_check, gradient_check_with, FullReport, GradCheckReport, Stencil};
pub use optim::{clip_global_norm, RmsProp, RmsPropConfig, SharedVec};
pub use trainer::{evaluate_levels, load_model, EvalRow, Metrics, StopReason, Trainer};
