//! Objective, synthetic data, finetuning loop and gradient checking.

pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod losses;
pub mod trainer;

pub use config::TrainConfig;
pub use dataset::{gen_synthetic_dataset, SyntheticDataset};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use losses::{LossBreakdown, LossWeights, TeacherOutput};
pub use trainer::{evaluate, teacher_outputs, train, train_on, EpochMetrics, EvalReport, TrainOutcome};
