//! Training, evaluation, ablation and self-verification.

pub mod ablation;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod reference;
pub mod train;
pub mod verify;

pub use ablation::{run_ablation, AblationConfig, AblationRow, AblationTable};
pub use eval::{evaluate, fingerprint, EvalConfig, EvalReport, ModelPredictor, Predictor};
pub use metrics::{miou, IouAccumulator, IouMode, MiouSummary};
pub use optim::{Sgd, SgdConfig};
pub use train::{train, write_loss_curve, EpochStats, LrSchedule, TrainConfig, TrainOutcome};
pub use verify::{gradient_suite, oracle_suite, SuiteReport};
