//! Synthetic task suites, per-task fine-tuning, the four coefficient
//! training regimes, and evaluation.

mod finetune;
mod metrics;
mod optim;
mod suite;
mod train;

pub use finetune::{build_pool, finetune_base, loss_and_grad};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricsRecord, CSV_COLUMNS};
pub use optim::{cosine_lr, AdamW};
pub use suite::{generate_task_suite, load_suite, save_suite, Split, SuiteSpec, Task, TaskSuite, SUITE_FORMAT_VERSION};
pub use train::{
    evaluate, gate_filter_baseline, train_regime, CoefficientModel, ExperimentConfig, GateModel, Regime, TrainConfig,
    TrainedState,
};
