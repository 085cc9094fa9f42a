//! Configuration, optimizer, training loops, benchmarks and the pieces the
//! `stet` command line is built from.

pub mod bench;
pub mod config;
pub mod data;
pub mod gradsuite;
pub mod optim;
pub mod train;

pub use bench::{export_embeddings, noise_grid, noisy_accuracy, run_noise_bench};
pub use config::{RunConfig, Task};
pub use data::{prepare, PreparedData};
pub use gradsuite::gradcheck_suite;
pub use optim::AdamW;
pub use train::{
    classification_accuracy, fill_report, regression_metrics, run_finetune, run_pretrain, write_log_csv,
    FinetuneOutcome, Init, PretrainOutcome, TrainLogRecord,
};
