//! Experiment orchestration: configs, datasets, training runs, grid
//! search, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod report;
pub mod train;

pub use checkpoint::CheckpointFile;
pub use config::{AnalysisConfig, DatasetConfig, ExperimentConfig, ModelConfig};
pub use data::{load_cifar10_bin, load_mnist_idx, synth_dataset, Dataset, SynthSpec, SynthVariant};
pub use report::{
    analyze_checkpoint, bake_export, eval_checkpoint, grid_search, grid_search_on,
    overhead_report, overhead_report_on, parse_values, write_run_outputs, GridCell, GridResult,
    OverheadReport,
};
pub use train::{
    load_dataset, split_for_seed, train, train_on, EpochRecord, RunResult, RunStatus, SeedResult,
    Splits, Trainer,
};
