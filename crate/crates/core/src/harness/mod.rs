//! Experiment orchestration: configs, the training loop, ablation grids and
//! plotting.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod run;

pub use ablation::{run_ablation_grid, AblationAxis, AblationRow, AblationSummary};
pub use config::{DatasetConfig, DiagnosticsConfig, ExperimentConfig, LrSchedule, ModelConfig};
pub use metrics::{final_window_accuracy, read_metrics, EpochMetrics, METRICS_COLUMNS};
pub use plot::emit_plots;
pub use run::{prepare_data, run_all_seeds, run_experiment, train, PreparedData, RunOutcome};
