//! Experiment orchestration: configs, labs, sweeps, tandem checks,
//! hypothesis presets and reports.

pub mod experiment;
pub mod oracle_check;
pub mod presets;
pub mod report;
pub mod spec;
pub mod sweep;

pub use experiment::{run_experiment, run_in_lab, tandem_check, ExperimentOutcome, Perturbation, TandemReport};
pub use presets::{run_preset, Preset, PresetOptions, PresetReport};
pub use report::{quantile, report, QuantileRow, DEFAULT_QUANTILE};
pub use spec::{DatasetRecipe, ExperimentSpec, GeneratorSpec, JudgeKind, Lab, LabSpec};
pub use sweep::{run_sweep, PooledRow, SweepReport, SweepSpec};
