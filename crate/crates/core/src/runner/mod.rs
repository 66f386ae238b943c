//! Config-driven experiment runs and cross-run reports.

mod config;
mod run;

pub use config::{parse_config, parse_config_str, ConfigError, DataSource, ExperimentConfig, ModelConfig};
pub use run::{
    config_hash, load_dataset, report, run, Manifest, Report, ReportRow, RunSummary, SeedResult, Stat, MANIFEST_FILE,
    SUMMARY_FILE, SUMMARY_TABLE_FILE,
};
