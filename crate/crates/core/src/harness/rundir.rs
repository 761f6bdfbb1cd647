//! Run-directory artifacts: config snapshot, per-epoch metrics CSV, and
//! result/loyalty JSON.
//!
//! Every byte written here is deterministic in the run's `(config, seed)`
//! except the `wall_clock_seconds` field inside `result.json`; floats use
//! Rust's shortest-roundtrip formatting, so equal runs produce equal
//! files.

use std::fs;
use std::path::Path;

use crate::error::Result;

use super::{ExperimentConfig, RunResult};

/// Renders the per-epoch table. Losses and accuracies print in full
/// precision so reruns can be compared byte for byte.
pub fn metrics_csv(result: &RunResult) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for e in &result.epochs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        ));
    }
    out
}

/// Pretty JSON for the run result, newline-terminated.
pub fn result_json(result: &RunResult) -> Result<String> {
    Ok(serde_json::to_string_pretty(result)? + "\n")
}

/// Writes `config.snapshot`, `metrics.csv`, `result.json`, and — when the
/// run produced one — `loyalty.json` under `dir`, creating it if needed.
pub fn write_run_artifacts(dir: &Path, config: &ExperimentConfig, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.snapshot"), config.to_toml()?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(result))?;
    fs::write(dir.join("result.json"), result_json(result)?)?;
    if let Some(loyalty) = &result.loyalty {
        fs::write(dir.join("loyalty.json"), serde_json::to_string_pretty(loyalty)? + "\n")?;
    }
    Ok(())
}
