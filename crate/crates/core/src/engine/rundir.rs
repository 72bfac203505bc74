use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainOutcome};
use crate::checkpoint::save_checkpoint;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::model::ModelConfig;

/// Everything needed to reproduce a run, echoed to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Manifest path or dataset name.
    pub dataset: String,
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFiles {
    pub config: PathBuf,
    pub log: PathBuf,
    pub validation: PathBuf,
    pub metrics: Option<(PathBuf, PathBuf)>,
    pub best: PathBuf,
    pub last: PathBuf,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        writeln!(s, "{}", serde_json::to_string(it)?).expect("string write");
    }
    Ok(s)
}

/// Writes `config.json`, `log.jsonl` (one line per step), `validation.jsonl`,
/// optional `metrics.json`/`metrics.csv` and `checkpoints/{best,final}.ckpt`.
/// The best checkpoint is stored stripped for inference; the final one keeps
/// all branches.
pub fn write_run_dir(
    dir: impl AsRef<Path>,
    config: &RunConfig,
    outcome: &TrainOutcome,
    metrics: Option<&MetricsReport>,
) -> Result<RunFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let files = RunFiles {
        config: dir.join("config.json"),
        log: dir.join("log.jsonl"),
        validation: dir.join("validation.jsonl"),
        metrics: metrics.map(|_| (dir.join("metrics.json"), dir.join("metrics.csv"))),
        best: dir.join("checkpoints").join("best.ckpt"),
        last: dir.join("checkpoints").join("final.ckpt"),
    };
    std::fs::write(&files.config, serde_json::to_string_pretty(config)? + "\n")?;
    std::fs::write(&files.log, jsonl(&outcome.log.steps)?)?;
    std::fs::write(&files.validation, jsonl(&outcome.log.validation)?)?;
    if let (Some(m), Some((json, csv))) = (metrics, &files.metrics) {
        std::fs::write(json, serde_json::to_string_pretty(m)? + "\n")?;
        std::fs::write(csv, m.to_csv())?;
    }
    save_checkpoint(&outcome.best.strip_for_test(), &files.best)?;
    save_checkpoint(&outcome.final_model, &files.last)?;
    Ok(files)
}
