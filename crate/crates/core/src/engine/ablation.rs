use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, Aggregate, MeanStd};
use crate::model::{build_model, Branches, ModelConfig};

pub const ABLATION_CSV_HEADER: &str = "model,SE,IoU,Dice,ACC,AUC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub branches: Branches,
    pub seeds: Vec<u64>,
    /// Test-split aggregate of each seed's best checkpoint, in seed order.
    pub per_seed: Vec<Aggregate>,
    /// Mean and std across seeds of the per-seed means, in percent.
    pub se: MeanStd,
    pub iou: MeanStd,
    pub dice: MeanStd,
    pub acc: MeanStd,
    pub auc: MeanStd,
}

impl AblationRow {
    /// Per-seed mean test IoU, in seed order.
    pub fn iou_per_seed(&self) -> Vec<f64> {
        self.per_seed.iter().map(|a| a.iou.mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let cells: Vec<String> = [&r.se, &r.iou, &r.dice, &r.acc, &r.auc]
                .iter()
                .map(|m| format!("{:.2}±{:.2}", m.mean, m.std))
                .collect();
            s.push_str(&format!("{},{}\n", r.label, cells.join(",")));
        }
        s
    }

    pub fn row(&self, branches: Branches) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.branches == branches)
    }
}

/// Trains the four ablation rows (baseline, +ASR, +UFD, +FIM) once per
/// seed and scores each best checkpoint on the test split. The seed drives
/// both initialisation and shuffling.
pub fn run_ablation(
    data: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::with_capacity(Branches::ROWS.len());
    for branches in Branches::ROWS {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                ablation: branches,
                seed,
                ..base_train.clone()
            };
            let model = build_model(&cfg.model_config(base_model), seed)?;
            let outcome = train(model, data, &cfg)?;
            per_seed.push(evaluate_model(&outcome.best, &data.test)?.aggregate);
        }
        let across = |f: fn(&Aggregate) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            label: branches.label().to_string(),
            branches,
            seeds: seeds.to_vec(),
            se: across(|a| a.se.mean),
            iou: across(|a| a.iou.mean),
            dice: across(|a| a.dice.mean),
            acc: across(|a| a.acc.mean),
            auc: across(|a| a.auc.mean),
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}
