//! Binary segmentation metrics (vessel = positive) and their aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vessel probability at or above this is predicted as vessel.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_binary(name: &str, mask: &[u8]) -> Result<()> {
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(Error::Validation(format!("{name} mask contains non-binary value {v}")));
    }
    Ok(())
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary("prediction", pred)?;
    check_binary("ground-truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub p: f64,
    pub se: f64,
    pub iou: f64,
    pub dice: f64,
    pub acc: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, sensitivity, IoU, Dice and accuracy; 0/0 is reported as 0.
pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    ScalarMetrics {
        p: ratio(c.tp, c.tp + c.fp),
        se: ratio(c.tp, c.tp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
    }
}

/// Rank-based (Mann-Whitney) ROC AUC; tied scores count one half.
/// Returns `None` when `gt` holds a single class.
pub fn auc(scores: &[f64], gt: &[u8]) -> Result<Option<f64>> {
    if scores.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            gt.len()
        )));
    }
    check_binary("ground-truth", gt)?;
    let positives = gt.iter().filter(|&&g| g == 1).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay
    // in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_run = order[i..=j].iter().filter(|&&k| gt[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos_in_run;
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(Some(twice_u as f64 / (2.0 * positives as f64 * negatives as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub p: f64,
    pub se: f64,
    pub iou: f64,
    pub dice: f64,
    pub acc: f64,
    /// Missing when the ground truth has a single class.
    pub auc: Option<f64>,
}

/// Thresholds the vessel probability and scores it against a binary mask.
pub fn evaluate_image(vessel_prob: &[f64], gt: &[u8]) -> Result<ImageMetrics> {
    let pred: Vec<u8> = vessel_prob.iter().map(|&p| (p >= THRESHOLD) as u8).collect();
    let s = scalar_metrics(&confusion(&pred, gt)?);
    Ok(ImageMetrics {
        p: s.p,
        se: s.se,
        iou: s.iou,
        dice: s.dice,
        acc: s.acc,
        auc: auc(vessel_prob, gt)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    // Sorted so the result does not depend on input order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Per-metric mean ± std, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub p: MeanStd,
    pub se: MeanStd,
    pub iou: MeanStd,
    pub dice: MeanStd,
    pub acc: MeanStd,
    pub auc: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Across images.
    pub aggregate: Aggregate,
}

fn percent(values: impl Iterator<Item = f64>) -> MeanStd {
    let v: Vec<f64> = values.map(|x| 100.0 * x).collect();
    mean_std(&v)
}

pub fn aggregate(per_image: &[ImageMetrics]) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Validation("cannot aggregate zero images".into()));
    }
    let it = || per_image.iter();
    let aggregate = Aggregate {
        p: percent(it().map(|m| m.p)),
        se: percent(it().map(|m| m.se)),
        iou: percent(it().map(|m| m.iou)),
        dice: percent(it().map(|m| m.dice)),
        acc: percent(it().map(|m| m.acc)),
        auc: percent(it().filter_map(|m| m.auc)),
    };
    Ok(MetricsReport {
        per_image: per_image.to_vec(),
        aggregate,
    })
}

/// CSV header in table order with precision appended.
pub const CSV_HEADER: &str = "SE,IoU,Dice,ACC,AUC,P";

fn fmt_ms(m: &MeanStd) -> String {
    format!("{:.2}±{:.2}", m.mean, m.std)
}

impl Aggregate {
    pub fn csv_row(&self) -> String {
        [&self.se, &self.iou, &self.dice, &self.acc, &self.auc, &self.p]
            .iter()
            .map(|m| fmt_ms(m))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.aggregate.csv_row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion(&[1, 1, 1, 1], &[1, 1, 1, 1]).unwrap(),
            ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 0 }
        );
        assert_eq!(
            confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(),
            ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 }
        );
        let c = confusion(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&[2, 0], &[1, 0]).is_err());
        assert!(confusion(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn scalar_examples() {
        let m = scalar_metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!(m, ScalarMetrics { p: 0.5, se: 0.5, iou: 1.0 / 3.0, dice: 0.5, acc: 0.5 });
        let perfect = scalar_metrics(&ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 5 });
        assert_eq!(perfect, ScalarMetrics { p: 1.0, se: 1.0, iou: 1.0, dice: 1.0, acc: 1.0 });
        let miss = scalar_metrics(&ConfusionCounts { tp: 0, fp: 2, fn_: 1, tn: 5 });
        assert_eq!((miss.iou, miss.dice), (0.0, 0.0));
        let empty = scalar_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 4 });
        assert_eq!((empty.p, empty.se, empty.acc), (0.0, 0.0, 1.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[1, 0, 1, 0]).unwrap(), Some(1.0));
        // Positives {0.4, 0.6} beat one of the two negatives {0.9, 0.1} each.
        assert_eq!(auc(&[0.4, 0.9, 0.6, 0.1], &[1, 0, 1, 0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.4, 0.9, 0.6, 0.1], &[1, 1, 0, 0]).unwrap(), Some(0.75));
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3, 0.2], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn aggregate_examples() {
        let img = |iou: f64| ImageMetrics { p: 0.0, se: 0.0, iou, dice: 0.0, acc: 0.0, auc: None };
        let r = aggregate(&[img(0.5), img(0.7)]).unwrap();
        assert!((r.aggregate.iou.mean - 60.0).abs() < 1e-12);
        assert!((r.aggregate.iou.std - 10.0).abs() < 1e-12);
        assert_eq!(aggregate(&[img(0.4)]).unwrap().aggregate.iou.std, 0.0);
        assert_eq!(
            aggregate(&[img(0.1), img(0.5), img(0.2)]).unwrap().aggregate,
            aggregate(&[img(0.5), img(0.2), img(0.1)]).unwrap().aggregate
        );
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let img = ImageMetrics { p: 0.5, se: 0.25, iou: 0.2, dice: 1.0 / 3.0, acc: 0.9, auc: Some(0.8) };
        let csv = aggregate(&[img]).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("SE,IoU,Dice,ACC,AUC,P"));
        assert_eq!(lines.next(), Some("25.00±0.00,20.00±0.00,33.33±0.00,90.00±0.00,80.00±0.00,50.00±0.00"));
    }
}
