//! Post-hoc fairness and performance metrics. Group tags are read here and
//! nowhere in the training path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub y_true: u8,
    pub y_pred: u8,
    pub group: u32,
}

impl PredictionRecord {
    pub fn new(y_true: u8, y_pred: u8, group: u32) -> Self {
        Self { y_true, y_pred, group }
    }
}

/// Build records from parallel label, prediction and group slices.
pub fn records(y_true: &[u8], y_pred: &[u8], groups: &[u32]) -> Result<Vec<PredictionRecord>> {
    if y_true.len() != y_pred.len() || y_true.len() != groups.len() {
        return Err(Error::DimensionMismatch {
            context: "prediction records",
            expected: y_true.len(),
            got: if y_pred.len() != y_true.len() { y_pred.len() } else { groups.len() },
        });
    }
    Ok(y_true
        .iter()
        .zip(y_pred)
        .zip(groups)
        .map(|((&t, &p), &g)| PredictionRecord::new(t, p, g))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EoGap {
    /// `|TPR_1 - TPR_0|`
    pub abs: f64,
    /// `TPR_1 - TPR_0`
    pub signed: f64,
}

fn tpr(records: &[PredictionRecord], group: u32) -> Result<f64> {
    let (mut pos, mut hit) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.group == group && r.y_true == 1) {
        pos += 1;
        hit += usize::from(r.y_pred == 1);
    }
    if pos == 0 {
        return Err(Error::UndefinedMetric(format!(
            "group {group} has no positive-label records, TPR is undefined"
        )));
    }
    Ok(hit as f64 / pos as f64)
}

/// Equal-opportunity gap between groups 1 and 0.
pub fn eo_gap_signed(records: &[PredictionRecord]) -> Result<EoGap> {
    if let Some(r) = records.iter().find(|r| r.group > 1) {
        return Err(Error::invalid(format!(
            "equal-opportunity gap is defined for groups 0 and 1, found group {}",
            r.group
        )));
    }
    let signed = tpr(records, 1)? - tpr(records, 0)?;
    Ok(EoGap { abs: signed.abs(), signed })
}

pub fn eo_gap(records: &[PredictionRecord]) -> Result<f64> {
    eo_gap_signed(records).map(|g| g.abs)
}

/// Fairness-accuracy trade-off relative to a baseline:
/// `(perf_m - perf_b) / perf_b - (eo_m - eo_b) / eo_b`.
pub fn fate(perf_m: f64, perf_b: f64, eo_m: f64, eo_b: f64) -> Result<f64> {
    if !(perf_b > 0.0) {
        return Err(Error::UndefinedMetric(format!("baseline performance must be > 0, got {perf_b}")));
    }
    if !(eo_b > 0.0) {
        return Err(Error::UndefinedMetric(format!("baseline EO gap must be > 0, got {eo_b}")));
    }
    Ok((perf_m - perf_b) / perf_b - (eo_m - eo_b) / eo_b)
}

/// Which performance number feeds FATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FatePerf {
    #[default]
    F1,
    Accuracy,
}

/// Binary F1 (class 1 positive) and accuracy. F1 is 0 when there are no true
/// positives, including the case with no predicted and no actual positives.
pub fn f1_accuracy(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::invalid("metrics need at least one record"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.y_true, r.y_pred) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fneg += 1,
            _ => tn += 1,
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    let acc = (tp + tn) as f64 / records.len() as f64;
    Ok((f1, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub support: usize,
}

pub fn per_group_metrics(records: &[PredictionRecord]) -> Result<BTreeMap<u32, GroupMetrics>> {
    let mut by_group: BTreeMap<u32, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_group.entry(r.group).or_default().push(*r);
    }
    by_group
        .into_iter()
        .map(|(g, recs)| {
            let (f1, accuracy) = f1_accuracy(&recs)?;
            Ok((g, GroupMetrics { f1, accuracy, support: recs.len() }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub accuracy: f64,
    pub eo_gap: f64,
    pub eo_gap_signed: f64,
    pub per_group: BTreeMap<u32, GroupMetrics>,
}

pub fn metrics_report(records: &[PredictionRecord]) -> Result<MetricsReport> {
    let (f1, accuracy) = f1_accuracy(records)?;
    let gap = eo_gap_signed(records)?;
    Ok(MetricsReport {
        f1,
        accuracy,
        eo_gap: gap.abs,
        eo_gap_signed: gap.signed,
        per_group: per_group_metrics(records)?,
    })
}
