//! Segmentation metrics with per-patient aggregation.
//!
//! Confusion counts are pooled over all slices of a patient first, metrics
//! are computed per patient, and the report averages those patient values.
//! Zero-division convention: Dice/IoU/precision/recall define `0/0 = 1`
//! (an empty prediction of an empty mask is perfect), FPR defines `0/0 = 0`,
//! and VOSE (`FP / (TP + FN)`) falls back to the raw FP count when the
//! patient has no positive ground truth but false positives exist.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{bail_validation, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pixel confusion counts for one prediction/ground-truth pair.
pub fn count_confusion(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Counts> {
    if pred.dim() != gt.dim() {
        bail_validation!("pred shape {:?} != gt shape {:?}", pred.dim(), gt.dim());
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p > 1 || g > 1 {
            bail_validation!("masks must be binary");
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// The six reported metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub vose: f64,
}

/// Metrics from pooled confusion counts, applying the zero-division rules.
pub fn metrics_from_counts(c: &Counts) -> MetricValues {
    let ratio_or = |num: u64, den: u64, fallback: f64| {
        if den == 0 { fallback } else { num as f64 / den as f64 }
    };
    let vose_den = c.tp + c.fn_;
    MetricValues {
        dice: ratio_or(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0),
        iou: ratio_or(c.tp, c.tp + c.fp + c.fn_, 1.0),
        precision: ratio_or(c.tp, c.tp + c.fp, 1.0),
        recall: ratio_or(c.tp, c.tp + c.fn_, 1.0),
        fpr: ratio_or(c.fp, c.fp + c.tn, 0.0),
        vose: if vose_den == 0 {
            // No positive ground truth: report the raw false-positive count
            // so spurious volume is still visible (0 when truly clean).
            c.fp as f64
        } else {
            c.fp as f64 / vose_den as f64
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub n_slices: usize,
    pub counts: Counts,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_patients: usize,
    pub n_slices: usize,
    pub mean: MetricValues,
    pub per_patient: Vec<PatientMetrics>,
}

impl MetricsReport {
    /// CSV rendering: one row per patient plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,n_slices,dice,iou,precision,recall,fpr,vose\n");
        let row = |id: &str, n: usize, v: &MetricValues| {
            format!(
                "{id},{n},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                v.dice, v.iou, v.precision, v.recall, v.fpr, v.vose
            )
        };
        for p in &self.per_patient {
            out.push_str(&row(&p.patient_id, p.n_slices, &p.values));
        }
        out.push_str(&row("mean", self.n_slices, &self.mean));
        out
    }
}

/// Evaluates `(patient_id, pred, gt)` triples: pools counts per patient,
/// computes patient metrics, and averages them (each patient weighs equally).
pub fn evaluate_slices(items: &[(String, Array2<u8>, Array2<u8>)]) -> Result<MetricsReport> {
    if items.is_empty() {
        bail_validation!("cannot evaluate an empty slice list");
    }
    let mut by_patient: BTreeMap<String, (Counts, usize)> = BTreeMap::new();
    for (pid, pred, gt) in items {
        let c = count_confusion(pred, gt)?;
        let entry = by_patient.entry(pid.clone()).or_default();
        entry.0.add(&c);
        entry.1 += 1;
    }
    let per_patient: Vec<PatientMetrics> = by_patient
        .into_iter()
        .map(|(patient_id, (counts, n_slices))| PatientMetrics {
            patient_id,
            n_slices,
            values: metrics_from_counts(&counts),
            counts,
        })
        .collect();
    let n = per_patient.len() as f64;
    let mean = MetricValues {
        dice: per_patient.iter().map(|p| p.values.dice).sum::<f64>() / n,
        iou: per_patient.iter().map(|p| p.values.iou).sum::<f64>() / n,
        precision: per_patient.iter().map(|p| p.values.precision).sum::<f64>() / n,
        recall: per_patient.iter().map(|p| p.values.recall).sum::<f64>() / n,
        fpr: per_patient.iter().map(|p| p.values.fpr).sum::<f64>() / n,
        vose: per_patient.iter().map(|p| p.values.vose).sum::<f64>() / n,
    };
    Ok(MetricsReport {
        n_patients: per_patient.len(),
        n_slices: items.len(),
        mean,
        per_patient,
    })
}
