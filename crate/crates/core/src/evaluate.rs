//! Threshold metrics, ROC AUC, per-breast aggregation, and model comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::manifest::Laterality;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyPredictions,
    #[error("AUC needs both classes; all labels are {0}")]
    SingleClassOnly(u8),
    #[error("{0}: AUC is undefined")]
    UndefinedMetric(String),
    #[error("no reports to compare")]
    NoReports,
    #[error("probability {value} for `{key}` is outside [0, 1]")]
    InvalidProbability { key: String, value: f64 },
    #[error("prediction file: {0}")]
    Csv(#[from] csv::Error),
    #[error("prediction file: {0}")]
    Io(#[from] std::io::Error),
}

/// A metric value, or `undefined` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Defined(f64),
    Undefined,
}

impl Metric {
    pub fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Self::Undefined
        } else {
            Self::Defined(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(v),
            Self::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Self::Defined(_))
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Self::Undefined, Self::Defined)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Defined(v) => write!(f, "{v:.4}"),
            Self::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Defined(v) => s.serialize_f64(*v),
            Self::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Defined(v)),
            Raw::Text(t) if t == "undefined" => Ok(Self::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"undefined\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub key: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    rows: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(rows: Vec<Prediction>) -> Result<Self, EvalError> {
        for r in &rows {
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(EvalError::InvalidProbability {
                    key: r.key.clone(),
                    value: r.probability,
                });
            }
        }
        Ok(Self { rows })
    }

    /// Builds a set from parallel score/label slices with keys `0..n`.
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self, EvalError> {
        assert_eq!(scores.len(), labels.len());
        Self::new(
            scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&probability, &label))| Prediction {
                    key: i.to_string(),
                    probability,
                    label: label.min(1),
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[Prediction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// A prediction counts as positive iff `probability >= threshold`.
pub fn confusion_at_threshold(
    preds: &PredictionSet,
    threshold: f64,
) -> Result<ConfusionCounts, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let mut c = ConfusionCounts::default();
    for r in preds.rows() {
        match (r.probability >= threshold, r.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub precision: Metric,
    pub recall: Metric,
    pub accuracy: Metric,
    pub f1: Metric,
}

pub fn compute_metrics(c: &ConfusionCounts) -> ThresholdMetrics {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let precision = Metric::ratio(tp, tp + fp);
    let recall = Metric::ratio(tp, tp + fn_);
    let accuracy = Metric::ratio(tp + tn, tp + tn + fp + fn_);
    let f1 = match (precision, recall) {
        (Metric::Defined(p), Metric::Defined(r)) => Metric::ratio(2.0 * p * r, p + r),
        _ => Metric::Undefined,
    };
    ThresholdMetrics {
        precision,
        recall,
        accuracy,
        f1,
    }
}

fn class_counts(preds: &PredictionSet) -> Result<(u64, u64), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let pos = preds.rows().iter().filter(|r| r.label == 1).count() as u64;
    let neg = preds.len() as u64 - pos;
    match (pos, neg) {
        (0, _) => Err(EvalError::SingleClassOnly(0)),
        (_, 0) => Err(EvalError::SingleClassOnly(1)),
        _ => Ok((pos, neg)),
    }
}

/// Trapezoidal area under the ROC curve over all distinct score thresholds.
pub fn roc_auc(preds: &PredictionSet) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(preds)?;
    let mut rows: Vec<(f64, bool)> = preds
        .rows()
        .iter()
        .map(|r| (r.probability, r.label == 1))
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    // twice the area, in units of one positive-negative pair
    let (mut tp, mut fp, mut twice_area) = (0u64, 0u64, 0u128);
    let mut i = 0;
    while i < rows.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let score = rows[i].0;
        while i < rows.len() && rows[i].0 == score {
            if rows[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += ((fp - prev_fp) as u128) * ((tp + prev_tp) as u128);
    }
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Reference O(P·N) concordance: 1 per correctly ordered positive-negative
/// pair, ½ per tie.
pub fn roc_auc_pairwise_oracle(preds: &PredictionSet) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(preds)?;
    let positives: Vec<f64> = preds
        .rows()
        .iter()
        .filter(|r| r.label == 1)
        .map(|r| r.probability)
        .collect();
    let negatives: Vec<f64> = preds
        .rows()
        .iter()
        .filter(|r| r.label != 1)
        .map(|r| r.probability)
        .collect();
    let mut twice = 0u64;
    for &p in &positives {
        for &n in &negatives {
            twice += match p.partial_cmp(&n) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// One image-level prediction as written by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub patient_id: String,
    pub laterality: Laterality,
    pub fold: usize,
    pub probability: f64,
    pub label: u8,
}

pub fn breast_key(patient_id: &str, laterality: Laterality) -> String {
    format!("{patient_id}/{laterality}")
}

/// Mean probability and OR label per (patient, laterality), in first-seen order.
pub fn aggregate_per_breast(images: &[ImagePrediction]) -> PredictionSet {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize, u8)> = BTreeMap::new();
    for r in images {
        let key = breast_key(&r.patient_id, r.laterality);
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0, 0)
        });
        e.0 += r.probability;
        e.1 += 1;
        e.2 |= r.label;
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let (sum, n, label) = acc[&key];
            let probability = (sum / n as f64).clamp(0.0, 1.0);
            Prediction {
                key,
                probability,
                label,
            }
        })
        .collect();
    PredictionSet { rows }
}

pub fn image_level(images: &[ImagePrediction]) -> Result<PredictionSet, EvalError> {
    PredictionSet::new(
        images
            .iter()
            .map(|r| Prediction {
                key: r.image_id.clone(),
                probability: r.probability,
                label: r.label,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub accuracy: Metric,
    pub f1: Metric,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub n: usize,
}

impl MetricReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            auc: self.auc,
            precision: self.precision,
            recall: self.recall,
            accuracy: self.accuracy,
            f1: self.f1,
        }
    }
}

/// AUC is `undefined` when only one class is present.
pub fn evaluate_predictions(
    preds: &PredictionSet,
    threshold: f64,
) -> Result<MetricReport, EvalError> {
    let confusion = confusion_at_threshold(preds, threshold)?;
    let m = compute_metrics(&confusion);
    let auc = match roc_auc(preds) {
        Ok(v) => Metric::Defined(v),
        Err(EvalError::SingleClassOnly(_)) => Metric::Undefined,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        auc,
        precision: m.precision,
        recall: m.recall,
        accuracy: m.accuracy,
        f1: m.f1,
        threshold,
        confusion,
        n: preds.len(),
    })
}

/// The five values shown per model in a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub auc: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub accuracy: Metric,
    pub f1: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const TABLE_COLUMNS: [&str; 6] = ["Model", "AUC", "Precision", "Recall", "Accuracy", "F-score"];

/// Sorts by AUC descending, then F1 descending (undefined F1 last).
pub fn compare_models(reports: &[(String, MetricValues)]) -> Result<ComparisonTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let mut rows = Vec::with_capacity(reports.len());
    for (name, m) in reports {
        if !m.auc.is_defined() {
            return Err(EvalError::UndefinedMetric(name.clone()));
        }
        rows.push(ComparisonRow {
            model: name.clone(),
            metrics: *m,
        });
    }
    rank_rows(&mut rows);
    Ok(ComparisonTable { rows })
}

/// AUC descending, then F1 descending; undefined values sort last. Stable.
pub(crate) fn rank_rows(rows: &mut [ComparisonRow]) {
    let key = |m: Metric| m.value().unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| {
        key(b.metrics.auc)
            .total_cmp(&key(a.metrics.auc))
            .then(key(b.metrics.f1).total_cmp(&key(a.metrics.f1)))
    });
}

impl ComparisonTable {
    /// Aligned plain-text rendering, four decimals per value.
    pub fn render_text(&self) -> String {
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let m = &r.metrics;
                [
                    r.model.clone(),
                    m.auc.to_string(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.accuracy.to_string(),
                    m.f1.to_string(),
                ]
            })
            .collect();
        render_grid(&TABLE_COLUMNS.map(String::from), &cells)
    }
}

pub(crate) fn render_grid(header: &[String; 6], rows: &[[String; 6]]) -> String {
    let mut widths = header.clone().map(|h| h.chars().count());
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String; 6]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn write_image_predictions(path: &Path, rows: &[ImagePrediction]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image_predictions(path: &Path) -> Result<Vec<ImagePrediction>, EvalError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let rows: Vec<ImagePrediction> = rdr.deserialize().collect::<Result<_, _>>()?;
    for r in &rows {
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(EvalError::InvalidProbability {
                key: r.image_id.clone(),
                value: r.probability,
            });
        }
    }
    Ok(rows)
}
