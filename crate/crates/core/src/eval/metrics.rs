use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use super::EvalError;
use crate::catalog::LabelTable;

/// A metric value that may be undefined (serialized as the string `NA`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metric(pub Option<f64>);

impl Metric {
    pub const NA: Metric = Metric(None);

    pub fn value(v: f64) -> Self {
        Metric(Some(v))
    }

    pub fn get(self) -> Option<f64> {
        self.0
    }

    pub fn is_na(self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("NA"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("NA"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Metric;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"NA\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Metric, E> {
                Ok(Metric(Some(v)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Metric, E> {
                Ok(Metric(Some(v as f64)))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Metric, E> {
                Ok(Metric(Some(v as f64)))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Metric, E> {
                if v == "NA" {
                    Ok(Metric::NA)
                } else {
                    v.parse().map(|x| Metric(Some(x))).map_err(E::custom)
                }
            }
        }
        d.deserialize_any(V)
    }
}

fn ratio(num: f64, den: f64) -> Metric {
    if den == 0.0 {
        Metric::NA
    } else {
        Metric::value(num / den)
    }
}

/// Area under the ROC curve in its Mann–Whitney form: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// `NA` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Metric, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyJoin);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::InvalidLabel(bad.to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(Metric::NA);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of mid-ranks of positives, doubled to stay in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * positives;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // 2·U = 2·R − np(np+1)
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(Metric::value(twice_u as f64 / (2 * np * nn) as f64))
}

/// 2×2 confusion counts. Rows are the actual class, columns the predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    /// From `[[TP, FN], [FP, TN]]`; negative counts are rejected.
    pub fn from_matrix(m: [[i64; 2]; 2]) -> Result<Self, EvalError> {
        let check = |v: i64| u64::try_from(v).map_err(|_| EvalError::NegativeCount(v));
        Ok(Confusion {
            tp: check(m[0][0])?,
            fn_: check(m[0][1])?,
            fp: check(m[1][0])?,
            tn: check(m[1][1])?,
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn tally(actual: &[u8], predicted: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&a, &p) in actual.iter().zip(predicted) {
            match (a, p) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fn_ += 1,
                (_, 1) => c.fp += 1,
                _ => c.tn += 1,
            }
        }
        c
    }
}

/// Cohen's kappa; `NA` when chance agreement is total.
///
/// Evaluated as `(N·(TP+TN) − S) / (N² − S)` with
/// `S = (TP+FP)(TP+FN) + (FN+TN)(FP+TN)`, exact in integers up to the final
/// division.
pub fn cohens_kappa(c: &Confusion) -> Result<Metric, EvalError> {
    let n = c.total() as i128;
    if n == 0 {
        return Err(EvalError::EmptyJoin);
    }
    let (tp, fn_, fp, tn) = (c.tp as i128, c.fn_ as i128, c.fp as i128, c.tn as i128);
    let chance = (tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn);
    let den = n * n - chance;
    if den == 0 {
        return Ok(Metric::NA);
    }
    Ok(Metric::value((n * (tp + tn) - chance) as f64 / den as f64))
}

pub const LOG_LOSS_EPS: f64 = 1e-15;

pub fn log_loss(scores: &[f64], labels: &[u8]) -> Metric {
    if scores.is_empty() {
        return Metric::NA;
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Metric::value(total / scores.len() as f64)
}

pub const CLASSIFICATION_METRICS: [&str; 8] = [
    "accuracy",
    "precision",
    "recall",
    "specificity",
    "f1",
    "auc",
    "cohens_kappa",
    "log_loss",
];

pub const REGRESSION_METRICS: [&str; 3] = ["rmse", "mae", "r2"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub specificity: Metric,
    pub f1: Metric,
    pub auc: Metric,
    pub cohens_kappa: Metric,
    pub log_loss: Metric,
}

impl ClassificationMetrics {
    fn na() -> Self {
        ClassificationMetrics {
            accuracy: Metric::NA,
            precision: Metric::NA,
            recall: Metric::NA,
            specificity: Metric::NA,
            f1: Metric::NA,
            auc: Metric::NA,
            cohens_kappa: Metric::NA,
            log_loss: Metric::NA,
        }
    }

    pub fn get(&self, name: &str) -> Option<Metric> {
        Some(match name {
            "accuracy" => self.accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "specificity" => self.specificity,
            "f1" => self.f1,
            "auc" => self.auc,
            "cohens_kappa" => self.cohens_kappa,
            "log_loss" => self.log_loss,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: Metric,
    pub mae: Metric,
    pub r2: Metric,
}

impl RegressionMetrics {
    fn na() -> Self {
        RegressionMetrics {
            rmse: Metric::NA,
            mae: Metric::NA,
            r2: Metric::NA,
        }
    }

    pub fn get(&self, name: &str) -> Option<Metric> {
        Some(match name {
            "rmse" => self.rmse,
            "mae" => self.mae,
            "r2" => self.r2,
            _ => return None,
        })
    }
}

/// Metric battery for one course's holdout predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub classification: ClassificationMetrics,
    pub regression: RegressionMetrics,
    /// Users scored (labeled users with a prediction).
    pub n: usize,
    /// Labeled users without a prediction; not scored.
    pub missing_predictions: usize,
}

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<Metric> {
        self.classification
            .get(name)
            .or_else(|| self.regression.get(name))
    }
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub user_id: String,
    pub score: f64,
    pub predicted_label: f64,
}

/// Parses a `user_id,score,predicted_label` CSV.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| EvalError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["user_id", "score", "predicted_label"] {
        return Err(EvalError::Malformed(format!(
            "expected header user_id,score,predicted_label, found {}",
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = rec.map_err(|e| EvalError::Malformed(format!("row {}: {e}", i + 2)))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(EvalError::ScoreOutOfRange {
                user_id: row.user_id,
                score: row.score,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Joined (prediction, label) pairs; returns them with the missing count.
fn join<'a>(
    predictions: &'a [PredictionRow],
    labels: &LabelTable,
) -> Result<(Vec<(&'a PredictionRow, &'a str)>, usize), EvalError> {
    let mut seen = std::collections::HashSet::new();
    let mut joined = Vec::new();
    for p in predictions {
        if labels.get(&p.user_id).is_some() && seen.insert(p.user_id.as_str()) {
            joined.push((p, p.user_id.as_str()));
        }
    }
    if joined.is_empty() {
        return Err(EvalError::EmptyJoin);
    }
    let missing = labels.rows.len() - joined.len();
    Ok((joined, missing))
}

/// Binary dropout metrics on the inner join of predictions and labels.
/// Duplicate predictions for a user keep the first row.
pub fn classification_report(
    predictions: &[PredictionRow],
    labels: &LabelTable,
) -> Result<MetricSet, EvalError> {
    for p in predictions {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(EvalError::ScoreOutOfRange {
                user_id: p.user_id.clone(),
                score: p.score,
            });
        }
    }
    let (joined, missing) = join(predictions, labels)?;
    let mut scores = Vec::with_capacity(joined.len());
    let mut actual = Vec::with_capacity(joined.len());
    let mut predicted = Vec::with_capacity(joined.len());
    for (p, user) in &joined {
        let label = labels.get(user).expect("joined").dropout;
        let pl = match p.predicted_label {
            x if x == 0.0 => 0u8,
            x if x == 1.0 => 1u8,
            x => return Err(EvalError::InvalidLabel(x.to_string())),
        };
        scores.push(p.score);
        actual.push(label);
        predicted.push(pl);
    }

    let c = Confusion::tally(&actual, &predicted);
    let (tp, fn_, fp, tn) = (c.tp as f64, c.fn_ as f64, c.fp as f64, c.tn as f64);
    let n = joined.len();
    let classification = ClassificationMetrics {
        accuracy: Metric::value((tp + tn) / n as f64),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        auc: auc(&scores, &actual)?,
        cohens_kappa: cohens_kappa(&c)?,
        log_loss: log_loss(&scores, &actual),
    };
    Ok(MetricSet {
        classification,
        regression: RegressionMetrics::na(),
        n,
        missing_predictions: missing,
    })
}

/// Dropout-week regression metrics; the predicted week is read from
/// `predicted_label`.
pub fn regression_report(
    predictions: &[PredictionRow],
    labels: &LabelTable,
) -> Result<MetricSet, EvalError> {
    let (joined, missing) = join(predictions, labels)?;
    let n = joined.len() as f64;
    let pairs: Vec<(f64, f64)> = joined
        .iter()
        .map(|(p, u)| {
            (
                p.predicted_label,
                labels.get(u).expect("joined").dropout_week as f64,
            )
        })
        .collect();
    let sse: f64 = pairs.iter().map(|(p, y)| (p - y).powi(2)).sum();
    let sae: f64 = pairs.iter().map(|(p, y)| (p - y).abs()).sum();
    let mean = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sst: f64 = pairs.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    Ok(MetricSet {
        classification: ClassificationMetrics::na(),
        regression: RegressionMetrics {
            rmse: Metric::value((sse / n).sqrt()),
            mae: Metric::value(sae / n),
            r2: if sst == 0.0 {
                Metric::NA
            } else {
                Metric::value(1.0 - sse / sst)
            },
        },
        n: joined.len(),
        missing_predictions: missing,
    })
}
