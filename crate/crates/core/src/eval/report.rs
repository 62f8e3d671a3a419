use serde::{Deserialize, Serialize};

use super::{EvalError, Metric, MetricSet, CLASSIFICATION_METRICS, REGRESSION_METRICS};
use crate::dsl::LabelType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub course_id: String,
    pub metrics: MetricSet,
}

/// Per-course metrics of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub job_id: String,
    pub label_type: LabelType,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn metric_names(&self) -> &'static [&'static str] {
        match self.label_type {
            LabelType::Dropout => &CLASSIFICATION_METRICS,
            LabelType::DropoutWeek => &REGRESSION_METRICS,
        }
    }

    pub fn row(&self, course_id: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.course_id == course_id)
    }

    pub fn value(&self, course_id: &str, metric: &str) -> Result<Option<Metric>, EvalError> {
        if !CLASSIFICATION_METRICS.contains(&metric) && !REGRESSION_METRICS.contains(&metric) {
            return Err(EvalError::UnknownMetric(metric.to_string()));
        }
        Ok(self.row(course_id).and_then(|r| r.metrics.get(metric)))
    }

    /// Long format: `course_id,metric,value`, plus `n` and
    /// `missing_predictions` per course.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("course_id,metric,value\n");
        for row in &self.rows {
            for name in self.metric_names() {
                let v = row.metrics.get(name).unwrap_or(Metric::NA);
                out.push_str(&format!("{},{},{}\n", row.course_id, name, v));
            }
            out.push_str(&format!("{},n,{}\n", row.course_id, row.metrics.n));
            out.push_str(&format!(
                "{},missing_predictions,{}\n",
                row.course_id, row.metrics.missing_predictions
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ClassificationMetrics, RegressionMetrics};

    fn report() -> MetricReport {
        let mut c = ClassificationMetrics::default();
        c.auc = Metric::value(0.75);
        c.f1 = Metric::NA;
        MetricReport {
            job_id: "j-0001".into(),
            label_type: LabelType::Dropout,
            rows: vec![MetricRow {
                course_id: "c1".into(),
                metrics: MetricSet {
                    classification: c,
                    regression: RegressionMetrics::default(),
                    n: 10,
                    missing_predictions: 2,
                },
            }],
        }
    }

    #[test]
    fn csv_is_long_format() {
        let csv = report().to_csv();
        assert!(csv.starts_with("course_id,metric,value\n"));
        assert!(csv.contains("c1,auc,0.75\n"));
        assert!(csv.contains("c1,f1,NA\n"));
        assert!(csv.contains("c1,missing_predictions,2\n"));
        assert_eq!(csv.lines().count(), 1 + 8 + 2);
    }

    #[test]
    fn json_round_trips() {
        let r = report();
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn value_lookup() {
        let r = report();
        assert_eq!(r.value("c1", "auc").unwrap(), Some(Metric::value(0.75)));
        assert_eq!(r.value("zz", "auc").unwrap(), None);
        assert!(r.value("c1", "bogus").is_err());
    }
}
