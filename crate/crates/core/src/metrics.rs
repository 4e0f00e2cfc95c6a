//! Confusion matrix and the derived accuracy, precision, recall and F1.
//!
//! The positive class is `Depressed` (label 1). Zero denominators yield 0:
//! precision when `tp + fp == 0`, recall when `tp + fn == 0`, F1 when
//! `precision + recall == 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn compute_confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Usage("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => cm.tp += 1,
            (0, 0) => cm.tn += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            _ => {
                return Err(Error::Usage(format!(
                    "binary classes expected, got prediction {p} / label {l}"
                )))
            }
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Usage("empty confusion matrix".into()));
    }
    let accuracy = ratio(cm.tp + cm.tn, cm.total());
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        confusion: *cm,
    })
}

impl MetricsReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        metrics_from_confusion(&compute_confusion(predictions, labels)?)
    }

    /// `{"accuracy":x,"precision":x,"recall":x,"f1":x,"confusion":{...}}` with
    /// six decimals.
    pub fn to_json(&self) -> String {
        let c = &self.confusion;
        format!(
            "{{\"accuracy\":{:.6},\"precision\":{:.6},\"recall\":{:.6},\"f1\":{:.6},\"confusion\":{{\"tp\":{},\"tn\":{},\"fp\":{},\"fn\":{}}}}}",
            self.accuracy, self.precision, self.recall, self.f1, c.tp, c.tn, c.fp, c.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    #[test]
    fn confusion_counts() {
        assert_eq!(
            compute_confusion(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(),
            cm(2, 2, 0, 0)
        );
        assert_eq!(
            compute_confusion(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(),
            cm(2, 0, 2, 0)
        );
        assert_eq!(compute_confusion(&[0; 7], &[1; 7]).unwrap(), cm(0, 0, 0, 7));
        assert!(compute_confusion(&[1], &[1, 0]).is_err());
        assert!(compute_confusion(&[], &[]).is_err());
        assert!(compute_confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn formula_values() {
        let r = metrics_from_confusion(&cm(50, 40, 10, 0)).unwrap();
        assert_eq!(r.accuracy, 0.9);
        assert!((r.precision - 50.0 / 60.0).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.909_090_909_090_909_1).abs() < 1e-12);

        let r = metrics_from_confusion(&cm(25, 25, 25, 25)).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (0.5, 0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn zero_division_conventions() {
        let r = metrics_from_confusion(&cm(0, 10, 0, 0)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = metrics_from_confusion(&cm(0, 0, 5, 5)).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert!(metrics_from_confusion(&cm(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn all_positive_predictor_on_balanced_set() {
        let r = MetricsReport::from_predictions(&[1; 10], &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!((r.accuracy, r.recall, r.precision), (0.5, 1.0, 0.5));
    }

    #[test]
    fn json_format() {
        let r = metrics_from_confusion(&cm(50, 40, 10, 0)).unwrap();
        assert_eq!(
            r.to_json(),
            r#"{"accuracy":0.900000,"precision":0.833333,"recall":1.000000,"f1":0.909091,"confusion":{"tp":50,"tn":40,"fp":10,"fn":0}}"#
        );
        let parsed: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed.confusion, r.confusion);
    }
}
