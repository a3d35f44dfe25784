//! Evaluation metrics: confusion matrices, micro-averaged F1 excluding the
//! majority class, and support-weighted macro-F1.

use serde::{Deserialize, Serialize};

/// Square confusion matrix; rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<usize>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold * self.classes + pred] += 1;
    }

    pub fn get(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold * self.classes + pred]
    }

    /// Gold-label count for a class (row sum).
    pub fn support(&self, class: usize) -> usize {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> usize {
        (0..self.classes).map(|g| self.get(g, class)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Merge counts from another matrix (sharded evaluation).
    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.classes)
            .map(|g| (0..self.classes).map(|p| self.get(g, p)).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Confusion {
        let classes = rows.len();
        let mut counts = Vec::with_capacity(classes * classes);
        for row in rows {
            assert_eq!(row.len(), classes);
            counts.extend_from_slice(row);
        }
        Confusion { classes, counts }
    }
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p_den = tp + fp;
    let r_den = tp + fn_;
    let precision = if p_den == 0 {
        0.0
    } else {
        tp as f64 / p_den as f64
    };
    let recall = if r_den == 0 {
        0.0
    } else {
        tp as f64 / r_den as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Micro-averaged F1 pooling TP/FP/FN over every class except the majority
/// class: gold-majority items never enter the TP/FN pools, and wrong
/// non-majority predictions (including those on gold-majority items) count
/// as FP.
pub fn micro_f1_excluding_majority(confusion: &Confusion, majority: usize) -> f64 {
    let q = confusion.classes();
    assert!(majority < q, "majority class {majority} out of range {q}");
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for gold in 0..q {
        for pred in 0..q {
            let n = confusion.get(gold, pred);
            if gold == pred {
                if gold != majority {
                    tp += n;
                }
                continue;
            }
            if pred != majority {
                fp += n;
            }
            if gold != majority {
                fn_ += n;
            }
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Support-weighted mean of per-class F1 scores.
pub fn weighted_macro_f1(confusion: &Confusion) -> f64 {
    let total = confusion.total();
    assert!(total > 0, "weighted_macro_f1: empty confusion matrix");
    let q = confusion.classes();
    let mut sum = 0.0;
    for c in 0..q {
        let support = confusion.support(c);
        if support == 0 {
            continue;
        }
        let tp = confusion.get(c, c);
        let fp = confusion.predicted(c) - tp;
        let fn_ = support - tp;
        sum += (support as f64 / total as f64) * f1_from_counts(tp, fp, fn_);
    }
    sum
}

/// Per-class precision/recall/F1 with support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Full evaluation output; both summary metrics are recomputable from the
/// embedded confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    pub micro_f1_excluding_majority: f64,
    pub weighted_macro_f1: f64,
    pub majority_class: String,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_confusion(
        confusion: &Confusion,
        class_names: &[String],
        majority: usize,
    ) -> EvalReport {
        let q = confusion.classes();
        assert_eq!(class_names.len(), q);
        let per_class = (0..q)
            .map(|c| {
                let tp = confusion.get(c, c);
                let support = confusion.support(c);
                let predicted = confusion.predicted(c);
                let precision = if predicted == 0 {
                    0.0
                } else {
                    tp as f64 / predicted as f64
                };
                let recall = if support == 0 {
                    0.0
                } else {
                    tp as f64 / support as f64
                };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassReport {
                    class: class_names[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        EvalReport {
            per_class,
            micro_f1_excluding_majority: micro_f1_excluding_majority(confusion, majority),
            weighted_macro_f1: weighted_macro_f1(confusion),
            majority_class: class_names[majority].clone(),
            confusion: confusion.rows(),
        }
    }
}

/// Which summary metric drives model selection for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpec {
    MicroF1ExcludingMajority,
    WeightedMacroF1,
}

impl MetricSpec {
    pub fn value(&self, report: &EvalReport) -> f64 {
        match self {
            MetricSpec::MicroF1ExcludingMajority => report.micro_f1_excluding_majority,
            MetricSpec::WeightedMacroF1 => report.weighted_macro_f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(q: usize) -> Vec<String> {
        (0..q).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn micro_perfect_predictions_are_one() {
        let mut cm = Confusion::new(3);
        cm.record(0, 0);
        cm.record(1, 1);
        cm.record(2, 2);
        assert_eq!(micro_f1_excluding_majority(&cm, 0), 1.0);
    }

    #[test]
    fn micro_hand_walkthrough() {
        // gold (c1,c1,c2,c0), pred (c1,c2,c2,c0), majority c0:
        // TP=2, FP=1, FN=1 -> F1 = 2*(2/3)*(2/3)/(4/3) = 2/3
        let mut cm = Confusion::new(3);
        cm.record(1, 1);
        cm.record(1, 2);
        cm.record(2, 2);
        cm.record(0, 0);
        let f1 = micro_f1_excluding_majority(&cm, 0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "got {f1}");
    }

    #[test]
    fn micro_all_majority_predictions_is_zero() {
        let mut cm = Confusion::new(2);
        cm.record(0, 0);
        cm.record(1, 0);
        cm.record(1, 0);
        assert_eq!(micro_f1_excluding_majority(&cm, 0), 0.0);
    }

    #[test]
    fn micro_counts_majority_gold_as_fp_when_mispredicted() {
        // one gold-majority item predicted as c1 hurts precision
        let mut cm = Confusion::new(2);
        cm.record(1, 1);
        cm.record(0, 1);
        let f1 = micro_f1_excluding_majority(&cm, 0);
        // TP=1, FP=1, FN=0 -> P=0.5, R=1 -> F1=2/3
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_perfect_predictions_are_one() {
        let mut cm = Confusion::new(2);
        for _ in 0..3 {
            cm.record(0, 0);
        }
        cm.record(1, 1);
        assert_eq!(weighted_macro_f1(&cm), 1.0);
    }

    #[test]
    fn weighted_hand_supports() {
        // supports (3, 1) with F1s (1.0, 0.0) -> 0.75; the class-1 item is
        // mispredicted into a zero-support class so class 0 stays perfect
        let mut cm = Confusion::new(3);
        for _ in 0..3 {
            cm.record(0, 0);
        }
        cm.record(1, 2);
        assert!((weighted_macro_f1(&cm) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn weighted_zero_support_class_contributes_nothing() {
        let mut cm = Confusion::new(3);
        cm.record(0, 0);
        cm.record(1, 1);
        // class 2 never appears
        assert_eq!(weighted_macro_f1(&cm), 1.0);
    }

    #[test]
    fn report_metrics_recomputable_from_embedded_confusion() {
        let mut cm = Confusion::new(3);
        cm.record(1, 1);
        cm.record(1, 2);
        cm.record(2, 2);
        cm.record(0, 0);
        cm.record(0, 2);
        let report = EvalReport::from_confusion(&cm, &names(3), 0);
        let rebuilt = Confusion::from_rows(&report.confusion);
        assert_eq!(
            micro_f1_excluding_majority(&rebuilt, 0),
            report.micro_f1_excluding_majority
        );
        assert_eq!(weighted_macro_f1(&rebuilt), report.weighted_macro_f1);
    }

    #[test]
    fn report_row_sums_equal_support() {
        let mut cm = Confusion::new(2);
        cm.record(0, 1);
        cm.record(0, 0);
        cm.record(1, 1);
        let report = EvalReport::from_confusion(&cm, &names(2), 0);
        for (c, row) in report.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), report.per_class[c].support);
        }
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = Confusion::new(2);
        a.record(0, 0);
        let mut b = Confusion::new(2);
        b.record(0, 0);
        b.record(1, 0);
        a.merge(&b);
        assert_eq!(a.get(0, 0), 2);
        assert_eq!(a.get(1, 0), 1);
    }
}
