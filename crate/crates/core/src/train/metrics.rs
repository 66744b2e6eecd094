use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    /// Rows are true classes, columns predictions; empty when built from rows.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<MetricRow>,
    pub accuracy: f64,
    pub macro_avg: MetricRow,
    pub weighted_avg: MetricRow,
    pub total: usize,
}

impl MetricsReport {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let k = classes.len();
        if truth.len() != predicted.len() {
            return Err(invalid!("{} labels vs {} predictions", truth.len(), predicted.len()));
        }
        let mut m = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(invalid!("class index out of range for {k} classes"));
            }
            m[t][p] += 1;
        }
        Self::from_confusion(classes, m)
    }

    pub fn from_confusion(classes: &[String], confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = classes.len();
        if k == 0 || confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(invalid!("confusion matrix must be {k}x{k}"));
        }
        let total: usize = confusion.iter().flatten().sum();
        let per_class: Vec<MetricRow> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let (p, r) = (ratio(tp, predicted), ratio(tp, support));
                MetricRow {
                    precision: p,
                    recall: r,
                    f1: f1_score(p, r),
                    support,
                }
            })
            .collect();
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        let mut report = Self::aggregate(classes, per_class, ratio(trace, total));
        report.confusion = confusion;
        Ok(report)
    }

    /// Aggregates published per-class rows `(precision, recall, support)`;
    /// F1 is recomputed from P and R and accuracy is the weighted recall.
    pub fn from_rows(classes: &[String], rows: &[(f64, f64, usize)]) -> Result<Self> {
        if rows.len() != classes.len() || rows.is_empty() {
            return Err(invalid!("{} rows for {} classes", rows.len(), classes.len()));
        }
        let per_class: Vec<MetricRow> = rows
            .iter()
            .map(|&(p, r, support)| MetricRow {
                precision: p,
                recall: r,
                f1: f1_score(p, r),
                support,
            })
            .collect();
        let total: usize = rows.iter().map(|r| r.2).sum();
        let acc = rows.iter().map(|r| r.1 * r.2 as f64).sum::<f64>() / total.max(1) as f64;
        Ok(Self::aggregate(classes, per_class, acc))
    }

    fn aggregate(classes: &[String], per_class: Vec<MetricRow>, accuracy: f64) -> Self {
        let k = per_class.len() as f64;
        let total: usize = per_class.iter().map(|r| r.support).sum();
        let mean = |f: fn(&MetricRow) -> f64| per_class.iter().map(f).sum::<f64>() / k;
        let wmean = |f: fn(&MetricRow) -> f64| {
            per_class.iter().map(|r| f(r) * r.support as f64).sum::<f64>() / total.max(1) as f64
        };
        let macro_avg = MetricRow {
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            support: total,
        };
        let weighted_avg = MetricRow {
            precision: wmean(|r| r.precision),
            recall: wmean(|r| r.recall),
            f1: wmean(|r| r.f1),
            support: total,
        };
        MetricsReport {
            classes: classes.to_vec(),
            confusion: Vec::new(),
            per_class,
            accuracy,
            macro_avg,
            weighted_avg,
            total,
        }
    }

    /// Text table in the column order Class, Precision, Recall, F1-Score, Support.
    pub fn render_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.len())
            .chain([13])
            .max()
            .unwrap_or(13);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}", "Class", "Precision", "Recall", "F1-Score", "Support");
        let row = |s: &mut String, name: &str, r: &MetricRow| {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
                name,
                round2(r.precision),
                round2(r.recall),
                round2(r.f1),
                r.support
            );
        };
        for (name, r) in self.classes.iter().zip(&self.per_class) {
            row(&mut s, name, r);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
            "Accuracy",
            "",
            "",
            round2(self.accuracy),
            self.total
        );
        row(&mut s, "Macro Avg.", &self.macro_avg);
        row(&mut s, "Weighted Avg.", &self.weighted_avg);
        s
    }

    /// Confusion matrix with class-name headers; rows are true classes.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (name, row) in self.classes.iter().zip(&self.confusion) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Half-up rounding to two decimals for display. A tiny guard absorbs
/// binary representation error at exact halves such as 0.865.
pub fn round2(x: f64) -> String {
    format!("{:.2}", ((x * 100.0) + 0.5 + 1e-9).floor() / 100.0)
}
