//! Classification metrics, multi-run aggregation, feature embeddings with a
//! 3-D projection, cluster statistics and report writers.

mod cluster;
mod embed;
mod io;
mod plot;
mod umap;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_CLASSES;
use crate::dataset::StoneClass;
use crate::error::{Error, Result};

pub use cluster::{cluster_stats, silhouette, ClusterStats};
pub use embed::{extract_embeddings, EmbeddingInput, EmbeddingSet};
pub use io::{read_json, write_atomic, write_embeddings_csv, write_json};
pub use plot::{render_confusion_heatmap, render_scatter_3d, CLASS_COLORS};
pub use umap::{fit_ab, project_3d, UmapConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: StoneClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Single-run test metrics; precision, recall and F1 are macro averages over all six classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.confusion_matrix.iter().flatten().sum()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix and macro metrics for class-index predictions.
pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let mut cm = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES || l >= NUM_CLASSES {
            return Err(Error::Data(format!("class index out of range: prediction {p}, label {l}")));
        }
        cm[l][p] += 1;
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in StoneClass::ALL {
        let k = class.index();
        let tp = cm[k][k];
        let support: usize = cm[k].iter().sum();
        let predicted: usize = cm.iter().map(|row| row[k]).sum();
        if support == 0 {
            log::warn!("class {class} has no test samples; it scores 0 in the macro average");
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.push(ClassMetrics { class, precision, recall, f1, support });
    }
    let macro_avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let trace: usize = (0..NUM_CLASSES).map(|k| cm[k][k]).sum();
    Ok(MetricsReport {
        accuracy: ratio(trace, labels.len()),
        macro_precision: macro_avg(|c| c.precision),
        macro_recall: macro_avg(|c| c.recall),
        macro_f1: macro_avg(|c| c.f1),
        per_class,
        confusion_matrix: cm,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::Data("cannot aggregate zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Always `"population"`.
    pub std_kind: String,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Data("no run reports to aggregate".into()));
    }
    let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        accuracy: pick(|r| r.accuracy)?,
        precision: pick(|r| r.macro_precision)?,
        recall: pick(|r| r.macro_recall)?,
        f1: pick(|r| r.macro_f1)?,
        std_kind: "population".into(),
    })
}

/// Markdown table with one `mean ± std` row per model.
pub fn render_table(rows: &[(String, AggregateReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(5);
    let cell = |s: String| format!(" {s:<13} |");
    let mut out = format!("| {:<width$} |", "Model");
    for h in ["Accuracy", "Precision", "Recall", "F1-score"] {
        out.push_str(&cell(h.into()));
    }
    out.push_str(&format!("\n|{}|", "-".repeat(width + 2)));
    out.push_str(&"---------------|".repeat(4));
    out.push('\n');
    for (name, a) in rows {
        out.push_str(&format!("| {name:<width$} |"));
        for m in [a.accuracy, a.precision, a.recall, a.f1] {
            out.push_str(&cell(m.to_string()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_classifier() {
        let labels: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let m = compute_metrics(&labels, &labels).unwrap();
        assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
        for k in 0..6 {
            assert_eq!(m.confusion_matrix[k][k], 2);
        }
        assert_eq!(m.total(), 12);
    }

    #[test]
    fn two_class_hand_case() {
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[0].recall, 0.5);
        assert!((m.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[1].recall, 1.0);
        assert!((m.macro_precision - (1.0 + 2.0 / 3.0) / 6.0).abs() < 1e-15);
        assert_eq!(m.confusion_matrix[0], [1, 1, 0, 0, 0, 0]);
        assert_eq!(m.confusion_matrix[1], [0, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn length_and_range_errors() {
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[6], &[0]).is_err());
    }

    #[test]
    fn aggregate_hand_case() {
        let accs = [0.96, 0.97, 0.97, 0.96, 0.98];
        let reports: Vec<_> = accs
            .iter()
            .map(|&a| MetricsReport { accuracy: a, ..compute_metrics(&[0], &[0]).unwrap() })
            .collect();
        let agg = aggregate_runs(&reports).unwrap();
        assert!((agg.accuracy.mean - 0.968).abs() < 1e-12);
        assert!((agg.accuracy.std - 56e-6f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.accuracy.to_string(), "0.968 ± 0.007");
        assert_eq!(agg.precision.to_string(), "0.167 ± 0.000");
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let r = compute_metrics(&[0, 1], &[0, 1]).unwrap();
        let agg = aggregate_runs(&[r.clone(), r]).unwrap();
        let t = render_table(&[("MV concat".into(), agg)]);
        assert!(t.lines().nth(2).unwrap().contains("| 0.333 ± 0.000 |"), "{t}");
    }

    proptest! {
        #[test]
        fn relabeling_invariance(pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..60), perm in Just([3usize, 5, 0, 1, 4, 2])) {
            let (p, l): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = compute_metrics(&p, &l).unwrap();
            let pp: Vec<_> = p.iter().map(|&x| perm[x]).collect();
            let ll: Vec<_> = l.iter().map(|&x| perm[x]).collect();
            let b = compute_metrics(&pp, &ll).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
            for k in 0..6 {
                prop_assert_eq!(a.confusion_matrix[k].iter().sum::<usize>(), a.per_class[k].support);
            }
        }
    }
}
