//! Confusion matrix, accuracy, and per-class precision/recall/F1, plus
//! CSV and plain-text report emission. Zero-denominator metrics carry an
//! explicit undefined marker (`None`) instead of a fabricated zero.

use crate::signal::{FaultClass, SignalError, NUM_CLASSES};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and label arrays differ in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {index} out of range for {classes} classes")]
    BadIndex { index: usize, classes: usize },
    #[error("confusion matrix holds no samples")]
    EmptyMatrix,
    #[error("cannot merge a {left}-class matrix with a {right}-class one")]
    SizeMismatch { left: usize, right: usize },
    #[error("report io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report at {path} line {line}: {reason}")]
    MalformedReport {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    BadClass(#[from] SignalError),
}

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes > 0, "need at least one class");
        ConfusionMatrix {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, label: usize, pred: usize) -> Result<(), MetricsError> {
        for index in [label, pred] {
            if index >= self.classes {
                return Err(MetricsError::BadIndex {
                    index,
                    classes: self.classes,
                });
            }
        }
        self.counts[label * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    /// Elementwise sum; sharded accumulation merges back losslessly.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::SizeMismatch {
                left: self.classes,
                right: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &l) in preds.iter().zip(labels) {
        cm.add(l, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Precision, recall, and F1 for one class; `None` marks a 0/0 case.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: FaultClass,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<Vec<ClassMetrics>, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    (0..cm.classes())
        .map(|i| {
            let class = FaultClass::new(i)?;
            let tp = cm.get(i, i);
            let fp = cm.col_sum(i) - tp;
            let fneg = cm.row_sum(i) - tp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fneg);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => None,
            };
            Ok(ClassMetrics {
                class,
                precision,
                recall,
                f1,
            })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => String::new(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `confusion.csv`, `metrics.csv`, and `report.txt` under `dir`.
/// Rows follow ascending class id; four decimal places; undefined metrics
/// become empty cells.
pub fn emit_report(
    cm: &ConfusionMatrix,
    metrics: &[ClassMetrics],
    dir: &Path,
) -> Result<(), MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let k = cm.classes();
    let names: Vec<String> = (0..k).map(|i| format!("TYPE{i}")).collect();

    let mut confusion = String::from("true\\pred");
    for name in &names {
        write!(confusion, ",{name}").unwrap();
    }
    confusion.push('\n');
    for i in 0..k {
        write!(confusion, "{}", names[i]).unwrap();
        for j in 0..k {
            write!(confusion, ",{}", cm.get(i, j)).unwrap();
        }
        confusion.push('\n');
    }
    let path = dir.join("confusion.csv");
    fs::write(&path, confusion).map_err(io_err(&path))?;

    let mut table = String::from("class,precision,recall,f1\n");
    for m in metrics {
        writeln!(
            table,
            "{},{},{},{}",
            m.class,
            cell(m.precision),
            cell(m.recall),
            cell(m.f1)
        )
        .unwrap();
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, table).map_err(io_err(&path))?;

    let path = dir.join("report.txt");
    let mut out = fs::File::create(&path).map_err(io_err(&path))?;
    let acc = accuracy(cm).map(|a| format!("{a:.4}")).unwrap_or_default();
    writeln!(out, "Classification Evaluation Metrics").map_err(io_err(&path))?;
    writeln!(out, "samples: {}   accuracy: {acc}", cm.total()).map_err(io_err(&path))?;
    writeln!(out, "{:<8} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1")
        .map_err(io_err(&path))?;
    for m in metrics {
        writeln!(
            out,
            "{:<8} {:>9} {:>9} {:>9}",
            m.class.to_string(),
            cell(m.precision),
            cell(m.recall),
            cell(m.f1)
        )
        .map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads back a confusion CSV produced by `emit_report`; the round trip
/// through emit and parse preserves every count.
pub fn parse_confusion_csv(path: &Path) -> Result<ConfusionMatrix, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, reason: String| MetricsError::MalformedReport {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?;
    let k = header.split(',').count() - 1;
    if k == 0 {
        return Err(bad(1, "header names no classes".into()));
    }
    let mut cm = ConfusionMatrix::new(k);
    let mut rows = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let _name = fields.next();
        for (j, field) in fields.enumerate() {
            let count: u64 = field
                .trim()
                .parse()
                .map_err(|e| bad(idx + 1, format!("count {field:?}: {e}")))?;
            if rows >= k || j >= k {
                return Err(bad(idx + 1, "more rows or columns than the header".into()));
            }
            cm.counts[rows * k + j] = count;
        }
        rows += 1;
    }
    if rows != k {
        return Err(bad(0, format!("expected {k} data rows, found {rows}")));
    }
    Ok(cm)
}

/// Convenience for the common full-width case.
pub fn full_matrix() -> ConfusionMatrix {
    ConfusionMatrix::new(NUM_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_predictions_give_an_identity_pattern() {
        let cm = accumulate(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(i, j), u64::from(i == j));
            }
        }
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
    }

    #[test]
    fn single_error_lands_in_the_true_row_predicted_column() {
        let cm = accumulate(&[1], &[0], 3).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn accumulation_distributes_over_concatenation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let a: Vec<(usize, usize)> =
            (0..40).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();
        let b: Vec<(usize, usize)> =
            (0..25).map(|_| (rng.random_range(0..5), rng.random_range(0..5))).collect();
        let all: Vec<(usize, usize)> = a.iter().chain(&b).cloned().collect();
        let split =
            |pairs: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { pairs.iter().cloned().unzip() };
        let (pa, la) = split(&a);
        let (pb, lb) = split(&b);
        let (pc, lc) = split(&all);
        let mut merged = accumulate(&pa, &la, 5).unwrap();
        merged.merge(&accumulate(&pb, &lb, 5).unwrap()).unwrap();
        assert_eq!(merged, accumulate(&pc, &lc, 5).unwrap());
    }

    #[test]
    fn seventy_one_of_one_hundred_two_matches_the_published_accuracy() {
        // 17 classes x 6 test samples each; 71 and 77 diagonal hits.
        for (correct, expect) in [(71u64, 0.6961), (77u64, 0.7549)] {
            let mut cm = full_matrix();
            let mut placed = 0;
            for i in 0..17 {
                for _ in 0..6 {
                    if placed < correct {
                        cm.add(i, i).unwrap();
                        placed += 1;
                    } else {
                        cm.add(i, (i + 1) % 17).unwrap();
                    }
                }
            }
            assert_eq!(cm.total(), 102);
            let acc = accuracy(&cm).unwrap();
            assert!(
                (acc - expect).abs() < 5e-5,
                "accuracy {acc} vs published {expect}"
            );
        }
    }

    #[test]
    fn published_precision_recall_rows_reproduce_their_f1() {
        // Constructed two-class-plus-rest matrices realizing each
        // precision/recall pair, then F1 checked at 4 decimals.
        struct Row {
            tp: u64,
            fp: u64,
            fneg: u64,
            precision: f64,
            recall: f64,
            f1: f64,
        }
        // 6/7 precision with full recall; perfect precision with 4-of-6
        // recall; and 5-of-6 recall at full precision.
        let rows = [
            Row { tp: 6, fp: 1, fneg: 0, precision: 0.8571, recall: 1.0, f1: 0.9231 },
            Row { tp: 4, fp: 0, fneg: 2, precision: 1.0, recall: 0.6667, f1: 0.8 },
            Row { tp: 5, fp: 0, fneg: 1, precision: 1.0, recall: 0.8333, f1: 0.9091 },
        ];
        for row in rows {
            let mut cm = ConfusionMatrix::new(3);
            for _ in 0..row.tp {
                cm.add(0, 0).unwrap();
            }
            for _ in 0..row.fp {
                cm.add(1, 0).unwrap();
            }
            for _ in 0..row.fneg {
                cm.add(0, 2).unwrap();
            }
            cm.add(1, 1).unwrap();
            let m = &per_class_metrics(&cm).unwrap()[0];
            assert!((m.precision.unwrap() - row.precision).abs() < 5e-5);
            assert!((m.recall.unwrap() - row.recall).abs() < 5e-5);
            assert!((m.f1.unwrap() - row.f1).abs() < 5e-5);
        }
    }

    #[test]
    fn absent_class_yields_undefined_metrics_not_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 0).unwrap();
        cm.add(1, 1).unwrap();
        let m = &per_class_metrics(&cm).unwrap()[2];
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn f1_is_the_harmonic_mean_whenever_defined() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let preds: Vec<usize> = (0..60).map(|_| rng.random_range(0..7)).collect();
            let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..7)).collect();
            let cm = accumulate(&preds, &labels, 7).unwrap();
            for m in per_class_metrics(&cm).unwrap() {
                if let (Some(p), Some(r), Some(f1)) = (m.precision, m.recall, m.f1) {
                    if p + r > 0.0 {
                        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn micro_averaged_precision_and_recall_equal_accuracy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(78);
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..9)).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..9)).collect();
        let cm = accumulate(&preds, &labels, 9).unwrap();
        let acc = accuracy(&cm).unwrap();
        let tp: u64 = cm.trace();
        let fp: u64 = (0..9).map(|j| cm.col_sum(j) - cm.get(j, j)).sum();
        let fneg: u64 = (0..9).map(|i| cm.row_sum(i) - cm.get(i, i)).sum();
        let micro_p = tp as f64 / (tp + fp) as f64;
        let micro_r = tp as f64 / (tp + fneg) as f64;
        assert!((micro_p - acc).abs() < 1e-15);
        assert!((micro_r - acc).abs() < 1e-15);
    }

    #[test]
    fn trace_accuracy_equals_mean_per_sample_correctness() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(79);
        let preds: Vec<usize> = (0..150).map(|_| rng.random_range(0..4)).collect();
        let labels: Vec<usize> = (0..150).map(|_| rng.random_range(0..4)).collect();
        let direct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 150.0;
        let cm = accumulate(&preds, &labels, 4).unwrap();
        assert!((accuracy(&cm).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn permuting_class_order_permutes_rows_without_changing_values() {
        let preds = [0usize, 1, 2, 2, 0, 1, 1];
        let labels = [0usize, 1, 2, 0, 2, 1, 0];
        let cm = accumulate(&preds, &labels, 3).unwrap();
        let metrics = per_class_metrics(&cm).unwrap();
        // Relabel classes through the cycle 0->1->2->0.
        let perm = |v: usize| (v + 1) % 3;
        let p2: Vec<usize> = preds.iter().map(|&v| perm(v)).collect();
        let l2: Vec<usize> = labels.iter().map(|&v| perm(v)).collect();
        let cm2 = accumulate(&p2, &l2, 3).unwrap();
        let metrics2 = per_class_metrics(&cm2).unwrap();
        for i in 0..3 {
            assert_eq!(metrics[i].precision, metrics2[perm(i)].precision);
            assert_eq!(metrics[i].recall, metrics2[perm(i)].recall);
            assert_eq!(metrics[i].f1, metrics2[perm(i)].f1);
        }
        assert_eq!(accuracy(&cm).unwrap(), accuracy(&cm2).unwrap());
    }

    #[test]
    fn four_decimal_cells_round_half_up_patterns() {
        assert_eq!(cell(Some(0.9230769230769231)), "0.9231");
        assert_eq!(cell(Some(1.0)), "1.0000");
        assert_eq!(cell(None), "");
    }

    #[test]
    fn emitted_confusion_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let preds = [0usize, 1, 2, 1, 0];
        let labels = [0usize, 1, 1, 1, 2];
        let cm = accumulate(&preds, &labels, 3).unwrap();
        let metrics = per_class_metrics(&cm).unwrap();
        emit_report(&cm, &metrics, dir.path()).unwrap();
        let back = parse_confusion_csv(&dir.path().join("confusion.csv")).unwrap();
        assert_eq!(back, cm);
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with("class,precision,recall,f1\n"));
        assert!(text.contains("TYPE0,"));
    }

    #[test]
    fn undefined_metrics_render_as_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 0).unwrap();
        let metrics = per_class_metrics(&cm).unwrap();
        emit_report(&cm, &metrics, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let line = text.lines().find(|l| l.starts_with("TYPE2,")).unwrap();
        assert_eq!(line, "TYPE2,,,");
        assert!(!text.contains("0.0000\n0.0000"));
    }

    #[test]
    fn empty_matrix_is_rejected_for_accuracy_and_metrics() {
        let cm = ConfusionMatrix::new(4);
        assert!(matches!(accuracy(&cm), Err(MetricsError::EmptyMatrix)));
        assert!(matches!(
            per_class_metrics(&cm),
            Err(MetricsError::EmptyMatrix)
        ));
    }
}
