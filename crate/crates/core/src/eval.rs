//! Fault diagnosis rates, confusion matrices and variable correlations.

use std::fmt::Write as _;

use crate::datapipe::SeriesSet;
use crate::{Error, Result};

/// `counts[t * classes + p]`: images of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    /// Adds the counts of `other`.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![0; classes * classes];
    for (&p, &t) in preds.iter().zip(labels) {
        for label in [p, t] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

/// `P / (P + B)` for class `class`, or `None` when the class has no images.
pub fn fdr(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let row = cm.row_sum(class);
    (row > 0).then(|| cm.get(class, class) as f64 / row as f64)
}

pub fn per_class_fdr(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes).map(|c| fdr(cm, c)).collect()
}

/// Unweighted mean of the defined per-class rates.
pub fn macro_fdr(rates: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = rates.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("no class has any images"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub fdr: Vec<Option<f64>>,
    pub macro_fdr: f64,
    pub metadata: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize, metadata: Vec<(String, String)>) -> Result<Self> {
        let confusion = confusion(preds, labels, classes)?;
        let fdr = per_class_fdr(&confusion);
        let warnings = fdr
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(c, _)| format!("class {} has no images; excluded from the macro FDR", c + 1))
            .collect();
        let macro_fdr = macro_fdr(&fdr)?;
        Ok(EvalReport {
            confusion,
            fdr,
            macro_fdr,
            metadata,
            warnings,
        })
    }

    /// Classes are printed 1-based, rates to 4 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::from("gfcnn-eval 1\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k} {v}");
        }
        let _ = writeln!(s, "images {}", self.confusion.total());
        if let Some(acc) = self.confusion.accuracy() {
            let _ = writeln!(s, "accuracy {acc:.4}");
        }
        let _ = writeln!(s, "macro-fdr {:.4}", self.macro_fdr);
        for (c, f) in self.fdr.iter().enumerate() {
            match f {
                Some(f) => {
                    let _ = writeln!(s, "fdr {} {f:.4}", c + 1);
                }
                None => {
                    let _ = writeln!(s, "fdr {} undefined", c + 1);
                }
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning {w}");
        }
        let _ = writeln!(s, "confusion {}", self.confusion.classes);
        for t in 0..self.confusion.classes {
            let row: Vec<String> = self.confusion.row(t).iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

/// Pearson correlations between all variables, pooled over every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    /// Constant variables; their off-diagonal coefficients are 0.
    pub constant: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Two-pass Pearson correlation. Constant variables get coefficient 0
/// with every other variable and 1 on the diagonal.
pub fn correlation_matrix(series: &SeriesSet) -> Result<CorrelationMatrix> {
    let n = series.variables();
    let m = series.total_samples();
    if m < 2 {
        return Err(Error::invalid("correlation needs at least 2 samples"));
    }
    let mut mean = vec![0.0; n];
    for row in series.rows() {
        for (acc, &x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);

    let mut cov = vec![0.0; n * n];
    let mut centered = vec![0.0; n];
    for row in series.rows() {
        for v in 0..n {
            centered[v] = row[v] - mean[v];
        }
        for i in 0..n {
            let ci = centered[i];
            for j in i..n {
                cov[i * n + j] += ci * centered[j];
            }
        }
    }
    let sd: Vec<f64> = (0..n).map(|i| cov[i * n + i].sqrt()).collect();
    let constant: Vec<usize> = (0..n).filter(|&i| !(sd[i] > 0.0)).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = if sd[i] > 0.0 && sd[j] > 0.0 {
                (cov[i * n + j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    Ok(CorrelationMatrix { n, values, constant })
}

/// Mean, minimum and maximum of a metric over repeated runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl RepeatSummary {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no runs to summarise"));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(RepeatSummary { values, mean, min, max })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Run;
    use crate::seed;
    use rand::RngExt;

    #[test]
    fn perfect_predictions_give_a_diagonal() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        assert_eq!(cm.get(2, 2), 2);
        assert_eq!(macro_fdr(&per_class_fdr(&cm)).unwrap(), 1.0);
    }

    #[test]
    fn empty_lists_give_zeros() {
        let cm = confusion(&[], &[], 4).unwrap();
        assert_eq!(cm.counts, vec![0; 16]);
        assert!(macro_fdr(&per_class_fdr(&cm)).is_err());
        assert_eq!(cm.accuracy(), None);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[0], &[5], 2).is_err());
    }

    #[test]
    fn fdr_examples() {
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![7, 3, 0, 0],
        };
        assert_eq!(fdr(&cm, 0), Some(0.7));
        assert_eq!(fdr(&cm, 1), None);
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![280, 0, 1, 1],
        };
        assert_eq!(fdr(&cm, 0), Some(1.0));
        assert_eq!(macro_fdr(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(macro_fdr(&[Some(1.0), None, Some(0.5)]).unwrap(), 0.75);
    }

    #[test]
    fn macro_over_reference_column() {
        let column = [
            0.9996, 0.9996, 0.7311, 0.9968, 0.9989, 0.9996, 1.0000, 0.9146, 0.2850, 0.8382, 0.9682, 0.7446, 0.9314,
            1.0000, 0.4114, 0.7596, 0.9607, 0.9504, 0.9932, 0.9197,
        ];
        let rates: Vec<Option<f64>> = column.iter().copied().map(Some).collect();
        assert!((macro_fdr(&rates).unwrap() - 0.87013).abs() < 1e-12);
    }

    #[test]
    fn fdr_ignores_how_errors_spread() {
        let a = ConfusionMatrix {
            classes: 3,
            counts: vec![5, 4, 1, 0, 1, 0, 0, 0, 1],
        };
        let b = ConfusionMatrix {
            classes: 3,
            counts: vec![5, 0, 5, 0, 1, 0, 0, 0, 1],
        };
        assert_eq!(fdr(&a, 0), fdr(&b, 0));
    }

    #[test]
    fn report_text_has_four_decimals_and_warnings() {
        let r = EvalReport::new(&[0, 0, 1], &[0, 0, 0], 3, vec![("model".into(), "m.gfm".into())]).unwrap();
        let text = r.to_text();
        assert!(text.contains("macro-fdr 0.6667"), "{text}");
        assert!(text.contains("fdr 2 undefined"), "{text}");
        assert!(text.contains("model m.gfm"));
        assert_eq!(r.warnings.len(), 2);
    }

    fn series(cols: &[Vec<f64>]) -> SeriesSet {
        let n = cols.len();
        let m = cols[0].len();
        let samples = (0..m).flat_map(|t| cols.iter().map(move |c| c[t])).collect();
        let run = Run {
            label: 1,
            run_id: "1".into(),
            samples,
            sampling_period: None,
        };
        SeriesSet::new((0..n).map(|i| format!("v{i}")).collect(), vec![run]).unwrap()
    }

    #[test]
    fn correlation_examples() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|x| 3.0 - 2.0 * x).collect();
        let flat = vec![4.0; 50];
        let c = correlation_matrix(&series(&[a.clone(), neg, flat])).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 1) + 1.0).abs() < 1e-12);
        assert_eq!(c.get(0, 2), 0.0);
        assert_eq!(c.constant, vec![2]);
        assert!(correlation_matrix(&series(&[vec![1.0]])).is_err());
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal() {
        let mut rng = seed::rng(3);
        let cols: Vec<Vec<f64>> = (0..6).map(|_| (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = correlation_matrix(&series(&cols)).unwrap();
        for i in 0..6 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..6 {
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-12);
                assert!(c.get(i, j).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn repeat_summary() {
        let s = RepeatSummary::new(vec![0.5, 0.9, 0.7]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.5, 0.9));
        assert!(RepeatSummary::new(vec![]).is_err());
    }
}
