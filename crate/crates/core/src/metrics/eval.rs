//! Evaluation metrics over predicted and true ages in years.

use crate::error::{Error, Result};
use std::fmt;

fn check(pred: &[f64], target: &[f64], what: &str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Input(format!("{what}: length mismatch {} vs {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input(format!("{what}: empty input")));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, "mae")?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Percentage of samples whose absolute error is at most `l` years.
pub fn cs_at(pred: &[f64], target: &[f64], l: f64) -> Result<f64> {
    check(pred, target, "cs_at")?;
    if !(l >= 0.0) {
        return Err(Error::Input(format!("cs_at: negative bound {l}")));
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| (*p - *t).abs() <= l).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Percentage of matching labels.
pub fn gender_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Input("gender_accuracy: empty or mismatched input".into()));
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Ordered, non-overlapping inclusive year ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRanges(Vec<(f64, f64)>);

impl ClassRanges {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Input("no class ranges".into()));
        }
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo <= hi) {
                return Err(Error::Input(format!("class range {i} is inverted: {lo}-{hi}")));
            }
            if i > 0 && !(lo > ranges[i - 1].1) {
                return Err(Error::Input(format!("class range {i} overlaps or is out of order")));
            }
        }
        Ok(ClassRanges(ranges))
    }

    /// The eight Adience age groups.
    pub fn adience() -> Self {
        let r = [(0, 2), (4, 6), (8, 13), (15, 20), (25, 32), (38, 43), (48, 53), (60, 100)];
        ClassRanges(r.iter().map(|&(a, b)| (a as f64, b as f64)).collect())
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.0
    }
}

/// Index of the range holding `age`. Ages in a gap (or outside all ranges)
/// go to the range with the nearest boundary; ties go to the lower index.
pub fn age_to_class(age: f64, ranges: &ClassRanges) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, &(lo, hi)) in ranges.0.iter().enumerate() {
        let d = if age < lo {
            lo - age
        } else if age > hi {
            age - hi
        } else {
            0.0
        };
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// MAE within fixed-width bins of the true age, for error-by-age curves.
pub fn per_bin_mae(pred: &[f64], target: &[f64], bin_width: f64) -> Result<Vec<(f64, usize, f64)>> {
    check(pred, target, "per_bin_mae")?;
    let mut bins: std::collections::BTreeMap<i64, (usize, f64)> = Default::default();
    for (p, t) in pred.iter().zip(target) {
        let e = bins.entry((t / bin_width).floor() as i64).or_default();
        e.0 += 1;
        e.1 += (p - t).abs();
    }
    Ok(bins.into_iter().map(|(b, (n, s))| (b as f64 * bin_width, n, s / n as f64)).collect())
}

/// Age and gender metrics over one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub count: usize,
    pub mae: f64,
    /// CS@1 .. CS@10.
    pub cs: [f64; 10],
    pub gender_acc: Option<f64>,
    /// `(bin start, samples, mae)` per 10-year bin.
    pub per_bin: Vec<(f64, usize, f64)>,
}

impl MetricsReport {
    pub fn compute(pred_age: &[f64], true_age: &[f64], gender: Option<(&[usize], &[usize])>) -> Result<Self> {
        let mut cs = [0.0; 10];
        for (l, c) in cs.iter_mut().enumerate() {
            *c = cs_at(pred_age, true_age, (l + 1) as f64)?;
        }
        Ok(MetricsReport {
            count: pred_age.len(),
            mae: mae(pred_age, true_age)?,
            cs,
            gender_acc: gender.map(|(p, t)| gender_accuracy(p, t)).transpose()?,
            per_bin: per_bin_mae(pred_age, true_age, 10.0)?,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "count={}", self.count)?;
        writeln!(f, "mae={:.4}", self.mae)?;
        for (l, c) in self.cs.iter().enumerate() {
            writeln!(f, "cs@{}={:.2}", l + 1, c)?;
        }
        if let Some(acc) = self.gender_acc {
            writeln!(f, "gender_acc={acc:.2}")?;
        }
        for (start, n, m) in &self.per_bin {
            writeln!(f, "mae[{}-{}]={m:.4} (n={n})", start, start + 9.0)?;
        }
        Ok(())
    }
}
