//! Evaluation metrics and the report they feed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::geometry::{depth_flip, Structure3D};
use crate::{Error, Result};

fn centered(x: &Matrix3xX<f64>) -> Matrix3xX<f64> {
    let mut c = x.clone();
    let mean = x.column_mean();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    c
}

fn mean_distance(x: &Matrix3xX<f64>, y: &Matrix3xX<f64>) -> f64 {
    let k = x.ncols() as f64;
    x.column_iter().zip(y.column_iter()).map(|(a, b)| (a - b).norm()).sum::<f64>() / k
}

/// Zero-centered MPJPE, best of `X` and its depth flip. Also reports
/// whether the flipped prediction won (ties go to the unflipped one).
pub fn mpjpe_with_flip(x: &Structure3D, y: &Structure3D) -> Result<(f64, bool)> {
    if x.k() != y.k() || x.k() == 0 {
        return Err(Error::Invalid(format!("mpjpe over {} vs {} points", x.k(), y.k())));
    }
    let yc = centered(&y.0);
    let plain = mean_distance(&centered(&x.0), &yc);
    let flipped = mean_distance(&centered(&depth_flip(x).0), &yc);
    Ok(if flipped < plain { (flipped, true) } else { (plain, false) })
}

pub fn mpjpe(x: &Structure3D, y: &Structure3D) -> Result<f64> {
    Ok(mpjpe_with_flip(x, y)?.0)
}

/// `Σ_{i<j} |‖X_i − X_j‖ − ‖Y_i − Y_j‖| / (K(K−1))`.
pub fn stress(x: &Structure3D, y: &Structure3D) -> Result<f64> {
    let k = x.k();
    if k != y.k() {
        return Err(Error::Invalid(format!("stress over {} vs {} points", k, y.k())));
    }
    if k < 2 {
        return Err(Error::Invalid(format!("stress needs at least 2 points, got {k}")));
    }
    let mut s = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let dx = (x.0.column(i) - x.0.column(j)).norm();
            let dy = (y.0.column(i) - y.0.column(j)).norm();
            s += (dx - dy).abs();
        }
    }
    Ok(s / (k * (k - 1)) as f64)
}

/// Largest absolute cosine between two distinct columns of `w`.
pub fn mutual_coherence(w: &DMatrix<f64>) -> Result<f64> {
    if w.ncols() < 2 {
        return Err(Error::Invalid(format!("coherence needs 2 columns, got {}", w.ncols())));
    }
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Invalid(format!("column {j} is zero")));
    }
    let mut best: f64 = 0.0;
    for i in 0..w.ncols() {
        for j in i + 1..w.ncols() {
            let c = w.column(i).dot(&w.column(j)).abs() / (norms[i] * norms[j]);
            best = best.max(c);
        }
    }
    Ok(best.min(1.0))
}

/// Running sums for one group of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSums {
    pub count: usize,
    pub mpjpe: f64,
    pub stress: f64,
    pub flips: usize,
}

impl MetricSums {
    pub fn push(&mut self, mpjpe: f64, stress: f64, flipped: bool) {
        self.count += 1;
        self.mpjpe += mpjpe;
        self.stress += stress;
        self.flips += usize::from(flipped);
    }

    pub fn merge(&mut self, o: &MetricSums) {
        self.count += o.count;
        self.mpjpe += o.mpjpe;
        self.stress += o.stress;
        self.flips += o.flips;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            v / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub samples: usize,
    pub mpjpe: f64,
    pub stress: f64,
    pub flip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mpjpe: f64,
    pub stress: f64,
    pub flip_fraction: f64,
    pub per_category: Vec<CategoryReport>,
}

impl EvalReport {
    /// Aggregate per-category sums (in category order).
    pub fn from_sums(per_category: &[(String, MetricSums)]) -> Self {
        let mut all = MetricSums::default();
        for (_, s) in per_category {
            all.merge(s);
        }
        EvalReport {
            samples: all.count,
            mpjpe: all.mean(all.mpjpe),
            stress: all.mean(all.stress),
            flip_fraction: all.mean(all.flips as f64),
            per_category: per_category
                .iter()
                .map(|(name, s)| CategoryReport {
                    name: name.clone(),
                    samples: s.count,
                    mpjpe: s.mean(s.mpjpe),
                    stress: s.mean(s.stress),
                    flip_fraction: s.mean(s.flips as f64),
                })
                .collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10} {:>10} {:>6}",
            "category", "samples", "mpjpe", "stress", "flip"
        );
        let row = |out: &mut String, name: &str, n: usize, m: f64, s: f64, f: f64| {
            let _ = writeln!(out, "{name:<16} {n:>8} {m:>10.5} {s:>10.5} {f:>6.3}");
        };
        for c in &self.per_category {
            row(&mut out, &c.name, c.samples, c.mpjpe, c.stress, c.flip_fraction);
        }
        row(&mut out, "all", self.samples, self.mpjpe, self.stress, self.flip_fraction);
        out
    }

    /// `key = value` lines, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples = {}", self.samples);
        let _ = writeln!(out, "mpjpe = {:.9}", self.mpjpe);
        let _ = writeln!(out, "stress = {:.9}", self.stress);
        let _ = writeln!(out, "flip_fraction = {:.9}", self.flip_fraction);
        for c in &self.per_category {
            let _ = writeln!(out, "{}.samples = {}", c.name, c.samples);
            let _ = writeln!(out, "{}.mpjpe = {:.9}", c.name, c.mpjpe);
            let _ = writeln!(out, "{}.stress = {:.9}", c.name, c.stress);
            let _ = writeln!(out, "{}.flip_fraction = {:.9}", c.name, c.flip_fraction);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mpjpe_examples() {
        let y = Structure3D::from_columns(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.0, 2.0, -0.4]]);
        assert_eq!(mpjpe(&y, &y).unwrap(), 0.0);
        assert_eq!(mpjpe(&depth_flip(&y), &y).unwrap(), 0.0);
        let x = Structure3D::from_columns(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let z = Structure3D::from_columns(&[[0.0; 3], [0.0; 3]]);
        assert_eq!(mpjpe(&x, &z).unwrap(), 1.0);
    }

    #[test]
    fn stress_examples() {
        let x = Structure3D::from_columns(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let y = Structure3D::from_columns(&[[0.0; 3], [0.0, 3.0, 0.0]]);
        assert_eq!(stress(&x, &y).unwrap(), 1.0);
        assert!(stress(&Structure3D::zeros(1), &Structure3D::zeros(1)).is_err());
    }

    #[test]
    fn coherence_examples() {
        assert_eq!(mutual_coherence(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        assert!((mutual_coherence(&w).unwrap() - 1.0).abs() < 1e-15);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((mutual_coherence(&w).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(mutual_coherence(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn report_aggregates() {
        let mut a = MetricSums::default();
        a.push(1.0, 0.5, true);
        a.push(3.0, 0.5, false);
        let mut b = MetricSums::default();
        b.push(2.0, 2.0, false);
        let r = EvalReport::from_sums(&[("a".into(), a), ("b".into(), b)]);
        assert_eq!(r.samples, 3);
        assert_eq!(r.mpjpe, 2.0);
        assert_eq!(r.stress, 1.0);
        assert!((r.flip_fraction - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_category[0].mpjpe, 2.0);
        assert!(r.to_key_value().contains("b.mpjpe = 2.000000000"));
        assert!(r.to_table().lines().count() == 4);
    }
}
