//! Two-sample distances for 2-D point sets and the per-mode metrics report.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Point};
use crate::toymodel::GaussianMixture;

/// Points used for the median-distance bandwidth heuristic, per set.
pub const BANDWIDTH_SUBSAMPLE: usize = 1000;

#[inline]
fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Sum of `f` over the full cross product.
fn cross_sum(a: &[Point], b: &[Point], f: impl Fn(&Point, &Point) -> f64) -> f64 {
    a.iter().map(|x| b.iter().map(|y| f(x, y)).sum::<f64>()).sum()
}

/// Sum of `f` over ordered pairs `i != j`, computed from the upper triangle.
fn within_sum(a: &[Point], f: impl Fn(&Point, &Point) -> f64) -> f64 {
    let mut s = 0.0;
    for (i, x) in a.iter().enumerate() {
        s += a[i + 1..].iter().map(|y| f(x, y)).sum::<f64>();
    }
    2.0 * s
}

/// Puts the pair in a fixed order so two-sample statistics are exactly
/// symmetric in floating point.
fn canonical<'a>(a: &'a [Point], b: &'a [Point]) -> (&'a [Point], &'a [Point]) {
    let key = |s: &[Point]| -> (usize, Vec<(u64, u64)>) {
        (s.len(), s.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect())
    };
    if a.len() != b.len() {
        return if a.len() < b.len() { (a, b) } else { (b, a) };
    }
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

fn require_two(a: &[Point], b: &[Point]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: a.len().min(b.len()) });
    }
    Ok(())
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` as a V-statistic (all
/// pairs, diagonal included). Non-negative, and exactly zero when both sets
/// hold the same points.
pub fn energy_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    require_two(a, b)?;
    if a == b {
        // Summation order would otherwise leave rounding residue.
        return Ok(0.0);
    }
    let (a, b) = canonical(a, b);
    let (m, n) = (a.len() as f64, b.len() as f64);
    let ab = cross_sum(a, b, dist) / (m * n);
    let aa = within_sum(a, dist) / (m * m);
    let bb = within_sum(b, dist) / (n * n);
    Ok(2.0 * ab - aa - bb)
}

/// Unbiased MMD^2 with kernel `exp(-|x-y|^2 / (2 h^2))`. Can be slightly
/// negative when the distributions agree.
pub fn mmd_rbf(a: &[Point], b: &[Point], bandwidth: f64) -> Result<f64> {
    require_two(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (a, b) = canonical(a, b);
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &Point, y: &Point| (-g * dist2(x, y)).exp();
    let (m, n) = (a.len() as f64, b.len() as f64);
    let aa = within_sum(a, k) / (m * (m - 1.0));
    let bb = within_sum(b, k) / (n * (n - 1.0));
    let ab = cross_sum(a, b, k) / (m * n);
    Ok(aa + bb - 2.0 * ab)
}

/// Median pairwise distance over the first [`BANDWIDTH_SUBSAMPLE`] points
/// of each set.
pub fn median_bandwidth(a: &[Point], b: &[Point]) -> Result<f64> {
    let (a, b) = canonical(a, b);
    let pool: Vec<Point> =
        a.iter().take(BANDWIDTH_SUBSAMPLE).chain(b.iter().take(BANDWIDTH_SUBSAMPLE)).copied().collect();
    let mut d: Vec<f64> = Vec::with_capacity(pool.len() * pool.len() / 2);
    for (i, x) in pool.iter().enumerate() {
        d.extend(pool[i + 1..].iter().map(|y| dist(x, y)));
    }
    if d.is_empty() {
        return Err(Error::InsufficientSamples { needed: 2, got: pool.len() });
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *median > 0.0 {
        Ok(*median)
    } else {
        Ok(1.0)
    }
}

pub fn mmd_rbf_median(a: &[Point], b: &[Point]) -> Result<f64> {
    mmd_rbf(a, b, median_bandwidth(a, b)?)
}

/// Sample mean and unbiased covariance.
pub fn moments(points: &[Point]) -> Result<(Point, Mat2)> {
    if points.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: points.len() });
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    for p in points {
        mean[0] += p[0] / n;
        mean[1] += p[1] / n;
    }
    let mut cov = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    Ok((mean, cov))
}

fn check_psd(m: &Mat2, which: &str) -> Result<()> {
    let scale = linalg::frobenius(m).max(1.0);
    if !linalg::is_symmetric(m, 1e-12 * scale) {
        return Err(Error::invalid(format!("{which} covariance is not symmetric")));
    }
    let (vals, _) = linalg::sym_eigen(m);
    if vals[1] < -1e-12 * scale {
        return Err(Error::invalid(format!("{which} covariance is not positive semi-definite")));
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between the Gaussians with the given
/// moments.
pub fn gaussian_w2(a: (&Point, &Mat2), b: (&Point, &Mat2)) -> Result<f64> {
    check_psd(a.1, "first")?;
    check_psd(b.1, "second")?;
    let dm = (a.0[0] - b.0[0]).powi(2) + (a.0[1] - b.0[1]).powi(2);
    let sb = linalg::sqrt_psd(b.1);
    let inner = linalg::mat_mul(&linalg::mat_mul(&sb, a.1), &sb);
    let cross = linalg::sqrt_psd(&linalg::scale(&linalg::add(&inner, &linalg::transpose(&inner)), 0.5));
    let tr = linalg::trace(a.1) + linalg::trace(b.1) - 2.0 * linalg::trace(&cross);
    Ok(dm + tr.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    /// Sample mean minus reference mean, per axis.
    pub mean_err: [f64; 2],
    /// Frobenius norm of the covariance difference.
    pub cov_err: f64,
    pub energy: f64,
    /// Unbiased estimate clamped at zero.
    pub mmd2: f64,
    pub w2_2: f64,
    /// Fraction of samples nearest to each mixture mean.
    pub occupancy: Vec<f64>,
}

/// Metrics per sampling mode, keyed by mode name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport {
    pub modes: BTreeMap<String, ModeMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn occupancy(points: &[Point], mixture: &GaussianMixture) -> Vec<f64> {
    let mut counts = vec![0usize; mixture.len()];
    for p in points {
        counts[mixture.nearest_mode(p)] += 1;
    }
    counts.iter().map(|&c| c as f64 / points.len().max(1) as f64).collect()
}

/// Compares `samples` against a `reference` batch.
pub fn compare(samples: &[Point], reference: &[Point], mixture: &GaussianMixture) -> Result<ModeMetrics> {
    let (ms, cs) = moments(samples)?;
    let (mr, cr) = moments(reference)?;
    Ok(ModeMetrics {
        mean_err: [ms[0] - mr[0], ms[1] - mr[1]],
        cov_err: linalg::frobenius(&linalg::add(&cs, &linalg::scale(&cr, -1.0))),
        energy: energy_distance(samples, reference)?.max(0.0),
        mmd2: mmd_rbf_median(samples, reference)?.max(0.0),
        w2_2: gaussian_w2((&ms, &cs), (&mr, &cr))?,
        occupancy: occupancy(samples, mixture),
    })
}

pub fn write_points_csv<W: Write>(points: &[Point], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x0,x1")?;
    for p in points {
        writeln!(w, "{},{}", p[0], p[1])?;
    }
    Ok(())
}

pub fn save_points(points: &[Point], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_points_csv(points, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_points_csv<R: BufRead>(r: R) -> Result<Vec<Point>> {
    let mut lines = r.lines();
    let header = lines.next().transpose().map_err(|e| Error::io("<input>", e))?;
    if header.as_deref().map(str::trim) != Some("x0,x1") {
        return Err(Error::Schema("samples CSV must start with header `x0,x1`".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Schema(format!("line {}: expected two numbers, got `{line}`", i + 2));
        let mut it = line.split(',');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        out.push([a, b]);
    }
    Ok(out)
}

pub fn load_points(path: &Path) -> Result<Vec<Point>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_points_csv(std::io::BufReader::new(f))
}
