use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Point, IDENTITY};
use crate::schedule::NoiseSchedule;
use crate::source::EpsilonSource;

/// A 2-D Gaussian mixture with closed-form diffused marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Point>,
    covs: Vec<Mat2>,
    // Cached per-component Cholesky factors for sampling.
    chols: Vec<Mat2>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Point>,
    pub covs: Vec<Mat2>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(spec.weights, spec.means, spec.covs)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(gm: GaussianMixture) -> Self {
        MixtureSpec { weights: gm.weights, means: gm.means, covs: gm.covs }
    }
}

impl Default for GaussianMixture {
    /// Two equal-weight modes at `(+-2, 0)` with covariance `0.25 I`.
    fn default() -> Self {
        let cov = linalg::scale(&IDENTITY, 0.25);
        Self::new(vec![0.5, 0.5], vec![[-2.0, 0.0], [2.0, 0.0]], vec![cov, cov]).expect("default mixture is valid")
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Point>, covs: Vec<Mat2>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture needs matching, non-empty weights/means/covs"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let mut chols = Vec::with_capacity(covs.len());
        for cov in &covs {
            if !linalg::is_symmetric(cov, 1e-12) {
                return Err(Error::invalid("mixture covariance is not symmetric"));
            }
            let (vals, _) = linalg::sym_eigen(cov);
            if vals[1] <= 0.0 {
                return Err(Error::invalid("mixture covariance is not positive definite"));
            }
            chols.push(linalg::cholesky(cov).ok_or_else(|| Error::invalid("cholesky failed"))?);
        }
        Ok(Self { weights, means, covs, chols })
    }

    pub fn isotropic_normal(mean: Point) -> Self {
        Self::new(vec![1.0], vec![mean], vec![IDENTITY]).expect("unit normal is valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    pub fn covs(&self) -> &[Mat2] {
        &self.covs
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Mixture mean `sum_i w_i m_i`.
    pub fn mean(&self) -> Point {
        let mut m = [0.0; 2];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m[0] += w * mu[0];
            m[1] += w * mu[1];
        }
        m
    }

    /// Raw second-moment matrix `E[x x^T] = sum_i w_i (S_i + m_i m_i^T)`.
    pub fn second_moment(&self) -> Mat2 {
        let mut out = [[0.0; 2]; 2];
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] += w * (s[i][j] + m[i] * m[j]);
                }
            }
        }
        out
    }

    /// Draws `n` i.i.d. points; the same seed always yields the same batch.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let lz = linalg::mat_vec(&self.chols[k], &z);
        [self.means[k][0] + lz[0], self.means[k][1] + lz[1]]
    }

    /// Law of `sqrt(ab) x_0 + sqrt(1 - ab) eps` for `x_0` drawn from `self`.
    pub fn diffused(&self, alpha_bar: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::invalid(format!("alpha_bar must be in (0, 1], got {alpha_bar}")));
        }
        let a = alpha_bar.sqrt();
        let means = self.means.iter().map(|m| [a * m[0], a * m[1]]).collect();
        let covs = self
            .covs
            .iter()
            .map(|s| linalg::add(&linalg::scale(s, alpha_bar), &linalg::scale(&IDENTITY, 1.0 - alpha_bar)))
            .collect();
        Self::new(self.weights.clone(), means, covs)
    }

    fn component_log_densities(&self, x: &Point) -> Vec<(f64, Mat2)> {
        self.means
            .iter()
            .zip(&self.covs)
            .zip(&self.weights)
            .map(|((m, s), w)| {
                let inv = linalg::inverse(s).expect("validated covariance is invertible");
                let d = [x[0] - m[0], x[1] - m[1]];
                let q = linalg::mat_vec(&inv, &d);
                let maha = d[0] * q[0] + d[1] * q[1];
                let logp = w.ln() - 0.5 * maha - 0.5 * linalg::det(s).ln() - (2.0 * std::f64::consts::PI).ln();
                (logp, inv)
            })
            .collect()
    }

    pub fn log_density(&self, x: &Point) -> f64 {
        let logs: Vec<f64> = self.component_log_densities(x).into_iter().map(|(l, _)| l).collect();
        log_sum_exp(&logs)
    }

    /// Posterior component responsibilities at `x`, computed in log space.
    pub fn responsibilities(&self, x: &Point) -> Vec<f64> {
        let logs: Vec<f64> = self.component_log_densities(x).into_iter().map(|(l, _)| l).collect();
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `grad_x log p(x)`.
    pub fn score(&self, x: &Point) -> Point {
        let comps = self.component_log_densities(x);
        let logs: Vec<f64> = comps.iter().map(|(l, _)| *l).collect();
        let lse = log_sum_exp(&logs);
        let mut g = [0.0; 2];
        for ((logp, inv), m) in comps.iter().zip(&self.means) {
            let r = (logp - lse).exp();
            let pull = linalg::mat_vec(inv, &[m[0] - x[0], m[1] - x[1]]);
            g[0] += r * pull[0];
            g[1] += r * pull[1];
        }
        g
    }

    /// Exact noise prediction `eps*(x, t) = -sqrt(1 - ab_t) grad log p_t(x)`.
    pub fn analytic_epsilon(&self, x: &Point, t: usize, schedule: &NoiseSchedule) -> Result<Point> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { t, what: "input point".into() });
        }
        let ab = schedule.alpha_bar(t)?;
        let score = self.diffused(ab)?.score(x);
        let s = (1.0 - ab).sqrt();
        Ok([-s * score[0], -s * score[1]])
    }

    /// Index of the nearest component mean.
    pub fn nearest_mode(&self, x: &Point) -> usize {
        let d2 = |m: &Point| (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
        let mut best = 0;
        for (i, m) in self.means.iter().enumerate().skip(1) {
            if d2(m) < d2(&self.means[best]) {
                best = i;
            }
        }
        best
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// The analytic oracle as an [`EpsilonSource`]. Diffused components are
/// precomputed for every timestep.
#[derive(Debug, Clone)]
pub struct AnalyticEpsilon {
    diffused: Vec<GaussianMixture>,
    noise_scale: Vec<f64>,
}

impl AnalyticEpsilon {
    pub fn new(mixture: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        let mut diffused = Vec::with_capacity(schedule.len());
        let mut noise_scale = Vec::with_capacity(schedule.len());
        for &ab in schedule.alpha_bars() {
            diffused.push(mixture.diffused(ab)?);
            noise_scale.push((1.0 - ab).sqrt());
        }
        Ok(Self { diffused, noise_scale })
    }
}

impl EpsilonSource for AnalyticEpsilon {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        let score = self.diffused[t - 1].score(x);
        let s = self.noise_scale[t - 1];
        [-s * score[0], -s * score[1]]
    }
}
