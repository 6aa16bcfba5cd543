//! Time-step-aware modeling of quantization noise.
//!
//! At every sampler timestep the elements of the quantized prediction
//! `eps_hat` and of the noise `delta = eps_hat - eps` are pooled into one
//! scalar bivariate Gaussian. Given an observed `eps_hat` element, the noise
//! is then `N(mu_cond, var_cond)` with
//!
//! ```text
//! mu_cond  = cov / var_hat * (eps_hat - mu_hat) + mu_delta
//! var_cond = var_delta - cov^2 / var_hat
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::DIM;
use crate::sampler;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::source::EpsilonSource;

pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Fitted covariances are clipped to this fraction of the Cauchy-Schwarz bound.
pub const CORRELATION_CLIP: f64 = 0.999;
pub const MIN_REPORT_SAMPLES: usize = 100;
pub const SCHEMA_VERSION: u32 = 1;

/// Pooled `(eps_hat, delta)` element pairs observed at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub t: usize,
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSamples {
    pub fn eps_hat(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn delta(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|p| p.1)
    }
}

/// Which model drives the trajectories that pairs are collected along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CollectAlong {
    #[default]
    Fp,
    Quantized,
}

/// Runs `n_traj` deterministic-seeded trajectories and, at every step of the
/// plan, evaluates both models on the same `x_t`.
pub fn collect_pairs<F, Q>(
    fp_model: &F,
    q_model: &Q,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
    n_traj: usize,
    seed: u64,
    along: CollectAlong,
) -> Result<Vec<PairedSamples>>
where
    F: EpsilonSource + ?Sized,
    Q: EpsilonSource + ?Sized,
{
    if n_traj == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let mut out: Vec<PairedSamples> =
        plan.timesteps().iter().map(|&t| PairedSamples { t, pairs: Vec::with_capacity(n_traj * DIM) }).collect();
    let mut visit = |step: usize, t: usize, states: &[crate::linalg::Point]| -> Result<()> {
        let slot = &mut out[step];
        for x in states {
            let e = fp_model.epsilon(x, t);
            let eh = q_model.epsilon(x, t);
            for k in 0..DIM {
                let (a, d) = (eh[k], eh[k] - e[k]);
                if !(a.is_finite() && d.is_finite()) {
                    return Err(Error::NonFinite { t, what: "model output during pair collection".into() });
                }
                slot.pairs.push((a, d));
            }
        }
        Ok(())
    };
    match along {
        CollectAlong::Fp => sampler::visit_trajectories(fp_model, schedule, plan, n_traj, seed, &mut visit)?,
        CollectAlong::Quantized => sampler::visit_trajectories(q_model, schedule, plan, n_traj, seed, &mut visit)?,
    };
    Ok(out)
}

/// Shape statistics of one pooled sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov-Smirnov distance to `N(mean, variance)`.
    pub ks_statistic: f64,
    pub degenerate: bool,
}

pub fn shape_stats(values: &[f64]) -> Result<ShapeStats> {
    let n = values.len();
    if n < MIN_REPORT_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_REPORT_SAMPLES, got: n });
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if !(m2 > VARIANCE_FLOOR * (1.0 + mean * mean)) {
        return Ok(ShapeStats {
            n,
            mean,
            variance: m2,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            ks_statistic: 0.0,
            degenerate: true,
        });
    }
    let sd = m2.sqrt();
    let normal = Normal::new(mean, sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    Ok(ShapeStats {
        n,
        mean,
        variance: m2,
        skewness: m3 / (m2 * sd),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_statistic: ks,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityRow {
    pub t: usize,
    pub eps_hat: ShapeStats,
    pub delta: ShapeStats,
}

/// Per-timestep Gaussianity diagnostics for both `eps_hat` and `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub rows: Vec<GaussianityRow>,
}

pub fn gaussianity_row(samples: &PairedSamples) -> Result<GaussianityRow> {
    let eps_hat: Vec<f64> = samples.eps_hat().collect();
    let delta: Vec<f64> = samples.delta().collect();
    Ok(GaussianityRow { t: samples.t, eps_hat: shape_stats(&eps_hat)?, delta: shape_stats(&delta)? })
}

pub fn gaussianity_report(samples: &[PairedSamples]) -> Result<GaussianityReport> {
    Ok(GaussianityReport { rows: samples.iter().map(gaussianity_row).collect::<Result<_>>()? })
}

impl GaussianityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,n,eps_hat_skew,eps_hat_exkurt,eps_hat_ks,delta_skew,delta_exkurt,delta_ks,degenerate")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.delta.n,
                r.eps_hat.skewness,
                r.eps_hat.excess_kurtosis,
                r.eps_hat.ks_statistic,
                r.delta.skewness,
                r.delta.excess_kurtosis,
                r.delta.ks_statistic,
                r.eps_hat.degenerate || r.delta.degenerate
            )?;
        }
        Ok(())
    }
}

/// Unfloored, unclipped sample moments of a pair set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMoments {
    pub mu_hat: f64,
    pub mu_delta: f64,
    pub var_hat: f64,
    pub var_delta: f64,
    pub cov: f64,
    pub n: usize,
}

impl RawMoments {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let n = pairs.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        let nf = n as f64;
        let mu_hat = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
        let mu_delta = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
        let (mut vh, mut vd, mut c) = (0.0, 0.0, 0.0);
        for (a, d) in pairs {
            let (da, dd) = (a - mu_hat, d - mu_delta);
            vh += da * da;
            vd += dd * dd;
            c += da * dd;
        }
        let denom = nf - 1.0;
        Ok(Self { mu_hat, mu_delta, var_hat: vh / denom, var_delta: vd / denom, cov: c / denom, n })
    }

    pub fn correlation(&self) -> f64 {
        self.cov / (self.var_hat * self.var_delta).sqrt()
    }
}

/// Joint Gaussian over pooled `(eps_hat, delta)` elements at timestep `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub t: usize,
    pub mu_hat: f64,
    pub mu_delta: f64,
    pub var_hat: f64,
    pub var_delta: f64,
    pub cov: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalParams {
    pub mu_cond: f64,
    pub var_cond: f64,
}

impl JointRecord {
    /// Floors the variances and clips the covariance into the admissible set.
    pub fn regularized(mut self) -> Self {
        self.var_hat = self.var_hat.max(VARIANCE_FLOOR);
        self.var_delta = self.var_delta.max(VARIANCE_FLOOR);
        let bound = CORRELATION_CLIP * (self.var_hat * self.var_delta).sqrt();
        self.cov = self.cov.clamp(-bound, bound);
        self
    }

    /// `var_delta - cov^2 / var_hat`, clamped at zero. Independent of the
    /// observed value.
    pub fn conditional_variance(&self) -> f64 {
        (self.var_delta - self.cov * self.cov / self.var_hat).max(0.0)
    }

    pub fn conditional_mean(&self, eps_hat: f64) -> f64 {
        self.cov / self.var_hat * (eps_hat - self.mu_hat) + self.mu_delta
    }

    /// Law of the quantization noise given an observed `eps_hat` element.
    pub fn conditional(&self, eps_hat: f64) -> ConditionalParams {
        ConditionalParams { mu_cond: self.conditional_mean(eps_hat), var_cond: self.conditional_variance() }
    }

    fn check(&self) -> Result<()> {
        let vals = [self.mu_hat, self.mu_delta, self.var_hat, self.var_delta, self.cov];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("non-finite value in record for t = {}", self.t)));
        }
        if self.var_hat <= 0.0 || self.var_delta < 0.0 {
            return Err(Error::Schema(format!("invalid variance in record for t = {}", self.t)));
        }
        Ok(())
    }
}

/// Sample means, unbiased (co)variances, then floor and clip.
pub fn fit_joint(samples: &PairedSamples) -> Result<JointRecord> {
    let m = RawMoments::from_pairs(&samples.pairs)?;
    if !(m.mu_hat.is_finite() && m.var_hat.is_finite() && m.var_delta.is_finite() && m.cov.is_finite()) {
        return Err(Error::NonFinite { t: samples.t, what: "pair moments".into() });
    }
    Ok(JointRecord {
        t: samples.t,
        mu_hat: m.mu_hat,
        mu_delta: m.mu_delta,
        var_hat: m.var_hat,
        var_delta: m.var_delta,
        cov: m.cov,
        n: m.n,
    }
    .regularized())
}

/// Per-timestep joint models, keyed by timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointGaussianModel {
    records: BTreeMap<usize, JointRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    #[serde(rename = "T")]
    t_count: usize,
    records: Vec<JointRecord>,
}

impl JointGaussianModel {
    pub fn fit(samples: &[PairedSamples]) -> Result<Self> {
        samples.iter().map(fit_joint).collect::<Result<Vec<_>>>().map(Self::from_records)
    }

    pub fn from_records(records: impl IntoIterator<Item = JointRecord>) -> Self {
        Self { records: records.into_iter().map(|r| (r.t, r)).collect() }
    }

    pub fn get(&self, t: usize) -> Result<&JointRecord> {
        self.records.get(&t).ok_or(Error::MissingTimestep(t))
    }

    pub fn records(&self) -> impl Iterator<Item = &JointRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covers(&self, plan: &StepPlan) -> Result<()> {
        plan.timesteps().iter().try_for_each(|t| self.get(*t).map(|_| ()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            schema_version: SCHEMA_VERSION,
            t_count: self.records.len(),
            records: self.records.values().rev().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let mut records = BTreeMap::new();
        for r in file.records {
            r.check()?;
            if records.insert(r.t, r).is_some() {
                return Err(Error::Schema(format!("duplicate record for t = {}", r.t)));
            }
        }
        if records.len() != file.t_count {
            return Err(Error::Schema(format!(
                "file declares {} timesteps but holds {} records",
                file.t_count,
                records.len()
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{FnSource, Offset};
    use crate::toymodel::{AnalyticEpsilon, GaussianMixture};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn standard_normal_looks_gaussian() {
        let s = shape_stats(&normals(100_000, 1)).unwrap();
        assert!(s.skewness.abs() < 0.03, "{s:?}");
        assert!(s.excess_kurtosis.abs() < 0.06, "{s:?}");
        assert!(s.ks_statistic < 0.006, "{s:?}");
        assert!(!s.degenerate);
    }

    #[test]
    fn uniform_has_negative_excess_kurtosis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = shape_stats(&v).unwrap();
        // 9/5 - 3 = -1.2; sampling sd of the estimate is ~0.01.
        assert!((s.excess_kurtosis + 1.2).abs() < 0.03, "{s:?}");
    }

    #[test]
    fn constant_samples_are_flagged() {
        let s = shape_stats(&vec![0.3; 500]).unwrap();
        assert!(s.degenerate);
        assert!(shape_stats(&[1.0; 99]).is_err());
    }

    #[test]
    fn perfectly_correlated_pairs() {
        let v = normals(1000, 3);
        let pairs: Vec<_> = v.iter().map(|x| (*x, *x)).collect();
        let raw = RawMoments::from_pairs(&pairs).unwrap();
        assert_abs_diff_eq!(raw.cov, raw.var_hat, epsilon = 1e-12);
        assert_abs_diff_eq!(raw.cov, raw.var_delta, epsilon = 1e-12);
        assert_abs_diff_eq!(raw.correlation(), 1.0, epsilon = 1e-12);
        let fit = fit_joint(&PairedSamples { t: 1, pairs }).unwrap();
        assert_abs_diff_eq!(fit.cov, CORRELATION_CLIP * fit.var_hat, epsilon = 1e-12);
    }

    #[test]
    fn independent_pairs_have_small_covariance() {
        let a = normals(100_000, 4);
        let b = normals(100_000, 5);
        let pairs: Vec<_> = a.iter().zip(&b).map(|(x, y)| (*x, 0.1 + 0.2 * y)).collect();
        let fit = fit_joint(&PairedSamples { t: 1, pairs }).unwrap();
        assert!(fit.cov.abs() < 3.0 * (0.04f64 / 1e5).sqrt(), "{}", fit.cov);
    }

    #[test]
    fn constant_pairs_hit_floor() {
        let fit = fit_joint(&PairedSamples { t: 1, pairs: vec![(0.5, 0.1); 10] }).unwrap();
        assert_eq!(fit.var_hat, VARIANCE_FLOOR);
        assert_eq!(fit.var_delta, VARIANCE_FLOOR);
        assert_eq!(fit.cov, 0.0);
        assert!(fit_joint(&PairedSamples { t: 1, pairs: vec![(0.5, 0.1)] }).is_err());
    }

    #[test]
    fn conditional_hand_values() {
        let r = JointRecord { t: 1, mu_hat: 1.0, mu_delta: 0.1, var_hat: 4.0, var_delta: 1.0, cov: 1.0, n: 0 };
        let c = r.conditional(3.0);
        assert_abs_diff_eq!(c.mu_cond, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c.var_cond, 0.75, epsilon = 1e-15);

        let indep = JointRecord { cov: 0.0, ..r };
        let c = indep.conditional(-7.0);
        assert_eq!((c.mu_cond, c.var_cond), (0.1, 1.0));

        let tight = JointRecord { cov: 2.0, ..r };
        assert!(tight.conditional(0.0).var_cond.abs() < 1e-15);
    }

    #[test]
    fn collected_pairs_bookkeeping() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let plan = StepPlan::evenly_spaced(1000, 50, 1.0).unwrap();
        let fp = AnalyticEpsilon::new(&GaussianMixture::default(), &s).unwrap();

        let same = collect_pairs(&fp, &fp, &s, &plan, 64, 1, CollectAlong::Fp).unwrap();
        assert_eq!(same.len(), 50);
        for p in &same {
            assert_eq!(p.pairs.len(), 128);
            assert!(p.delta().all(|d| d == 0.0));
        }

        let shifted = Offset { inner: &fp, shift: [0.25, 0.25] };
        let pairs = collect_pairs(&fp, &shifted, &s, &plan, 8, 1, CollectAlong::Fp).unwrap();
        for p in &pairs {
            assert!(p.delta().all(|d| (d - 0.25).abs() < 1e-12));
        }
        // Same trajectories regardless of which side is evaluated.
        let along_q = collect_pairs(&fp, &fp, &s, &plan, 8, 1, CollectAlong::Quantized).unwrap();
        assert_eq!(along_q, collect_pairs(&fp, &fp, &s, &plan, 8, 1, CollectAlong::Fp).unwrap());
    }

    #[test]
    fn non_finite_outputs_abort() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let plan = StepPlan::evenly_spaced(100, 10, 0.0).unwrap();
        let fp = FnSource(|x: &crate::linalg::Point, _t| *x);
        let bad = FnSource(|x: &crate::linalg::Point, t| if t < 50 { [f64::NAN, 0.0] } else { *x });
        let err = collect_pairs(&fp, &bad, &s, &plan, 2, 0, CollectAlong::Fp).unwrap_err();
        assert!(matches!(err, Error::NonFinite { t, .. } if t < 50));
    }

    fn model(n: usize) -> JointGaussianModel {
        JointGaussianModel::from_records((1..=n).map(|t| JointRecord {
            t: t * 20 - 19,
            mu_hat: 0.01 * t as f64,
            mu_delta: -0.003 * t as f64,
            var_hat: 1.0 / 3.0 + t as f64,
            var_delta: 0.1,
            cov: 0.01,
            n: 128,
        }))
    }

    #[test]
    fn json_round_trip() {
        let m = model(50);
        let json = m.to_json().unwrap();
        assert_eq!(JointGaussianModel::from_json(&json).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["records"].as_array().unwrap().len(), 50);
        assert_eq!(v["T"], 50);
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn json_errors() {
        let json = model(5).to_json().unwrap();
        assert!(JointGaussianModel::from_json(&json[..json.len() / 2]).is_err());
        let bumped = json.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(JointGaussianModel::from_json(&bumped), Err(Error::Schema(_))));
        let short = json.replace("\"T\": 5", "\"T\": 6");
        assert!(matches!(JointGaussianModel::from_json(&short), Err(Error::Schema(_))));
    }

    #[test]
    fn coverage_check() {
        let m = model(50);
        assert!(m.covers(&StepPlan::evenly_spaced(1000, 50, 0.0).unwrap()).is_ok());
        assert!(matches!(m.covers(&StepPlan::evenly_spaced(1000, 30, 0.0).unwrap()), Err(Error::MissingTimestep(_))));
    }

    proptest! {
        #[test]
        fn conditioning_never_increases_variance(
            var_hat in 1e-3f64..10.0, var_delta in 1e-3f64..10.0, rho in -1.0f64..1.0, x in -5.0f64..5.0
        ) {
            let r = JointRecord { t: 1, mu_hat: 0.0, mu_delta: 0.0, var_hat, var_delta, cov: rho * (var_hat * var_delta).sqrt(), n: 0 }
                .regularized();
            let c = r.conditional(x);
            prop_assert!(c.var_cond <= r.var_delta);
            prop_assert!(c.var_cond >= 0.0);
            if r.cov == 0.0 {
                prop_assert_eq!(c.var_cond, r.var_delta);
            } else {
                prop_assert!(c.var_cond < r.var_delta);
            }
        }

        #[test]
        fn shift_equivariance(seed in 0u64..500, shift in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(f64, f64)> = (0..200).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.3))).collect();
            let moved: Vec<(f64, f64)> = pairs.iter().map(|(a, d)| (a + shift, *d)).collect();
            let a = fit_joint(&PairedSamples { t: 1, pairs }).unwrap();
            let b = fit_joint(&PairedSamples { t: 1, pairs: moved }).unwrap();
            prop_assert!((b.mu_hat - a.mu_hat - shift).abs() < 1e-12);
            prop_assert!((b.var_hat - a.var_hat).abs() < 1e-9);
            prop_assert!((b.cov - a.cov).abs() < 1e-9);
            prop_assert_eq!(a.var_delta, b.var_delta);
        }
    }
}
