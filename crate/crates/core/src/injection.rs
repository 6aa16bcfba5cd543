//! Synthetic quantization noise with known ground truth.
//!
//! Wraps a full-precision source and returns `eps_hat = eps + delta` with
//!
//! ```text
//! delta = mu_delta + a (eps - mean_eps) + b w,   a = rho sqrt(var_delta / var_eps),
//!                                              b = sqrt(var_delta (1 - rho^2))
//! ```
//!
//! per element, where `mean_eps`, `var_eps` are the pooled moments of `eps`
//! at `t` measured on pilot trajectories and `w` is standard normal. `w` is
//! a deterministic function of `(seed, t, x)`, so the wrapped source is a
//! fixed function just like a quantized network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Point, DIM};
use crate::noisemodel::{JointGaussianModel, JointRecord};
use crate::sampler::visit_trajectories;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::seed;
use crate::source::EpsilonSource;

/// A per-timestep value: a constant, or linear in `t` from `t = 1` to `t = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl Profile {
    pub fn at(&self, t: usize, schedule_len: usize) -> f64 {
        match *self {
            Profile::Constant(v) => v,
            Profile::Linear { start, end } => {
                let u = if schedule_len > 1 { (t as f64 - 1.0) / (schedule_len as f64 - 1.0) } else { 0.0 };
                start + (end - start) * u
            }
        }
    }

    fn values(&self) -> [f64; 2] {
        match *self {
            Profile::Constant(v) => [v, v],
            Profile::Linear { start, end } => [start, end],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub mu_delta: Profile,
    pub var_delta: Profile,
    #[serde(default = "zero_profile")]
    pub rho: Profile,
    /// Trajectories used to measure the pooled moments of `eps`.
    #[serde(default = "default_pilot")]
    pub pilot_trajectories: usize,
}

fn zero_profile() -> Profile {
    Profile::Constant(0.0)
}

fn default_pilot() -> usize {
    8192
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            mu_delta: Profile::Constant(0.1),
            var_delta: Profile::Constant(0.04),
            rho: zero_profile(),
            pilot_trajectories: default_pilot(),
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |p: &Profile| p.values().iter().all(|v| v.is_finite());
        if !(finite(&self.mu_delta) && finite(&self.var_delta) && finite(&self.rho)) {
            return Err(Error::invalid("injection parameters must be finite"));
        }
        if self.var_delta.values().iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("injection var_delta must be non-negative"));
        }
        if self.rho.values().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::invalid("injection rho must lie in [-1, 1]"));
        }
        if self.pilot_trajectories < 2 {
            return Err(Error::invalid("injection needs at least two pilot trajectories"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepParams {
    mean_eps: f64,
    mu_delta: f64,
    a: f64,
    b: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticInjection<S> {
    inner: S,
    seed: u64,
    params: BTreeMap<usize, StepParams>,
    exact: JointGaussianModel,
}

/// Builds the injected source for the timesteps of `plan`. Off-plan
/// timesteps use the parameters of the nearest plan timestep.
pub fn inject_synthetic_noise<S: EpsilonSource>(
    inner: S,
    cfg: &InjectionConfig,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
    seed: u64,
) -> Result<SyntheticInjection<S>> {
    cfg.validate()?;
    let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); plan.len()];
    visit_trajectories(
        &inner,
        schedule,
        plan,
        cfg.pilot_trajectories,
        seed::derive(seed, seed::tag::PILOT),
        |step, t, xs| {
            let s = &mut sums[step];
            for x in xs {
                for e in inner.epsilon(x, t) {
                    s.0 += e;
                    s.1 += e * e;
                    s.2 += 1;
                }
            }
            Ok(())
        },
    )?;

    let len = schedule.len();
    let mut params = BTreeMap::new();
    let mut records = Vec::with_capacity(plan.len());
    for (&t, &(s1, s2, n)) in plan.timesteps().iter().zip(&sums) {
        let nf = n as f64;
        let mean_eps = s1 / nf;
        let var_eps = ((s2 - nf * mean_eps * mean_eps) / (nf - 1.0)).max(0.0);
        let (mu_delta, var_delta, rho) = (cfg.mu_delta.at(t, len), cfg.var_delta.at(t, len), cfg.rho.at(t, len));
        let a = if rho == 0.0 || var_delta == 0.0 {
            0.0
        } else if var_eps > 0.0 {
            rho * (var_delta / var_eps).sqrt()
        } else {
            return Err(Error::invalid(format!(
                "rho = {rho} is infeasible at t = {t}: the source output has zero variance"
            )));
        };
        let b2 = var_delta * (1.0 - rho * rho);
        params.insert(t, StepParams { mean_eps, mu_delta, a, b: b2.sqrt() });
        records.push(JointRecord {
            t,
            mu_hat: mean_eps + mu_delta,
            mu_delta,
            var_hat: (1.0 + a).powi(2) * var_eps + b2,
            var_delta: a * a * var_eps + b2,
            cov: a * (1.0 + a) * var_eps + b2,
            n,
        });
    }
    Ok(SyntheticInjection { inner, seed, params, exact: JointGaussianModel::from_records(records) })
}

impl<S> SyntheticInjection<S> {
    /// Joint `(eps_hat, delta)` parameters implied by the construction.
    pub fn exact_model(&self) -> &JointGaussianModel {
        &self.exact
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    fn step_params(&self, t: usize) -> &StepParams {
        let above = self.params.range(t..).next();
        let below = self.params.range(..t).next_back();
        match (below, above) {
            (Some((tb, pb)), Some((ta, pa))) => {
                if t - tb < ta - t {
                    pb
                } else {
                    pa
                }
            }
            (Some((_, p)), None) | (None, Some((_, p))) => p,
            (None, None) => unreachable!("plans are never empty"),
        }
    }

    /// Standard normal pair keyed by `(seed, t, x)`.
    fn noise(&self, x: &Point, t: usize) -> Point {
        let h = seed::mix(seed::mix(seed::mix(self.seed ^ t as u64) ^ x[0].to_bits()) ^ x[1].to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        [rng.sample(StandardNormal), rng.sample(StandardNormal)]
    }
}

impl<S: EpsilonSource> EpsilonSource for SyntheticInjection<S> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        let e = self.inner.epsilon(x, t);
        let p = self.step_params(t);
        let w = if p.b > 0.0 { self.noise(x, t) } else { [0.0; DIM] };
        let mut out = [0.0; DIM];
        for k in 0..DIM {
            out[k] = e[k] + p.mu_delta + p.a * (e[k] - p.mean_eps) + p.b * w[k];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{AnalyticEpsilon, GaussianMixture};

    fn setup() -> (NoiseSchedule, StepPlan, AnalyticEpsilon) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let plan = StepPlan::evenly_spaced(1000, 20, 1.0).unwrap();
        let fp = AnalyticEpsilon::new(&GaussianMixture::default(), &s).unwrap();
        (s, plan, fp)
    }

    fn cfg(mu: f64, var: f64, rho: f64) -> InjectionConfig {
        InjectionConfig {
            mu_delta: Profile::Constant(mu),
            var_delta: Profile::Constant(var),
            rho: Profile::Constant(rho),
            pilot_trajectories: 256,
        }
    }

    #[test]
    fn pure_shift_is_exact() {
        let (s, plan, fp) = setup();
        let inj = inject_synthetic_noise(&fp, &cfg(0.3, 0.0, 0.0), &s, &plan, 1).unwrap();
        for &t in plan.timesteps() {
            let x = [0.7, -0.4];
            let e = fp.epsilon(&x, t);
            assert_eq!(inj.epsilon(&x, t), [e[0] + 0.3, e[1] + 0.3]);
        }
    }

    #[test]
    fn output_is_a_function_of_input() {
        let (s, plan, fp) = setup();
        let inj = inject_synthetic_noise(&fp, &cfg(0.1, 0.04, 0.5), &s, &plan, 1).unwrap();
        let x = [0.1, 0.2];
        assert_eq!(inj.epsilon(&x, 501), inj.epsilon(&x, 501));
        assert_ne!(inj.epsilon(&x, 501), inj.epsilon(&[0.1, 0.2000001], 501));
    }

    #[test]
    fn uncorrelated_injection() {
        let (s, plan, fp) = setup();
        let inj = inject_synthetic_noise(&fp, &cfg(0.1, 0.04, 0.0), &s, &plan, 3).unwrap();
        let t = plan.timesteps()[10];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let (mut se, mut sd, mut see, mut sdd, mut sed) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = [rng.sample::<f64, _>(StandardNormal) * 2.0, rng.sample::<f64, _>(StandardNormal)];
            let e = fp.epsilon(&x, t)[0];
            let d = inj.epsilon(&x, t)[0] - e;
            se += e;
            sd += d;
            see += e * e;
            sdd += d * d;
            sed += e * d;
        }
        let nf = n as f64;
        let cov = sed / nf - se * sd / nf / nf;
        let corr = cov / ((see / nf - (se / nf).powi(2)) * (sdd / nf - (sd / nf).powi(2))).sqrt();
        assert!(corr.abs() < 0.01, "{corr}");
    }

    #[test]
    fn exact_model_algebra() {
        let (s, plan, fp) = setup();
        let inj = inject_synthetic_noise(&fp, &cfg(0.1, 0.04, 0.3), &s, &plan, 3).unwrap();
        let m = inj.exact_model();
        m.covers(&plan).unwrap();
        for r in m.records() {
            assert!((r.var_delta - 0.04).abs() < 1e-12);
            // cov(delta, eps) = rho sqrt(var_delta var_eps) and eps_hat = eps + delta.
            let var_eps = r.var_hat - 2.0 * r.cov + r.var_delta;
            let cov_de = r.cov - r.var_delta;
            assert!((cov_de - 0.3 * (0.04 * var_eps).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let (s, plan, fp) = setup();
        assert!(inject_synthetic_noise(&fp, &cfg(0.0, 0.04, 1.5), &s, &plan, 0).is_err());
        assert!(inject_synthetic_noise(&fp, &cfg(0.0, -0.1, 0.0), &s, &plan, 0).is_err());
        let zero = crate::source::FnSource(|_: &Point, _| [0.0, 0.0]);
        assert!(inject_synthetic_noise(&zero, &cfg(0.0, 0.04, 0.5), &s, &plan, 0).is_err());
        assert!(inject_synthetic_noise(&zero, &cfg(0.0, 0.04, 0.0), &s, &plan, 0).is_ok());
    }

    #[test]
    fn linear_profile() {
        let p = Profile::Linear { start: 0.0, end: 1.0 };
        assert_eq!(p.at(1, 1000), 0.0);
        assert_eq!(p.at(1000, 1000), 1.0);
        let c: Profile = serde_json::from_str("0.5").unwrap();
        assert_eq!(c, Profile::Constant(0.5));
    }
}
