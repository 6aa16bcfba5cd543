//! DDIM reverse sampling with quantization-noise correction.
//!
//! Every step computes a noise estimate `eps'` from the model output and
//! applies
//!
//! ```text
//! x_prev = sqrt(ab_prev) (x_t - sqrt(1 - ab_t) eps') / sqrt(ab_t)
//!        + sqrt(1 - ab_prev - sigma^2) eps' + sigma z
//! ```
//!
//! The five [`Mode`]s differ only in how `eps'` and `sigma^2` are formed:
//!
//! | mode    | source     | `eps'`                               | `sigma^2`                      |
//! |---------|------------|--------------------------------------|--------------------------------|
//! | `fp`    | full prec. | `eps`                                | DDIM                           |
//! | `naive` | quantized  | `eps_hat`                            | DDIM                           |
//! | `dmc`   | quantized  | `eps_hat - mu_cond`                  | DDIM                           |
//! | `sd2`   | quantized  | `eps_hat - (mu_cond + sqrt(var_cond) w)` | DDIM                       |
//! | `dd2`   | quantized  | `eps_hat - mu_cond`                  | `max(DDIM - k^2 var_cond, 0)`  |
//!
//! where `k` is the net coefficient of `eps'` in the update.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Point, DIM};
use crate::noisemodel::{ConditionalParams, JointGaussianModel, JointRecord};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::source::EpsilonSource;

/// Slack allowed when checking `sigma^2 <= 1 - alpha_bar_prev`.
const RADICAND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fp,
    Naive,
    Dmc,
    Sd2,
    Dd2,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Fp, Mode::Naive, Mode::Dmc, Mode::Sd2, Mode::Dd2];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fp => "fp",
            Mode::Naive => "naive",
            Mode::Dmc => "dmc",
            Mode::Sd2 => "sd2",
            Mode::Dd2 => "dd2",
        }
    }

    pub fn needs_noise_model(self) -> bool {
        matches!(self, Mode::Dmc | Mode::Sd2 | Mode::Dd2)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}` (expected fp|naive|dmc|sd2|dd2)")))
    }
}

/// `k = sqrt(1 - ab_prev - sigma^2) - sqrt(ab_prev (1 - ab_t) / ab_t)`.
pub fn k_from_alpha_bars(alpha_bar_t: f64, alpha_bar_prev: f64, sigma_t2: f64) -> Result<f64> {
    let radicand = direction_radicand(alpha_bar_prev, sigma_t2)?;
    Ok(radicand.sqrt() - (alpha_bar_prev * (1.0 - alpha_bar_t) / alpha_bar_t).sqrt())
}

pub fn compute_k(schedule: &NoiseSchedule, t: usize, t_prev: usize, sigma_t2: f64) -> Result<f64> {
    k_from_alpha_bars(schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?, sigma_t2)
}

fn direction_radicand(alpha_bar_prev: f64, sigma_t2: f64) -> Result<f64> {
    if sigma_t2 < 0.0 {
        return Err(Error::invalid(format!("sigma_t^2 must be non-negative, got {sigma_t2}")));
    }
    let r = 1.0 - alpha_bar_prev - sigma_t2;
    if r < -RADICAND_TOLERANCE {
        return Err(Error::invalid(format!(
            "sigma_t^2 = {sigma_t2} exceeds 1 - alpha_bar_prev = {}",
            1.0 - alpha_bar_prev
        )));
    }
    Ok(r.max(0.0))
}

/// Deterministic part of the DDIM update.
pub fn ddim_mean(x_t: &Point, eps: &Point, sigma_t2: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<Point> {
    let dir = direction_radicand(alpha_bar_prev, sigma_t2)?.sqrt();
    let (a_t, a_prev) = (alpha_bar_t.sqrt(), alpha_bar_prev.sqrt());
    let s_t = (1.0 - alpha_bar_t).sqrt();
    let mut out = [0.0; DIM];
    for k in 0..DIM {
        out[k] = a_prev * (x_t[k] - s_t * eps[k]) / a_t + dir * eps[k];
    }
    Ok(out)
}

/// One DDIM update from `t` to `t_prev`. Draws fresh standard normal noise
/// only when `sigma_t2 > 0`.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &Point,
    eps: &Point,
    sigma_t2: f64,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    rng: &mut R,
) -> Result<Point> {
    if t_prev >= t {
        return Err(Error::invalid(format!("t_prev ({t_prev}) must be < t ({t})")));
    }
    let mut x = ddim_mean(x_t, eps, sigma_t2, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?)?;
    if sigma_t2 > 0.0 {
        let sigma = sigma_t2.sqrt();
        for v in &mut x {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(x)
}

/// Element-wise conditional noise laws for one prediction.
pub fn conditionals(record: &JointRecord, eps_hat: &Point) -> [ConditionalParams; DIM] {
    [record.conditional(eps_hat[0]), record.conditional(eps_hat[1])]
}

/// Stochastic correction: subtract one draw of the conditional noise.
pub fn correct_sd2<R: Rng + ?Sized>(eps_hat: &Point, cond: &[ConditionalParams; DIM], rng: &mut R) -> Point {
    let mut out = *eps_hat;
    for (v, c) in out.iter_mut().zip(cond) {
        let z: f64 = rng.sample(StandardNormal);
        *v -= c.mu_cond + c.var_cond.sqrt() * z;
    }
    out
}

/// Outcome of a deterministic correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd2Correction {
    pub eps: Point,
    pub sigma_t2_effective: f64,
    /// Variance actually removed from the stochastic term.
    pub absorbed: f64,
    pub clamped: bool,
}

/// Deterministic correction: subtract the conditional mean and absorb the
/// residual conditional variance into the sampler noise,
/// `sigma_eff^2 = max(sigma^2 - k^2 var_cond, 0)`.
pub fn correct_dd2(eps_hat: &Point, cond: &[ConditionalParams; DIM], k: f64, sigma_t2: f64) -> Dd2Correction {
    let mut eps = *eps_hat;
    for (v, c) in eps.iter_mut().zip(cond) {
        *v -= c.mu_cond;
    }
    let var_cond = cond.iter().map(|c| c.var_cond).sum::<f64>() / DIM as f64;
    let target = sigma_t2 - k * k * var_cond;
    let sigma_t2_effective = target.max(0.0);
    Dd2Correction { eps, sigma_t2_effective, absorbed: sigma_t2 - sigma_t2_effective, clamped: target < 0.0 }
}

/// Per-step magnitudes of the two quantization perturbation channels of the
/// reverse SDE: drift bias `g^2 |mu_delta| / sigma_t` and diffusion
/// inflation `g^2 sqrt(var_delta) sqrt(dt) / sigma_t`, with `g^2 = beta_t`,
/// `sigma_t = sqrt(1 - alpha_bar_t)` and `dt = (t - t_prev) / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub t: usize,
    pub drift_bias: f64,
    pub diffusion_inflation: f64,
}

pub fn perturbation_report(
    model: &JointGaussianModel,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
) -> Result<Vec<PerturbationRow>> {
    plan.transitions()
        .map(|(t, t_prev)| {
            let r = model.get(t)?;
            let g2 = schedule.beta(t)?;
            let sigma = (1.0 - schedule.alpha_bar(t)?).sqrt();
            let dt = (t - t_prev) as f64 / schedule.len() as f64;
            Ok(PerturbationRow {
                t,
                drift_bias: g2 * r.mu_delta.abs() / sigma,
                diffusion_inflation: g2 * r.var_delta.sqrt() * dt.sqrt() / sigma,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub plan: StepPlan,
    pub seed: u64,
    /// D-D2 variant that subtracts the unconditional mean `mu_delta` and
    /// absorbs `var_delta` instead of the conditional moments.
    #[serde(default)]
    pub dd2_unconditional_mean: bool,
}

/// Aggregated per-step diagnostics over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub k: f64,
    pub sigma_t2: f64,
    pub sigma_t2_eff: f64,
    /// Mean `|mu_cond|` over all corrected elements.
    pub mu_cond_mean: f64,
    pub var_cond: f64,
    pub drift_bias: f64,
    pub diff_inflation: f64,
    /// Trajectories whose effective variance was clamped at zero.
    pub clamped: usize,
}

pub fn write_diagnostics_csv<W: Write>(rows: &[StepDiagnostics], mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,k,sigma_t2,sigma_t2_eff,mu_cond_mean,var_cond,drift_bias,diff_inflation")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t, r.k, r.sigma_t2, r.sigma_t2_eff, r.mu_cond_mean, r.var_cond, r.drift_bias, r.diff_inflation
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub points: Vec<Point>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SampleOutput {
    pub fn clamp_events(&self) -> usize {
        self.diagnostics.iter().map(|d| d.clamped).sum()
    }
}

/// Independent random streams of one trajectory. Sampler noise and
/// correction noise never share a stream, so modes that skip a correction
/// draw still see the same sampler noise.
struct Trajectory {
    x: Point,
    diffusion: ChaCha8Rng,
    correction: ChaCha8Rng,
}

impl Trajectory {
    fn new(seed: u64, index: usize) -> Self {
        let mut diffusion = ChaCha8Rng::seed_from_u64(seed);
        diffusion.set_stream(2 * index as u64);
        let mut correction = ChaCha8Rng::seed_from_u64(seed);
        correction.set_stream(2 * index as u64 + 1);
        let x = [diffusion.sample(StandardNormal), diffusion.sample(StandardNormal)];
        Self { x, diffusion, correction }
    }
}

/// Reverse sampler over a full-precision and a quantized noise source.
pub struct Sampler<'a> {
    schedule: &'a NoiseSchedule,
    fp: &'a dyn EpsilonSource,
    quantized: &'a dyn EpsilonSource,
    noise_model: Option<&'a JointGaussianModel>,
    cfg: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        fp: &'a dyn EpsilonSource,
        quantized: &'a dyn EpsilonSource,
        noise_model: Option<&'a JointGaussianModel>,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.plan.validate_for(schedule)?;
        if cfg.mode.needs_noise_model() {
            let model =
                noise_model.ok_or_else(|| Error::invalid(format!("mode `{}` requires a noise model", cfg.mode)))?;
            model.covers(&cfg.plan)?;
        }
        Ok(Self { schedule, fp, quantized, noise_model, cfg })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn sample(&self, n: usize) -> Result<SampleOutput> {
        self.run(n, |_, _, _| Ok(()))
    }

    /// Runs the reverse loop, calling `visit(step, t, states)` with the batch
    /// state before each update.
    pub fn run<V>(&self, n: usize, mut visit: V) -> Result<SampleOutput>
    where
        V: FnMut(usize, usize, &[Point]) -> Result<()>,
    {
        if n == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let mode = self.cfg.mode;
        let source = if mode == Mode::Fp { self.fp } else { self.quantized };
        let eta = self.cfg.plan.eta();
        let perturbation = match self.noise_model {
            Some(m) if m.covers(&self.cfg.plan).is_ok() => Some(perturbation_report(m, self.schedule, &self.cfg.plan)?),
            _ => None,
        };

        let mut trajs: Vec<Trajectory> = (0..n).map(|i| Trajectory::new(self.cfg.seed, i)).collect();
        let mut states: Vec<Point> = Vec::with_capacity(n);
        let mut diagnostics = Vec::with_capacity(self.cfg.plan.len());

        for (step, (t, t_prev)) in self.cfg.plan.transitions().enumerate() {
            states.clear();
            states.extend(trajs.iter().map(|tr| tr.x));
            visit(step, t, &states)?;

            let sigma_t2 = self.schedule.ddim_sigma(t, t_prev, eta)?.powi(2);
            let k = compute_k(self.schedule, t, t_prev, sigma_t2)?;
            let record = match mode {
                Mode::Dmc | Mode::Sd2 | Mode::Dd2 => Some(self.noise_model.expect("checked at construction").get(t)?),
                _ => None,
            };
            let mut diag = StepDiagnostics {
                t,
                k,
                sigma_t2,
                sigma_t2_eff: sigma_t2,
                mu_cond_mean: 0.0,
                var_cond: 0.0,
                drift_bias: perturbation.as_ref().map_or(0.0, |p| p[step].drift_bias),
                diff_inflation: perturbation.as_ref().map_or(0.0, |p| p[step].diffusion_inflation),
                clamped: 0,
            };
            let mut mu_abs_sum = 0.0;

            for tr in trajs.iter_mut() {
                let eps_hat = source.epsilon(&tr.x, t);
                let mut sigma_eff = sigma_t2;
                let eps = match (mode, record) {
                    (Mode::Fp | Mode::Naive, _) => eps_hat,
                    (Mode::Dmc, Some(r)) => {
                        let cond = conditionals(r, &eps_hat);
                        mu_abs_sum += cond.iter().map(|c| c.mu_cond.abs()).sum::<f64>();
                        diag.var_cond = cond[0].var_cond;
                        [eps_hat[0] - cond[0].mu_cond, eps_hat[1] - cond[1].mu_cond]
                    }
                    (Mode::Sd2, Some(r)) => {
                        let cond = conditionals(r, &eps_hat);
                        mu_abs_sum += cond.iter().map(|c| c.mu_cond.abs()).sum::<f64>();
                        diag.var_cond = cond[0].var_cond;
                        correct_sd2(&eps_hat, &cond, &mut tr.correction)
                    }
                    (Mode::Dd2, Some(r)) => {
                        let cond = if self.cfg.dd2_unconditional_mean {
                            [ConditionalParams { mu_cond: r.mu_delta, var_cond: r.var_delta }; DIM]
                        } else {
                            conditionals(r, &eps_hat)
                        };
                        mu_abs_sum += cond.iter().map(|c| c.mu_cond.abs()).sum::<f64>();
                        diag.var_cond = cond[0].var_cond;
                        let c = correct_dd2(&eps_hat, &cond, k, sigma_t2);
                        if c.clamped {
                            diag.clamped += 1;
                        }
                        sigma_eff = c.sigma_t2_effective;
                        diag.sigma_t2_eff = sigma_eff;
                        c.eps
                    }
                    _ => unreachable!("corrected modes always carry a record"),
                };
                let next = ddim_step(&tr.x, &eps, sigma_eff, self.schedule, t, t_prev, &mut tr.diffusion)?;
                if !next.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { t, what: format!("sampler state at step {step}") });
                }
                tr.x = next;
            }
            if record.is_some() {
                diag.mu_cond_mean = mu_abs_sum / (n * DIM) as f64;
            }
            diagnostics.push(diag);
        }
        Ok(SampleOutput { points: trajs.into_iter().map(|tr| tr.x).collect(), diagnostics })
    }
}

/// Full-precision DDIM trajectories of `source`, visiting every state
/// before it is updated.
pub fn visit_trajectories<S, V>(
    source: &S,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
    n: usize,
    seed: u64,
    visit: V,
) -> Result<Vec<Point>>
where
    S: EpsilonSource + ?Sized,
    V: FnMut(usize, usize, &[Point]) -> Result<()>,
{
    let src = SourceRef(source);
    let cfg = SamplerConfig { mode: Mode::Fp, plan: plan.clone(), seed, dd2_unconditional_mean: false };
    let sampler = Sampler::new(schedule, &src, &src, None, cfg)?;
    Ok(sampler.run(n, visit)?.points)
}

/// Every `(x_t, t)` the trajectories of `source` pass through.
pub fn trajectory_inputs<S: EpsilonSource + ?Sized>(
    source: &S,
    schedule: &NoiseSchedule,
    plan: &StepPlan,
    n: usize,
    seed: u64,
) -> Result<Vec<(Point, usize)>> {
    let mut out = Vec::with_capacity(n * plan.len());
    visit_trajectories(source, schedule, plan, n, seed, |_, t, xs| {
        out.extend(xs.iter().map(|x| (*x, t)));
        Ok(())
    })?;
    Ok(out)
}

struct SourceRef<'a, S: ?Sized>(&'a S);

impl<S: EpsilonSource + ?Sized> EpsilonSource for SourceRef<'_, S> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        self.0.epsilon(x, t)
    }
}
