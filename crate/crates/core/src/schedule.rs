//! Discrete variance-preserving noise schedules and the DDIM step plan.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `t = 0` denotes the
//! clean-data end of the chain with `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step variance increments `beta_t` and their running products
/// `alpha_bar_t = prod_{i<=t} (1 - beta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect::<Vec<f64>>();
        if alpha_bars.iter().any(|a| *a <= 0.0) {
            return Err(Error::InvalidSchedule("alpha_bar underflowed to zero".into()));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::InvalidTimestep { t, len: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Coefficients `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` of `x_0` and
    /// `eps` in the forward marginal `x_t = a x_0 + b eps`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Standard deviation of the DDIM noise term for the jump `t -> t_prev`.
    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        if t_prev >= t {
            return Err(Error::invalid(format!("t_prev ({t_prev}) must be < t ({t})")));
        }
        Ok(ddim_sigma_from_alpha_bars(self.alpha_bar(t)?, self.alpha_bar(t_prev)?, eta))
    }
}

/// `eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)`.
pub fn ddim_sigma_from_alpha_bars(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).max(0.0);
    let decay = (1.0 - alpha_bar_t / alpha_bar_prev).max(0.0);
    eta * ratio.sqrt() * decay.sqrt()
}

/// The decreasing sequence of timesteps a sampler visits, plus DDIM `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    timesteps: Vec<usize>,
    eta: f64,
}

impl StepPlan {
    pub fn new(timesteps: Vec<usize>, eta: f64) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::invalid("step plan has no timesteps"));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("step plan timesteps must be strictly decreasing"));
        }
        if timesteps[timesteps.len() - 1] < 1 {
            return Err(Error::invalid("step plan timesteps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(Self { timesteps, eta })
    }

    /// `steps` timesteps `floor(i * T / steps) + 1`, visited in decreasing order.
    pub fn evenly_spaced(schedule_len: usize, steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 || steps > schedule_len {
            return Err(Error::invalid(format!("sampling steps must be in 1..={schedule_len}, got {steps}")));
        }
        let timesteps = (0..steps).rev().map(|i| i * schedule_len / steps + 1).collect();
        Self::new(timesteps, eta)
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` jumps in sampling order; the last jump lands on `t_prev = 0`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps.iter().enumerate().map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }

    /// Checks that every timestep is valid for `schedule`.
    pub fn validate_for(&self, schedule: &NoiseSchedule) -> Result<()> {
        match self.timesteps.first() {
            Some(&t) if t > schedule.len() => Err(Error::InvalidTimestep { t, len: schedule.len() }),
            _ => Ok(()),
        }
    }
}
