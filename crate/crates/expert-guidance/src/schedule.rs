//! Forward-noising schedule and the timestep grids the samplers walk.
//!
//! The schedule stores the cumulative signal fraction `alpha_bar[t]` over
//! integer timesteps `0..=t_max`, with `alpha_bar[0] = 1` (clean data).

use crate::error::{Error, Result};

/// Discrete variance-preserving noise schedule.
///
/// `alpha_bar` is strictly decreasing for `t >= 1`; `sqrt(alpha_bar[t])`
/// scales the signal and `sqrt(1 - alpha_bar[t])` the injected noise.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta construction: `beta_i` interpolates from `beta_start` to
    /// `beta_end` over `i = 1..=t_max`, and `alpha_bar[t] = prod (1 - beta_i)`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::parameter("t_max must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::parameter(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for i in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (i - 1) as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar[t]`; errors when `t > t_max`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::parameter(format!("timestep {t} out of range 0..={}", self.t_max())))
    }

    /// Signal scale `sqrt(alpha_bar[t])`.
    pub fn signal_scale(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// Noise scale `sqrt(1 - alpha_bar[t])`.
    pub fn noise_scale(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }
}

/// Strictly decreasing integer timesteps in `[1, t_max]`.
///
/// The grid lists the source timestep of each sampler transition; the final
/// transition always targets `t = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    /// `n_steps` timesteps evenly spaced over `[1, t_max]` (rounded),
    /// descending, with the first entry equal to `t_max`.
    pub fn even(schedule: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let t_max = schedule.t_max();
        if n_steps < 1 || n_steps > t_max {
            return Err(Error::parameter(format!(
                "n_steps must be in 1..={t_max}, got {n_steps}"
            )));
        }
        if n_steps == 1 {
            return Ok(TimestepGrid { steps: vec![t_max] });
        }
        let mut steps: Vec<usize> = (0..n_steps)
            .map(|k| {
                let x = 1.0 + (t_max - 1) as f64 * k as f64 / (n_steps - 1) as f64;
                x.round() as usize
            })
            .collect();
        steps.reverse();
        debug_assert!(steps.windows(2).all(|w| w[0] > w[1]));
        Ok(TimestepGrid { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Transition target for grid index `i`: the next grid entry, or 0 at the end.
    pub fn target(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }
}
