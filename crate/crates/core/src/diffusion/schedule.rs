use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule with cumulative products.
///
/// `alpha_bar(0)` is 1 so that timestep 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl NoiseSchedule {
    pub fn new(params: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            timesteps: t,
            beta_start: b1,
            beta_end: bt,
        } = params;
        if t == 0 {
            return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
        }
        if !(b1 > 0.0 && b1 <= bt && bt < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {b1}, {bt}"
            )));
        }
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    b1
                } else {
                    b1 + (bt - b1) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            params,
            beta,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.params
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::TimestepOutOfRange(format!(
                "t = {t} exceeds T = {}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(t)?;
        if x0.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                actual: eps.len(),
            });
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }
}
