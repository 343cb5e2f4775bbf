//! Compositional guidance and the DDIM sampler.

use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, FeatureSlot};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceWeights {
    pub w_f: f64,
    pub w_g: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self { w_f: 2.0, w_g: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 20,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.timesteps() {
            return Err(Error::InvalidConfig(format!(
                "num_steps must lie in 1..={}",
                schedule.timesteps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig("eta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Where a generated sample came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub client_id: usize,
    pub category: usize,
    pub centroid_index: usize,
    pub domain_clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub data: Vec<f64>,
    pub pseudo_label: usize,
    pub provenance: Provenance,
}

/// The three noise predictions that feed the guidance sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerms {
    pub category_only: Vec<f64>,
    pub with_centroid: Vec<f64>,
    pub with_domain: Option<Vec<f64>>,
}

impl GuidanceTerms {
    pub fn evaluate(
        denoiser: &Denoiser,
        x_t: &[f64],
        t: usize,
        category: usize,
        centroid: &[f64],
        domain: Option<&[f64]>,
    ) -> Result<Self> {
        Ok(Self {
            category_only: denoiser.predict_eps(x_t, t, category, FeatureSlot::Null)?,
            with_centroid: denoiser.predict_eps(
                x_t,
                t,
                category,
                FeatureSlot::Feature(centroid),
            )?,
            with_domain: domain
                .map(|g| denoiser.predict_eps(x_t, t, category, FeatureSlot::Feature(g)))
                .transpose()?,
        })
    }

    /// `eps_c + w_f (eps_z - eps_c) + w_g (eps_g - eps_c)`; the domain term
    /// is absent when no domain feature was supplied.
    pub fn combine(&self, w: GuidanceWeights) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .category_only
            .iter()
            .zip(&self.with_centroid)
            .map(|(c, z)| c + w.w_f * (z - c))
            .collect();
        if let Some(g) = &self.with_domain {
            for ((o, c), g) in out.iter_mut().zip(&self.category_only).zip(g) {
                *o += w.w_g * (g - c);
            }
        }
        out
    }
}

pub fn composed_eps(
    denoiser: &Denoiser,
    x_t: &[f64],
    t: usize,
    category: usize,
    centroid: &[f64],
    domain: Option<&[f64]>,
    w: GuidanceWeights,
) -> Result<Vec<f64>> {
    Ok(GuidanceTerms::evaluate(denoiser, x_t, t, category, centroid, domain)?.combine(w))
}

/// One DDIM update from `t` to `t_prev` using cumulative alphas. Fresh
/// noise is drawn only when `eta > 0`.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut Rng>,
) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::TimestepOutOfRange(format!(
            "need t_prev < t, got t = {t}, t_prev = {t_prev}"
        )));
    }
    schedule.check_timestep(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: x_t.len(),
            actual: eps_hat.len(),
        });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let radicand = 1.0 - ab_prev - sigma * sigma;
    // Rounding can push the t_prev = 0 case a hair below zero.
    let radicand = if radicand < 0.0 && radicand > -1e-12 {
        0.0
    } else {
        radicand
    };
    if radicand < 0.0 || radicand.is_nan() {
        return Err(Error::NegativeRadicand(radicand));
    }
    let dir = radicand.sqrt();
    let (sa_t, sb_t, sa_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    let noise = match (sigma > 0.0, rng) {
        (true, Some(rng)) => Some(rng::normal_vec(rng, x_t.len())),
        (true, None) => {
            return Err(Error::InvalidConfig(
                "eta > 0 requires a random stream".into(),
            ))
        }
        _ => None,
    };
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let x0 = (x - sb_t * e) / sa_t;
            let mut v = sa_prev * x0 + dir * e;
            if let Some(n) = &noise {
                v += sigma * n[i];
            }
            v
        })
        .collect())
}

/// `num_steps + 1` timesteps evenly spaced from `T` down to 0.
pub fn timestep_sequence(big_t: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..=num_steps)
        .map(|i| ((big_t * (num_steps - i)) as f64 / num_steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

/// What a single generation is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub category: usize,
    pub centroid: &'a [f64],
    pub domain: Option<&'a [f64]>,
}

/// Iterated guided DDIM from a standard normal start.
pub fn sample(
    denoiser: &Denoiser,
    cond: Conditioning<'_>,
    w: GuidanceWeights,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    cfg.validate(schedule)?;
    let mut x = rng::normal_vec(rng, denoiser.shape().data_dim);
    let ts = timestep_sequence(schedule.timesteps(), cfg.num_steps);
    for (step, pair) in ts.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = composed_eps(
            denoiser,
            &x,
            t,
            cond.category,
            cond.centroid,
            cond.domain,
            w,
        )?;
        x = ddim_step(&x, &eps, t, t_prev, schedule, cfg.eta, Some(&mut *rng))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDivergence(step));
        }
    }
    Ok(x)
}
