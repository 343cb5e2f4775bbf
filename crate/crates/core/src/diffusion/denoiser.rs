//! Small conditional noise predictor and its pretraining loop.
//!
//! The network is a fully connected SiLU MLP over the concatenation
//! `[x_t | time embedding | category embedding | feature slot]`. The feature
//! slot carries either an encoded feature or a learned null token.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::featurizer::Featurizer;
use crate::rng::{self, tag};
use crate::synthdata::LabeledSample;
use crate::wire::{f32_round, Tensor, TensorFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub feature_dim: usize,
    pub num_categories: usize,
    pub time_dim: usize,
    pub category_dim: usize,
    pub hidden: Vec<usize>,
}

impl DenoiserShape {
    fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.category_dim + self.feature_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.feature_dim == 0 || self.num_categories == 0 {
            return Err(Error::InvalidConfig(
                "denoiser dimensions must be positive".into(),
            ));
        }
        if !self.time_dim.is_multiple_of(2) || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "time_dim must be even and hidden sizes positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

/// What goes into the feature slot.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSlot<'a> {
    Feature(&'a [f64]),
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    shape: DenoiserShape,
    params: Vec<f64>,
    writes: u64,
}

struct Layout {
    category_table: usize,
    null_token: usize,
    layers: Vec<LayerSlot>,
    total: usize,
}

fn layout(shape: &DenoiserShape) -> Layout {
    let category_table = 0;
    let null_token = shape.num_categories * shape.category_dim;
    let mut off = null_token + shape.feature_dim;
    let layers = shape
        .layer_dims()
        .into_iter()
        .map(|(inputs, outputs)| {
            let slot = LayerSlot {
                inputs,
                outputs,
                weight: off,
                bias: off + inputs * outputs,
            };
            off = slot.bias + outputs;
            slot
        })
        .collect();
    Layout {
        category_table,
        null_token,
        layers,
        total: off,
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Per-layer activations kept for backprop.
struct Trace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl Denoiser {
    /// Hidden layers get a seeded uniform fan-in initialisation; the output
    /// layer starts at zero so a fresh model predicts zero noise.
    pub fn new(shape: DenoiserShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let lay = layout(&shape);
        let mut params = vec![0.0; lay.total];
        let mut rng = rng::stream(seed, &[tag("denoiser-init")]);
        for v in &mut params[lay.category_table..lay.null_token] {
            *v = f32_round(rng::normal(&mut rng));
        }
        for v in &mut params[lay.null_token..lay.null_token + shape.feature_dim] {
            *v = f32_round(rng::normal(&mut rng));
        }
        let hidden = lay.layers.len() - 1;
        for slot in &lay.layers[..hidden] {
            let bound = (6.0 / slot.inputs as f64).sqrt();
            for v in &mut params[slot.weight..slot.bias] {
                *v = f32_round(bound * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0));
            }
        }
        Ok(Self {
            shape,
            params,
            writes: 0,
        })
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Number of optimizer steps applied to this instance.
    pub fn write_count(&self) -> u64 {
        self.writes
    }

    fn assemble_input(
        &self,
        lay: &Layout,
        x_t: &[f64],
        t: usize,
        category: usize,
        slot: FeatureSlot<'_>,
    ) -> Result<Vec<f64>> {
        let s = &self.shape;
        if x_t.len() != s.data_dim {
            return Err(Error::DimensionMismatch {
                expected: s.data_dim,
                actual: x_t.len(),
            });
        }
        if category >= s.num_categories {
            return Err(Error::InvalidConfig(format!(
                "category {category} out of range for {} categories",
                s.num_categories
            )));
        }
        let mut input = Vec::with_capacity(s.input_dim());
        input.extend_from_slice(x_t);
        input.extend(time_embedding(t, s.time_dim));
        let c = lay.category_table + category * s.category_dim;
        input.extend_from_slice(&self.params[c..c + s.category_dim]);
        match slot {
            FeatureSlot::Feature(f) => {
                if f.len() != s.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: s.feature_dim,
                        actual: f.len(),
                    });
                }
                input.extend_from_slice(f);
            }
            FeatureSlot::Null => input
                .extend_from_slice(&self.params[lay.null_token..lay.null_token + s.feature_dim]),
        }
        Ok(input)
    }

    fn run(&self, lay: &Layout, input: Vec<f64>, mut trace: Option<&mut Trace>) -> Vec<f64> {
        let mut act = input;
        let last = lay.layers.len() - 1;
        for (i, slot) in lay.layers.iter().enumerate() {
            let w = &self.params[slot.weight..slot.bias];
            let b = &self.params[slot.bias..slot.bias + slot.outputs];
            let mut out: Vec<f64> = w
                .chunks_exact(slot.inputs)
                .zip(b)
                .map(|(row, bias)| bias + crate::linalg::dot(row, &act))
                .collect();
            if let Some(tr) = trace.as_deref_mut() {
                tr.inputs.push(act);
                if i < last {
                    tr.pre.push(out.clone());
                }
            }
            if i < last {
                out.iter_mut().for_each(|v| *v = silu(*v));
            }
            act = out;
        }
        act
    }

    /// Noise prediction for one state. `FeatureSlot::Null` is the
    /// category-only branch.
    pub fn predict_eps(
        &self,
        x_t: &[f64],
        t: usize,
        category: usize,
        slot: FeatureSlot<'_>,
    ) -> Result<Vec<f64>> {
        let lay = layout(&self.shape);
        let input = self.assemble_input(&lay, x_t, t, category, slot)?;
        Ok(self.run(&lay, input, None))
    }

    /// Squared-error loss (mean over coordinates) for one example, with its
    /// parameter gradient accumulated into `grad`.
    fn loss_and_grad(&self, lay: &Layout, ex: &TrainingExample, grad: &mut [f64]) -> Result<f64> {
        let slot = if ex.drop_feature {
            FeatureSlot::Null
        } else {
            FeatureSlot::Feature(&ex.feature)
        };
        let input = self.assemble_input(lay, &ex.x_t, ex.t, ex.category, slot)?;
        let mut trace = Trace {
            inputs: Vec::with_capacity(lay.layers.len()),
            pre: Vec::with_capacity(lay.layers.len()),
        };
        let out = self.run(lay, input, Some(&mut trace));
        let p = out.len() as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(&ex.eps)
            .map(|(o, e)| {
                let r = o - e;
                loss += r * r;
                2.0 * r / p
            })
            .collect();
        loss /= p;

        for (i, slot) in lay.layers.iter().enumerate().rev() {
            let inp = &trace.inputs[i];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let row = slot.weight + o * slot.inputs;
                crate::linalg::axpy(&mut grad[row..row + slot.inputs], dv, inp);
                grad[slot.bias + o] += dv;
            }
            let w = &self.params[slot.weight..slot.bias];
            let mut d_in = vec![0.0; slot.inputs];
            for (o, &dv) in delta.iter().enumerate() {
                crate::linalg::axpy(&mut d_in, dv, &w[o * slot.inputs..(o + 1) * slot.inputs]);
            }
            if i > 0 {
                for (d, &z) in d_in.iter_mut().zip(&trace.pre[i - 1]) {
                    *d *= silu_grad(z);
                }
            }
            delta = d_in;
        }

        // `delta` is now the gradient w.r.t. the assembled input.
        let s = &self.shape;
        let c_in = s.data_dim + s.time_dim;
        let c = lay.category_table + ex.category * s.category_dim;
        for k in 0..s.category_dim {
            grad[c + k] += delta[c_in + k];
        }
        if ex.drop_feature {
            let f_in = c_in + s.category_dim;
            for k in 0..s.feature_dim {
                grad[lay.null_token + k] += delta[f_in + k];
            }
        }
        Ok(loss)
    }

    fn round_params(&mut self) {
        self.params.iter_mut().for_each(|v| *v = f32_round(*v));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub drop_prob: f64,
    /// Noise the feature condition at timestep `round(fraction * T)`, the
    /// same mechanism clients apply before uploading. 0 disables it.
    pub condition_noise_fraction: f64,
    pub seed: u64,
    pub time_dim: usize,
    pub category_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 64,
            learning_rate: 2e-3,
            drop_prob: 0.2,
            condition_noise_fraction: 0.5,
            seed: 0,
            time_dim: 16,
            category_dim: 16,
            hidden: vec![256, 256],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "pretrain batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(
                "pretrain learning_rate must be finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_noise_fraction) {
            return Err(Error::InvalidConfig(
                "condition_noise_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

struct TrainingExample {
    x_t: Vec<f64>,
    eps: Vec<f64>,
    t: usize,
    category: usize,
    feature: Vec<f64>,
    drop_feature: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Gradient chunks summed in a fixed order so results do not depend on the
/// thread count.
const GRAD_CHUNKS: usize = 8;

/// Epsilon-prediction training on the pretraining set. The category is
/// always supplied; the feature slot gets the sample's own encoded feature,
/// replaced by the null token with probability `drop_prob`.
pub fn pretrain_denoiser(
    pretrain_set: &[LabeledSample],
    featurizer: &Featurizer,
    schedule: &NoiseSchedule,
    num_categories: usize,
    cfg: &PretrainConfig,
) -> Result<(Denoiser, PretrainReport)> {
    cfg.validate()?;
    let shape = DenoiserShape {
        data_dim: featurizer.data_dim(),
        feature_dim: featurizer.feature_dim(),
        num_categories,
        time_dim: cfg.time_dim,
        category_dim: cfg.category_dim,
        hidden: cfg.hidden.clone(),
    };
    let mut model = Denoiser::new(shape, cfg.seed)?;
    let mut report = PretrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 || pretrain_set.is_empty() {
        return Ok((model, report));
    }

    let features = pretrain_set
        .iter()
        .map(|s| featurizer.encode(&s.data))
        .collect::<Result<Vec<_>>>()?;
    let lay = layout(&model.shape);
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let big_t = schedule.timesteps();
    let cond_t = (cfg.condition_noise_fraction * big_t as f64).round() as usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[tag("pretrain-epoch"), epoch as u64]);
        let mut order: Vec<usize> = (0..pretrain_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let examples = batch
                .iter()
                .map(|&i| {
                    let t = rand::Rng::random_range(&mut rng, 1..=big_t);
                    let eps = rng::normal_vec(&mut rng, model.shape.data_dim);
                    let drop_feature = rand::Rng::random::<f64>(&mut rng) < cfg.drop_prob;
                    let x_t = schedule.forward_diffuse(&pretrain_set[i].data, t, &eps)?;
                    let feature = if cond_t > 0 {
                        let noise = rng::normal_vec(&mut rng, features[i].len());
                        schedule.forward_diffuse(&features[i], cond_t, &noise)?
                    } else {
                        features[i].clone()
                    };
                    Ok(TrainingExample {
                        x_t,
                        eps,
                        t,
                        category: pretrain_set[i].label,
                        feature,
                        drop_feature,
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            let chunk = examples.len().div_ceil(GRAD_CHUNKS).max(1);
            let partials = examples
                .par_chunks(chunk)
                .map(|part| {
                    let mut g = vec![0.0; model.params.len()];
                    let mut l = 0.0;
                    for ex in part {
                        l += model.loss_and_grad(&lay, ex, &mut g)?;
                    }
                    Ok((l, g))
                })
                .collect::<Result<Vec<_>>>()?;

            let n = examples.len() as f64;
            let mut grad = vec![0.0; model.params.len()];
            let mut batch_loss = 0.0;
            for (l, g) in partials {
                batch_loss += l;
                crate::linalg::axpy(&mut grad, 1.0 / n, &g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining(step));
            }
            epoch_loss += batch_loss;
            adam.update(&mut model.params, &grad);
            model.writes += 1;
            step += 1;
        }
        report
            .epoch_losses
            .push(epoch_loss / pretrain_set.len() as f64);
    }
    model.round_params();
    Ok((model, report))
}

const CHECKPOINT_MAGIC: [u8; 8] = *b"FDDENOIS";
const CHECKPOINT_VERSION: u16 = 1;

/// Denoiser plus the schedule and training metadata it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub epoch_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn to_file(&self) -> TensorFile {
        let shape = &self.denoiser.shape;
        let mut f = TensorFile::new(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            serde_json::json!({
                "T": self.schedule.timesteps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
                "shape": shape,
                "layer_shapes": shape.layer_dims().iter().map(|(i, o)| [*o, *i]).collect::<Vec<_>>(),
                "drop_prob": self.pretrain.drop_prob,
                "training_seed": self.pretrain.seed,
                "pretrain": self.pretrain,
                "epoch_losses": self.epoch_losses,
            }),
        );
        let lay = layout(shape);
        let p = &self.denoiser.params;
        f.insert(
            "category_table",
            Tensor::matrix(
                shape.num_categories,
                shape.category_dim,
                p[lay.category_table..lay.null_token].to_vec(),
            ),
        );
        f.insert(
            "null_token",
            Tensor::vector(p[lay.null_token..lay.null_token + shape.feature_dim].to_vec()),
        );
        for (i, slot) in lay.layers.iter().enumerate() {
            f.insert(
                format!("layer{i}/weight"),
                Tensor::matrix(
                    slot.outputs,
                    slot.inputs,
                    p[slot.weight..slot.bias].to_vec(),
                ),
            );
            f.insert(
                format!("layer{i}/bias"),
                Tensor::vector(p[slot.bias..slot.bias + slot.outputs].to_vec()),
            );
        }
        f
    }

    pub fn from_file(mut f: TensorFile) -> Result<Self> {
        let shape: DenoiserShape = serde_json::from_value(f.header["shape"].clone())?;
        shape.validate()?;
        let schedule = ScheduleConfig {
            timesteps: serde_json::from_value(f.header["T"].clone())?,
            beta_start: serde_json::from_value(f.header["beta_start"].clone())?,
            beta_end: serde_json::from_value(f.header["beta_end"].clone())?,
        };
        let pretrain: PretrainConfig = serde_json::from_value(f.header["pretrain"].clone())?;
        let epoch_losses: Vec<f64> = serde_json::from_value(f.header["epoch_losses"].clone())?;
        let lay = layout(&shape);
        let mut params = vec![0.0; lay.total];
        let mut fill = |off: usize, t: Tensor| -> Result<()> {
            let end = off + t.data.len();
            if end > params.len() {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: "tensor exceeds parameter layout".into(),
                });
            }
            params[off..end].copy_from_slice(&t.data);
            Ok(())
        };
        fill(lay.category_table, f.take("category_table")?)?;
        fill(lay.null_token, f.take("null_token")?)?;
        for (i, slot) in lay.layers.iter().enumerate() {
            let w = f.take(&format!("layer{i}/weight"))?;
            if w.shape != [slot.outputs, slot.inputs] {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!("layer {i} weight shape {:?}", w.shape),
                });
            }
            fill(slot.weight, w)?;
            fill(slot.bias, f.take(&format!("layer{i}/bias"))?)?;
        }
        Ok(Self {
            denoiser: Denoiser {
                shape,
                params,
                writes: 0,
            },
            schedule,
            pretrain,
            epoch_losses,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_file().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_file(TensorFile::read(
            path,
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> DenoiserShape {
        DenoiserShape {
            data_dim: 3,
            feature_dim: 2,
            num_categories: 2,
            time_dim: 4,
            category_dim: 2,
            hidden: vec![5],
        }
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let d = Denoiser::new(tiny_shape(), 1).unwrap();
        let out = d
            .predict_eps(&[0.3, -1.0, 2.0], 17, 1, FeatureSlot::Feature(&[1.0, 2.0]))
            .unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn predict_rejects_bad_shapes() {
        let d = Denoiser::new(tiny_shape(), 1).unwrap();
        assert!(d.predict_eps(&[0.0; 2], 1, 0, FeatureSlot::Null).is_err());
        assert!(d.predict_eps(&[0.0; 3], 1, 2, FeatureSlot::Null).is_err());
        assert!(d
            .predict_eps(&[0.0; 3], 1, 0, FeatureSlot::Feature(&[1.0]))
            .is_err());
    }

    /// Backprop against central differences, including the category table
    /// and null token entries.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut d = Denoiser::new(tiny_shape(), 5).unwrap();
        let mut rng = rng::stream(11, &[]);
        // Non-zero output layer so every path carries gradient.
        let lay = layout(&d.shape);
        let out = lay.layers.last().unwrap();
        for v in &mut d.params[out.weight..out.bias + out.outputs] {
            *v = 0.3 * rng::normal(&mut rng);
        }
        let feature = vec![0.7, -0.4];
        for drop_feature in [false, true] {
            let ex = TrainingExample {
                x_t: vec![0.2, -0.5, 1.1],
                eps: vec![0.9, 0.1, -0.3],
                t: 250,
                category: 1,
                feature: feature.clone(),
                drop_feature,
            };
            let mut grad = vec![0.0; d.params.len()];
            d.loss_and_grad(&lay, &ex, &mut grad).unwrap();
            let h = 1e-6;
            for (i, &analytic) in grad.iter().enumerate() {
                let mut plus = d.clone();
                plus.params[i] += h;
                let mut minus = d.clone();
                minus.params[i] -= h;
                let mut sink = vec![0.0; d.params.len()];
                let lp = plus.loss_and_grad(&lay, &ex, &mut sink).unwrap();
                let lm = minus.loss_and_grad(&lay, &ex, &mut sink).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "param {i}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }
}
