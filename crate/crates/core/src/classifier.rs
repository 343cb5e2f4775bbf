//! Linear softmax head over frozen features, trained with mini-batch SGD.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::Featurizer;
use crate::linalg::{argmax, dot};
use crate::rng::{self, tag};
use crate::synthdata::TestView;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    num_categories: usize,
    feature_dim: usize,
    /// `M × d`, row-major.
    pub(crate) weight: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 256,
            epochs: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Softmax with the max logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Parameter gradient of the mean cross-entropy over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    /// Zero-initialised head.
    pub fn zeros(num_categories: usize, feature_dim: usize) -> Self {
        Self {
            num_categories,
            feature_dim,
            weight: vec![0.0; num_categories * feature_dim],
            bias: vec![0.0; num_categories],
            writes: 0,
        }
    }

    pub fn from_parts(
        num_categories: usize,
        feature_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != num_categories * feature_dim || bias.len() != num_categories {
            return Err(Error::DimensionMismatch {
                expected: num_categories * feature_dim,
                actual: weight.len(),
            });
        }
        Ok(Self {
            num_categories,
            feature_dim,
            weight,
            bias,
            writes: 0,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn write_count(&self) -> u64 {
        self.writes
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: feature.len(),
            });
        }
        Ok(self
            .weight
            .chunks_exact(self.feature_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, feature) + b)
            .collect())
    }

    pub fn predict(&self, feature: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = softmax(&self.logits(feature)?);
        Ok((argmax(&probs), probs))
    }

    pub fn loss(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        Ok(self.loss_and_grad(batch)?.0)
    }

    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> Result<(f64, HeadGradient)> {
        let (m, d) = (self.num_categories, self.feature_dim);
        let mut grad = HeadGradient {
            weight: vec![0.0; m * d],
            bias: vec![0.0; m],
        };
        let mut loss = 0.0;
        for &(x, y) in batch {
            if y >= m {
                return Err(Error::InvalidConfig(format!("label {y} out of range")));
            }
            let logits = self.logits(x)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - logits[y];
            for (j, l) in logits.iter().enumerate() {
                let g = (l - lse).exp() - if j == y { 1.0 } else { 0.0 };
                grad.bias[j] += g;
                for (gw, xi) in grad.weight[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
        }
        let n = batch.len().max(1) as f64;
        grad.weight.iter_mut().for_each(|g| *g /= n);
        grad.bias.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    pub fn sgd_step(&mut self, grad: &HeadGradient, lr: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
        self.writes += 1;
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub head: LinearHead,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Mini-batch SGD on mean cross-entropy with per-epoch shuffling.
pub fn finetune(
    head: &LinearHead,
    samples: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning set is empty".into()));
    }
    let mut head = head.clone();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(seed, &[tag("finetune-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (samples[i].0.as_slice(), samples[i].1))
                .collect();
            let (loss, grad) = head.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining(step));
            }
            if cfg.learning_rate > 0.0 {
                head.sgd_step(&grad, cfg.learning_rate);
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    Ok(FinetuneReport { head, loss_curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_client_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub loss_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_accuracies(per_client_accuracy: Vec<f64>, loss_curve: Vec<f64>) -> Self {
        let average_accuracy =
            per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len().max(1) as f64;
        Self {
            per_client_accuracy,
            average_accuracy,
            loss_curve,
        }
    }
}

/// Per-client top-1 accuracy of an arbitrary feature-space classifier.
pub fn evaluate_with<F>(
    featurizer: &Featurizer,
    tests: &[TestView],
    classify: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<usize> + Sync,
{
    tests
        .par_iter()
        .map(|view| {
            if view.samples.is_empty() {
                return Err(Error::EmptyTestView(view.client_id));
            }
            let mut correct = 0usize;
            for s in &view.samples {
                if classify(&featurizer.encode(&s.data)?)? == s.label {
                    correct += 1;
                }
            }
            Ok(correct as f64 / view.samples.len() as f64)
        })
        .collect()
}

pub fn evaluate(
    head: &LinearHead,
    featurizer: &Featurizer,
    tests: &[TestView],
    loss_curve: Vec<f64>,
) -> Result<Metrics> {
    let acc = evaluate_with(featurizer, tests, |f| Ok(head.predict(f)?.0))?;
    Ok(Metrics::from_accuracies(acc, loss_curve))
}
