//! Frozen encoder, server-side prototype extraction and client-side pseudo
//! labeling.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, argmax, dot, norm};
use crate::rng::{self, tag};
use crate::wire::{f32_round, Tensor, TensorFile};

/// A fixed random linear map `R^p -> R^d` with unit-norm rows.
///
/// There is no mutable access to the weights once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    weight: Vec<f64>,
    feature_dim: usize,
    data_dim: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub origin_domain: Option<usize>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            origin_domain: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub category: usize,
    pub values: Vec<f64>,
    pub support_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub category: usize,
    pub score: f64,
    pub all_scores: Vec<f64>,
}

const FEATURIZER_MAGIC: [u8; 8] = *b"FDFEATUR";
const FEATURIZER_VERSION: u16 = 1;

impl Featurizer {
    pub fn new(seed: u64, feature_dim: usize, data_dim: usize) -> Result<Self> {
        if feature_dim == 0 || data_dim == 0 {
            return Err(Error::InvalidConfig(
                "featurizer dimensions must be positive".into(),
            ));
        }
        let mut rng = rng::stream(seed, &[tag("featurizer")]);
        let mut weight = Vec::with_capacity(feature_dim * data_dim);
        for _ in 0..feature_dim {
            let row = rng::normal_vec(&mut rng, data_dim);
            let n = norm(&row);
            weight.extend(row.iter().map(|v| f32_round(v / n)));
        }
        Ok(Self {
            weight,
            feature_dim,
            data_dim,
            seed,
        })
    }

    pub fn from_weight(weight: Vec<f64>, feature_dim: usize, data_dim: usize) -> Result<Self> {
        if weight.len() != feature_dim * data_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim * data_dim,
                actual: weight.len(),
            });
        }
        Ok(Self {
            weight,
            feature_dim,
            data_dim,
            seed: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    /// `d × p`, row-major.
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// Parameter writes since construction. Always zero: the type offers no
    /// mutation path. Reported so the protocol ledger can check it.
    pub fn write_count(&self) -> u64 {
        0
    }

    pub fn encode(&self, data: &[f64]) -> Result<Vec<f64>> {
        if data.len() != self.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim,
                actual: data.len(),
            });
        }
        Ok(linalg::matvec(&self.weight, self.feature_dim, data))
    }

    pub fn encode_sample(&self, data: &[f64], domain: Option<usize>) -> Result<FeatureVector> {
        Ok(FeatureVector {
            values: self.encode(data)?,
            origin_domain: domain,
        })
    }

    /// Checksum identifying this encoder in the server broadcast.
    pub fn id(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.feature_dim as u64).to_le_bytes());
        h.update((self.data_dim as u64).to_le_bytes());
        for &w in &self.weight {
            h.update((w as f32).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn to_file(&self) -> TensorFile {
        let mut f = TensorFile::new(
            FEATURIZER_MAGIC,
            FEATURIZER_VERSION,
            serde_json::json!({
                "feature_dim": self.feature_dim,
                "data_dim": self.data_dim,
                "seed": self.seed,
            }),
        );
        f.insert(
            "weight",
            Tensor::matrix(self.feature_dim, self.data_dim, self.weight.clone()),
        );
        f
    }

    pub fn from_file(mut f: TensorFile) -> Result<Self> {
        let w = f.take("weight")?;
        let [d, p] = w.shape[..] else {
            return Err(Error::Format {
                what: "featurizer",
                reason: format!("weight has shape {:?}", w.shape),
            });
        };
        let mut out = Self::from_weight(w.data, d, p)?;
        out.seed = f.header["seed"].as_u64().unwrap_or(0);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::read(
            path,
            FEATURIZER_MAGIC,
            FEATURIZER_VERSION,
        )?)
    }
}

/// Per-category mean of labeled features.
pub fn extract_prototypes(
    features: &[(FeatureVector, usize)],
    num_categories: usize,
) -> Result<Vec<Prototype>> {
    let dim = features.first().map(|(f, _)| f.len()).unwrap_or(0);
    let mut grouped: Vec<Vec<&[f64]>> = vec![Vec::new(); num_categories];
    for (f, label) in features {
        if *label >= num_categories {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {num_categories} categories"
            )));
        }
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: f.len(),
            });
        }
        grouped[*label].push(&f.values);
    }
    grouped
        .into_iter()
        .enumerate()
        .map(|(category, rows)| {
            let support_count = rows.len();
            let values = linalg::mean(rows, dim).ok_or(Error::EmptyCategory(category))?;
            Ok(Prototype {
                category,
                values,
                support_count,
            })
        })
        .collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn pseudo_label(feature: &FeatureVector, prototypes: &[Prototype]) -> Result<PseudoLabel> {
    let all_scores = prototypes
        .iter()
        .map(|p| cosine_similarity(&feature.values, &p.values))
        .collect::<Result<Vec<_>>>()?;
    let category = argmax(&all_scores);
    Ok(PseudoLabel {
        category,
        score: all_scores[category],
        all_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_have_unit_norm() {
        let f = Featurizer::new(3, 16, 32).unwrap();
        for row in f.weight().chunks_exact(32) {
            assert!((norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let f = Featurizer::new(3, 4, 6).unwrap();
        assert!(matches!(
            f.encode(&[1.0; 5]),
            Err(Error::DimensionMismatch {
                expected: 6,
                actual: 5
            })
        ));
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        let f = Featurizer::new(1, 4, 6).unwrap();
        assert_eq!(f.encode(&[0.0; 6]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn cosine_edge_cases() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn empty_category_is_reported() {
        let feats = vec![(FeatureVector::new(vec![1.0, 0.0]), 0)];
        assert!(matches!(
            extract_prototypes(&feats, 2),
            Err(Error::EmptyCategory(1))
        ));
    }

    #[test]
    fn file_round_trip_preserves_id() {
        let f = Featurizer::new(9, 5, 7).unwrap();
        let back = Featurizer::from_file(
            TensorFile::from_bytes(&f.to_file().to_bytes().unwrap(), FEATURIZER_MAGIC, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(back, f);
        assert_eq!(back.id(), f.id());
    }
}
