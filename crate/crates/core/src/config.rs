//! Experiment configuration: a JSON document with one section per
//! subsystem. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::TrainConfig;
use crate::diffusion::{PretrainConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::federation::ProtocolConfig;
use crate::synthdata::CorpusConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Feddisc,
    FinetuneCentroids,
    ProtoZeroshot,
    OracleUpperbound,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Feddisc,
        Method::FinetuneCentroids,
        Method::ProtoZeroshot,
        Method::OracleUpperbound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Feddisc => "feddisc",
            Method::FinetuneCentroids => "finetune_centroids",
            Method::ProtoZeroshot => "proto_zeroshot",
            Method::OracleUpperbound => "oracle_upperbound",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self == Method::Feddisc
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub seed: u64,
    pub feature_dim: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Read the corpus from this file instead of generating it.
    pub corpus: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            checkpoint: PathBuf::from("runs/denoiser.ckpt"),
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub featurizer: FeaturizerConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub protocol: ProtocolConfig,
    pub finetune: TrainConfig,
    /// Append the server's labeled features to the generated set.
    pub include_server_data: bool,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            featurizer: FeaturizerConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            protocol: ProtocolConfig::default(),
            finetune: TrainConfig::default(),
            include_server_data: false,
            method: Method::Feddisc,
            seeds: vec![0, 1, 2],
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.protocol.validate()?;
        self.finetune.validate()?;
        if self.featurizer.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "featurizer.feature_dim must be positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let t = self.schedule.timesteps;
        if let Some(n) = self.protocol.noise_intensity {
            if n > t {
                return Err(Error::IntensityOutOfRange { n, t });
            }
        }
        if self.protocol.sampler.num_steps == 0 || self.protocol.sampler.num_steps > t {
            return Err(Error::InvalidConfig(format!(
                "sampler.num_steps must lie in 1..={t}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `KEY=VALUE` overrides where `KEY` is a dotted path into the
    /// document. `VALUE` is parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override {:?} is not KEY=VALUE", o.as_ref()))
            })?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut doc, key, value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Hash of the canonical (key-sorted) JSON form, ignoring seeds and
    /// filesystem paths.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut doc {
            map.remove("seeds");
            map.remove("paths");
        }
        hash_value(&doc)
    }
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k.clone(), canonical(v)))
                    .collect(),
            )
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

pub fn hash_value(v: &Value) -> String {
    let text = serde_json::to_string(&canonical(v)).expect("json serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key}: {part:?} is not a section")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}
