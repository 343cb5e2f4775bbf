//! One-shot semi-supervised federated learning in which unlabeled clients
//! upload noised feature summaries and the server trains a classifier on
//! samples generated by a conditional diffusion model.
//!
//! The pipeline, in protocol order:
//!
//! 1. [`featurizer`]: the server encodes its labeled data with a frozen
//!    encoder and broadcasts per-category prototypes.
//! 2. [`clientside`]: each client pseudo-labels its data against the
//!    prototypes, clusters every category, averages a domain feature, adds
//!    Gaussian noise and sends a single upload.
//! 3. [`federation`]: the server pairs each centroid with domain features of
//!    the same category and runs guided DDIM sampling ([`diffusion`]).
//! 4. [`classifier`]: a linear head is fine-tuned on the generated samples
//!    and evaluated per client.
//!
//! [`synthdata`] provides the multi-domain corpus and [`experiment`] the
//! seeded runner used by the CLI.

pub mod classifier;
pub mod clientside;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod featurizer;
pub mod federation;
pub mod linalg;
pub mod rng;
pub mod synthdata;
pub mod wire;

pub use classifier::{LinearHead, Metrics, TrainConfig};
pub use clientside::{ClientUpload, ClusterSet, DomainFeature};
pub use config::{ExperimentConfig, Method};
pub use diffusion::{
    Checkpoint, Denoiser, GeneratedSample, GuidanceWeights, NoiseSchedule, SamplerConfig,
};
pub use error::{Error, Result};
pub use experiment::{Environment, RunRecord};
pub use featurizer::{FeatureVector, Featurizer, Prototype, PseudoLabel};
pub use federation::{CommLedger, GenerationPlan, ServerBroadcast};
pub use synthdata::{Corpus, CorpusConfig};
