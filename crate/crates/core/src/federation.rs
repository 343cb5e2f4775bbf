//! The one-shot protocol: a single server broadcast, one upload per client,
//! and server-side generation planning over what was uploaded.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clientside::{process_client, ClientUpload, UploadConfig};
use crate::diffusion::{
    sample, Conditioning, Denoiser, GeneratedSample, GuidanceWeights, NoiseSchedule, Provenance,
    SamplerConfig,
};
use crate::error::{Error, Result};
use crate::featurizer::{extract_prototypes, Featurizer, Prototype};
use crate::rng::{self, tag};
use crate::synthdata::{ClientView, ServerView};
use crate::wire::{f32_round, u16_field, ByteReader, ByteWriter};

pub const BROADCAST_SCHEMA_VERSION: u16 = 1;
const BROADCAST_HEADER_BYTES: usize = 14;

/// Prototypes plus the checksum of the encoder every party must share.
///
/// Wire format: `{version u16, M u16, d u16, featurizer_id u64}` then per
/// prototype `{category u16, d f32}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerBroadcast {
    pub prototypes: Vec<Prototype>,
    pub featurizer_id: u64,
}

impl ServerBroadcast {
    /// Prototypes from the server's labeled set, rounded to their wire form.
    pub fn from_server(
        view: &ServerView,
        featurizer: &Featurizer,
        num_categories: usize,
    ) -> Result<Self> {
        let features = view
            .samples
            .iter()
            .map(|s| {
                Ok((
                    featurizer.encode_sample(&s.data, Some(s.domain_id))?,
                    s.label,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut prototypes = extract_prototypes(&features, num_categories)?;
        for p in &mut prototypes {
            p.values.iter_mut().for_each(|v| *v = f32_round(*v));
        }
        Ok(Self {
            prototypes,
            featurizer_id: featurizer.id(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.values.len())
    }

    pub fn byte_size(&self) -> usize {
        BROADCAST_HEADER_BYTES + self.prototypes.len() * (2 + 4 * self.feature_dim())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.put_u16(BROADCAST_SCHEMA_VERSION);
        w.put_u16(u16_field("M", self.prototypes.len())?);
        w.put_u16(u16_field("d", self.feature_dim())?);
        w.put_u64(self.featurizer_id);
        for p in &self.prototypes {
            w.put_u16(u16_field("category", p.category)?);
            w.put_f32s(&p.values);
        }
        Ok(w.into_bytes())
    }

    /// Support counts are not transmitted; decoded prototypes carry 1.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "server broadcast");
        let version = r.u16()?;
        if version != BROADCAST_SCHEMA_VERSION {
            return Err(r.malformed(format!("schema version {version}")));
        }
        let m = r.u16()? as usize;
        let d = r.u16()? as usize;
        let featurizer_id = r.u64()?;
        let prototypes = (0..m)
            .map(|_| {
                Ok(Prototype {
                    category: r.u16()? as usize,
                    values: r.f32s(d)?,
                    support_count: 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            prototypes,
            featurizer_id,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    /// Broadcast bytes times the number of receiving clients.
    pub downlink_bytes: u64,
    pub uplink_bytes: u64,
    pub round_count: u32,
    pub client_param_updates: u64,
    pub broadcast_messages: u32,
    pub upload_messages: u32,
}

impl CommLedger {
    /// Fails unless the finished experiment respected the one-shot,
    /// no-client-training constraints.
    pub fn check(&self, num_clients: usize, expect_uploads: bool) -> Result<()> {
        if self.round_count != 1 {
            return Err(Error::ProtocolViolation(format!(
                "round_count = {}",
                self.round_count
            )));
        }
        if self.client_param_updates != 0 {
            return Err(Error::ProtocolViolation(format!(
                "{} client parameter updates",
                self.client_param_updates
            )));
        }
        let uploads = if expect_uploads {
            num_clients as u32
        } else {
            0
        };
        if self.broadcast_messages != 1 || self.upload_messages != uploads {
            return Err(Error::ProtocolViolation(format!(
                "{} broadcasts and {} uploads for {num_clients} clients",
                self.broadcast_messages, self.upload_messages
            )));
        }
        Ok(())
    }
}

/// In-process transport with exact byte accounting. Admits one broadcast
/// and at most one upload per client, in that order.
#[derive(Debug)]
pub struct MessageBus {
    num_clients: usize,
    broadcast: Option<Vec<u8>>,
    uploads: Vec<Option<Vec<u8>>>,
    ledger: CommLedger,
}

impl MessageBus {
    pub fn new(num_clients: usize) -> Self {
        Self {
            num_clients,
            broadcast: None,
            uploads: vec![None; num_clients],
            ledger: CommLedger::default(),
        }
    }

    pub fn broadcast(&mut self, msg: &ServerBroadcast) -> Result<&[u8]> {
        if self.broadcast.is_some() {
            return Err(Error::ProtocolViolation(
                "second broadcast attempted".into(),
            ));
        }
        let bytes = msg.to_bytes()?;
        self.ledger.downlink_bytes += (bytes.len() * self.num_clients) as u64;
        self.ledger.broadcast_messages += 1;
        self.ledger.round_count = 1;
        Ok(self.broadcast.insert(bytes))
    }

    /// What a client receives.
    pub fn receive_broadcast(&self) -> Result<ServerBroadcast> {
        let bytes = self
            .broadcast
            .as_ref()
            .ok_or_else(|| Error::ProtocolViolation("no broadcast sent".into()))?;
        ServerBroadcast::from_bytes(bytes)
    }

    pub fn upload(&mut self, msg: &ClientUpload) -> Result<()> {
        if self.broadcast.is_none() {
            return Err(Error::ProtocolViolation("upload before broadcast".into()));
        }
        let slot = self
            .uploads
            .get_mut(msg.client_id)
            .ok_or_else(|| Error::ProtocolViolation(format!("unknown client {}", msg.client_id)))?;
        if slot.is_some() {
            return Err(Error::ProtocolViolation(format!(
                "client {} attempted a second upload",
                msg.client_id
            )));
        }
        let bytes = msg.to_bytes()?;
        self.ledger.uplink_bytes += bytes.len() as u64;
        self.ledger.upload_messages += 1;
        *slot = Some(bytes);
        Ok(())
    }

    /// Decoded uploads in client-id order.
    pub fn collect_uploads(&self) -> Result<Vec<ClientUpload>> {
        self.uploads
            .iter()
            .flatten()
            .map(|b| ClientUpload::from_bytes(b))
            .collect()
    }

    pub fn record_client_updates(&mut self, n: u64) {
        self.ledger.client_param_updates += n;
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub client_id: usize,
    pub category: usize,
    pub centroid_index: usize,
    /// One domain-feature source client per generated sample; empty when
    /// domain features are disabled.
    pub domain_clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub entries: Vec<PlanEntry>,
    pub samples_per_centroid: usize,
}

impl GenerationPlan {
    pub fn total_samples(&self) -> usize {
        self.entries.len() * self.samples_per_centroid
    }
}

/// Pairs every uploaded centroid with `r` domain features of the same
/// category, drawn uniformly with replacement among the clients that
/// uploaded that category.
pub fn plan_generation(
    uploads: &[ClientUpload],
    r: usize,
    use_domain_features: bool,
    seed: u64,
) -> Result<GenerationPlan> {
    if uploads.is_empty() {
        return Err(Error::InvalidConfig("no uploads to plan from".into()));
    }
    let m = uploads.iter().map(|u| u.num_categories).max().unwrap_or(0);
    let holders: Vec<Vec<usize>> = (0..m)
        .map(|j| {
            uploads
                .iter()
                .filter(|u| u.entry(j).is_some())
                .map(|u| u.client_id)
                .collect()
        })
        .collect();
    let mut rng = rng::stream(seed, &[tag("plan")]);
    let mut entries = Vec::new();
    for upload in uploads {
        for e in &upload.entries {
            let pool = &holders[e.category];
            assert!(
                !pool.is_empty(),
                "uploaded category without a domain feature"
            );
            for centroid_index in 0..e.centroids.len() {
                let domain_clients = if use_domain_features {
                    (0..r)
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .collect()
                } else {
                    Vec::new()
                };
                entries.push(PlanEntry {
                    client_id: upload.client_id,
                    category: e.category,
                    centroid_index,
                    domain_clients,
                });
            }
        }
    }
    Ok(GenerationPlan {
        entries,
        samples_per_centroid: r,
    })
}

/// Runs the plan through guided DDIM. Each (entry, draw) pair has its own
/// random stream, so the output does not depend on scheduling.
pub fn generate(
    plan: &GenerationPlan,
    uploads: &[ClientUpload],
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    guidance: GuidanceWeights,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<GeneratedSample>> {
    let by_client = |id: usize| {
        uploads
            .iter()
            .find(|u| u.client_id == id)
            .expect("plan references an uploading client")
    };
    let jobs: Vec<(usize, usize)> = (0..plan.entries.len())
        .flat_map(|i| (0..plan.samples_per_centroid).map(move |r| (i, r)))
        .collect();
    jobs.par_iter()
        .map(|&(i, r)| {
            let e = &plan.entries[i];
            let entry = by_client(e.client_id)
                .entry(e.category)
                .expect("plan references an uploaded category");
            let domain_client = e.domain_clients.get(r).copied();
            let domain = domain_client.map(|k| {
                by_client(k)
                    .entry(e.category)
                    .expect("domain source uploaded the category")
                    .domain_feature
                    .as_slice()
            });
            let mut rng = rng::stream(seed, &[tag("generate"), i as u64, r as u64]);
            let data = sample(
                denoiser,
                Conditioning {
                    category: e.category,
                    centroid: &entry.centroids[e.centroid_index],
                    domain,
                },
                guidance,
                sampler,
                schedule,
                &mut rng,
            )?;
            Ok(GeneratedSample {
                data,
                pseudo_label: e.category,
                provenance: Provenance {
                    client_id: e.client_id,
                    category: e.category,
                    centroid_index: e.centroid_index,
                    domain_clients: domain_client.into_iter().collect(),
                },
            })
        })
        .collect()
}

/// Protocol knobs of a single federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub num_centroids: usize,
    pub samples_per_centroid: usize,
    /// Defaults to `round(0.2 * T)` when absent.
    pub noise_intensity: Option<usize>,
    pub guidance: GuidanceWeights,
    pub sampler: SamplerConfig,
    pub kmeans: crate::clientside::KMeansConfig,
    pub use_domain_features: bool,
    pub centroid_mode: crate::clientside::CentroidMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            num_centroids: 5,
            samples_per_centroid: 10,
            noise_intensity: None,
            guidance: GuidanceWeights::default(),
            sampler: SamplerConfig::default(),
            kmeans: Default::default(),
            use_domain_features: true,
            centroid_mode: Default::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn intensity(&self, schedule: &NoiseSchedule) -> usize {
        self.noise_intensity
            .unwrap_or_else(|| (0.2 * schedule.timesteps() as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_centroids == 0 || self.samples_per_centroid == 0 {
            return Err(Error::InvalidConfig("L and R must be at least 1".into()));
        }
        if !(self.guidance.w_f.is_finite() && self.guidance.w_g.is_finite()) {
            return Err(Error::InvalidConfig(
                "guidance weights must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn upload_config(&self, schedule: &NoiseSchedule) -> UploadConfig {
        UploadConfig {
            num_centroids: self.num_centroids,
            kmeans: self.kmeans,
            intensity: self.intensity(schedule),
            centroid_mode: self.centroid_mode,
        }
    }
}

/// Server and clients before anything is exchanged.
pub struct RoundInputs<'a> {
    pub server: &'a ServerView,
    pub clients: &'a [ClientView],
    pub featurizer: &'a Featurizer,
    pub schedule: &'a NoiseSchedule,
    pub num_categories: usize,
}

/// Result of the communication phase.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub broadcast: ServerBroadcast,
    pub uploads: Vec<ClientUpload>,
    /// Client-local pseudo labels, kept for diagnostics only.
    pub pseudo_labels: Vec<Vec<usize>>,
    pub ledger: CommLedger,
}

/// Broadcast prototypes and, if `collect_uploads`, gather one upload per
/// client. Clients run in parallel but are consumed in client-id order.
pub fn exchange(
    inputs: &RoundInputs<'_>,
    protocol: &ProtocolConfig,
    collect_uploads: bool,
    seed: u64,
) -> Result<Exchange> {
    protocol.validate()?;
    let mut bus = MessageBus::new(inputs.clients.len());
    let broadcast =
        ServerBroadcast::from_server(inputs.server, inputs.featurizer, inputs.num_categories)?;
    bus.broadcast(&broadcast)?;

    let mut pseudo_labels = vec![Vec::new(); inputs.clients.len()];
    if collect_uploads {
        let writes_before = inputs.featurizer.write_count();
        let received = bus.receive_broadcast()?;
        let cfg = protocol.upload_config(inputs.schedule);
        let outcomes = inputs
            .clients
            .par_iter()
            .map(|view| {
                process_client(
                    view,
                    &received,
                    inputs.featurizer,
                    inputs.schedule,
                    &cfg,
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        bus.record_client_updates(inputs.featurizer.write_count() - writes_before);
        for (k, outcome) in outcomes.into_iter().enumerate() {
            bus.upload(&outcome.upload)?;
            pseudo_labels[k] = outcome.pseudo_labels.iter().map(|p| p.category).collect();
        }
    }
    let uploads = bus.collect_uploads()?;
    let ledger = bus.ledger().clone();
    ledger.check(inputs.clients.len(), collect_uploads)?;
    Ok(Exchange {
        broadcast,
        uploads,
        pseudo_labels,
        ledger,
    })
}
