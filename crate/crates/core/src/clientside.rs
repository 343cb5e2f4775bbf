//! Client feature processing: pseudo labeling, per-category clustering,
//! domain feature averaging and noising, packed into a single upload.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::featurizer::{pseudo_label, FeatureVector, Featurizer, PseudoLabel};
use crate::federation::ServerBroadcast;
use crate::linalg::{self, sq_dist};
use crate::rng::{self, tag, Rng};
use crate::synthdata::ClientView;
use crate::wire::{f32_round, u16_field, ByteReader, ByteWriter};

pub const UPLOAD_SCHEMA_VERSION: u16 = 1;
const UPLOAD_HEADER_BYTES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub category: usize,
    pub centroids: Vec<Vec<f64>>,
    pub member_counts: Vec<usize>,
    /// Within-cluster sum of squares at the returned centroids.
    pub objective: f64,
    /// Objective after each Lloyd iteration of the winning restart, starting
    /// with the seeded configuration.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 100,
        }
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rand::Rng::random_range(rng, 0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rand::Rng::random::<f64>(rng) * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Guard against rounding landing on an already-chosen point.
            if d2[chosen] == 0.0 {
                chosen = linalg::argmax(&d2);
            }
            chosen
        } else {
            rand::Rng::random_range(rng, 0..n)
        };
        let c = points[pick].to_vec();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn objective(points: &[&[f64]], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn update(points: &[&[f64]], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    for (c, centroid) in centroids.iter_mut().enumerate() {
        let members = points
            .iter()
            .zip(assign)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| *p);
        if let Some(m) = linalg::mean(members, dim) {
            *centroid = m;
        }
    }
}

/// Moves the farthest point of the largest clusters into each empty cluster.
fn fill_empty(points: &[&[f64]], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    for c in 0..k {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        if counts[c] > 0 {
            continue;
        }
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assign[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, d)) = far {
            if d > 0.0 {
                assign[i] = c;
                centroids[c] = points[i].to_vec();
            }
        }
    }
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assign: Vec<usize>,
    history: Vec<f64>,
}

fn lloyd(points: &[&[f64]], k: usize, max_iters: usize, rng: &mut Rng) -> Run {
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = vec![objective(points, &centroids, &assign)];
    for _ in 0..max_iters {
        fill_empty(points, &mut assign, &mut centroids);
        update(points, &assign, &mut centroids);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assign;
        assign = next;
        history.push(objective(points, &centroids, &assign));
        if !changed {
            break;
        }
    }
    update(points, &assign, &mut centroids);
    Run {
        centroids,
        assign,
        history,
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.
/// With fewer points than `l`, every point becomes its own centroid.
pub fn kmeans(
    features: &[Vec<f64>],
    l: usize,
    cfg: KMeansConfig,
    category: usize,
    rng: &mut Rng,
) -> Result<ClusterSet> {
    if features.is_empty() {
        return Err(Error::EmptyCategory(category));
    }
    if l == 0 {
        return Err(Error::InvalidConfig("L must be at least 1".into()));
    }
    if features.len() < l {
        return Ok(ClusterSet {
            category,
            centroids: features.to_vec(),
            member_counts: vec![1; features.len()],
            objective: 0.0,
            objective_history: vec![0.0],
        });
    }
    let points: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let mut best: Option<(f64, Run)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(&points, l, cfg.max_iters, rng);
        let obj = objective(&points, &run.centroids, &run.assign);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, run));
        }
    }
    let (objective, run) = best.expect("at least one restart");
    let mut counts = vec![0usize; run.centroids.len()];
    run.assign.iter().for_each(|&a| counts[a] += 1);
    let (centroids, member_counts) = run
        .centroids
        .into_iter()
        .zip(counts)
        .filter(|(_, n)| *n > 0)
        .unzip();
    Ok(ClusterSet {
        category,
        centroids,
        member_counts,
        objective,
        objective_history: run.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainFeature {
    pub category: usize,
    pub values: Vec<f64>,
    pub support_count: usize,
}

pub fn domain_feature(features: &[Vec<f64>], category: usize) -> Result<DomainFeature> {
    let dim = features.first().map(Vec::len).unwrap_or(0);
    let values = linalg::mean(features.iter().map(Vec::as_slice), dim)
        .ok_or(Error::EmptyCategory(category))?;
    Ok(DomainFeature {
        category,
        values,
        support_count: features.len(),
    })
}

/// Gaussian mechanism at a fixed diffusion timestep:
/// `sqrt(alpha_bar_n) v + sqrt(1 - alpha_bar_n) eps`.
pub fn add_noise(
    values: &[f64],
    intensity: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if intensity > schedule.timesteps() {
        return Err(Error::IntensityOutOfRange {
            n: intensity,
            t: schedule.timesteps(),
        });
    }
    if intensity == 0 {
        return Ok(values.to_vec());
    }
    let eps = rng::normal_vec(rng, values.len());
    schedule.forward_diffuse(values, intensity, &eps)
}

/// How each category's representative vectors are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    #[default]
    Kmeans,
    /// `L` client features picked uniformly without replacement.
    RandomFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UploadConfig {
    pub num_centroids: usize,
    pub kmeans: KMeansConfig,
    pub intensity: usize,
    pub centroid_mode: CentroidMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadEntry {
    pub category: usize,
    pub centroids: Vec<Vec<f64>>,
    pub domain_feature: Vec<f64>,
    pub sample_count: u32,
}

/// One client's single message to the server. Carries only noised
/// vectors, already rounded to their f32 wire representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub num_categories: usize,
    pub num_centroids: usize,
    pub feature_dim: usize,
    pub entries: Vec<UploadEntry>,
}

impl ClientUpload {
    pub fn entry(&self, category: usize) -> Option<&UploadEntry> {
        self.entries.iter().find(|e| e.category == category)
    }

    pub fn vector_count(&self) -> usize {
        self.entries.iter().map(|e| e.centroids.len() + 1).sum()
    }

    pub fn centroid_count(&self) -> usize {
        self.entries.iter().map(|e| e.centroids.len()).sum()
    }

    /// Exact serialized length.
    pub fn byte_size(&self) -> usize {
        let d = self.feature_dim;
        UPLOAD_HEADER_BYTES
            + self
                .entries
                .iter()
                .map(|e| 2 + 2 + e.centroids.len() * d * 4 + d * 4 + 4)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.put_u16(UPLOAD_SCHEMA_VERSION);
        w.put_u16(u16_field("client_id", self.client_id)?);
        w.put_u16(u16_field("M", self.num_categories)?);
        w.put_u16(u16_field("L", self.num_centroids)?);
        w.put_u16(u16_field("d", self.feature_dim)?);
        for e in &self.entries {
            w.put_u16(u16_field("category", e.category)?);
            w.put_u16(u16_field("centroid_count", e.centroids.len())?);
            for c in &e.centroids {
                debug_assert_eq!(c.len(), self.feature_dim);
                w.put_f32s(c);
            }
            w.put_f32s(&e.domain_feature);
            w.put_u32(e.sample_count);
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "client upload");
        let version = r.u16()?;
        if version != UPLOAD_SCHEMA_VERSION {
            return Err(r.malformed(format!("schema version {version}")));
        }
        let client_id = r.u16()? as usize;
        let num_categories = r.u16()? as usize;
        let num_centroids = r.u16()? as usize;
        let feature_dim = r.u16()? as usize;
        let mut entries = Vec::new();
        while !r.at_end() {
            let category = r.u16()? as usize;
            let count = r.u16()? as usize;
            let centroids = (0..count)
                .map(|_| r.f32s(feature_dim))
                .collect::<Result<_>>()?;
            entries.push(UploadEntry {
                category,
                centroids,
                domain_feature: r.f32s(feature_dim)?,
                sample_count: r.u32()?,
            });
        }
        r.finish()?;
        Ok(Self {
            client_id,
            num_categories,
            num_centroids,
            feature_dim,
            entries,
        })
    }
}

/// Everything a client computes; only `upload` ever leaves the client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub upload: ClientUpload,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub clusters: Vec<ClusterSet>,
}

fn round_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f32_round).collect()
}

/// Encode, pseudo-label, group, cluster, average, noise, pack. Performs no
/// parameter updates: the featurizer is only borrowed immutably.
pub fn process_client(
    view: &ClientView,
    broadcast: &ServerBroadcast,
    featurizer: &Featurizer,
    schedule: &NoiseSchedule,
    cfg: &UploadConfig,
    seed: u64,
) -> Result<ClientOutcome> {
    if view.samples.is_empty() {
        return Err(Error::EmptyClient(view.client_id));
    }
    if featurizer.id() != broadcast.featurizer_id {
        return Err(Error::ProtocolViolation(format!(
            "client {} holds a featurizer that differs from the broadcast one",
            view.client_id
        )));
    }
    let m = broadcast.prototypes.len();
    let client = view.client_id as u64;

    let features = view
        .samples
        .iter()
        .map(|s| featurizer.encode_sample(&s.data, Some(s.domain_id)))
        .collect::<Result<Vec<FeatureVector>>>()?;
    let pseudo_labels = features
        .iter()
        .map(|f| pseudo_label(f, &broadcast.prototypes))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m];
    for (f, pl) in features.into_iter().zip(&pseudo_labels) {
        grouped[pl.category].push(f.values);
    }

    let mut noise_rng = rng::stream(seed, &[tag("upload-noise"), client]);
    let mut entries = Vec::new();
    let mut clusters = Vec::new();
    for (category, members) in grouped.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut pick_rng = rng::stream(seed, &[tag("centroids"), client, category as u64]);
        let reps = match cfg.centroid_mode {
            CentroidMode::Kmeans => {
                let set = kmeans(
                    members,
                    cfg.num_centroids,
                    cfg.kmeans,
                    category,
                    &mut pick_rng,
                )?;
                let reps = set.centroids.clone();
                clusters.push(set);
                reps
            }
            CentroidMode::RandomFeatures => {
                let take = cfg.num_centroids.min(members.len());
                let mut idx = index::sample(&mut pick_rng, members.len(), take).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| members[i].clone()).collect()
            }
        };
        let g = domain_feature(members, category)?;
        let centroids = reps
            .iter()
            .map(|z| add_noise(z, cfg.intensity, schedule, &mut noise_rng).map(round_vec))
            .collect::<Result<Vec<_>>>()?;
        let domain_feature = round_vec(add_noise(
            &g.values,
            cfg.intensity,
            schedule,
            &mut noise_rng,
        )?);
        entries.push(UploadEntry {
            category,
            centroids,
            domain_feature,
            sample_count: members.len() as u32,
        });
    }

    Ok(ClientOutcome {
        upload: ClientUpload {
            client_id: view.client_id,
            num_categories: m,
            num_centroids: cfg.num_centroids,
            feature_dim: featurizer.feature_dim(),
            entries,
        },
        pseudo_labels,
        clusters,
    })
}

pub fn build_upload(
    view: &ClientView,
    broadcast: &ServerBroadcast,
    featurizer: &Featurizer,
    schedule: &NoiseSchedule,
    cfg: &UploadConfig,
    seed: u64,
) -> Result<ClientUpload> {
    process_client(view, broadcast, featurizer, schedule, cfg, seed).map(|o| o.upload)
}
