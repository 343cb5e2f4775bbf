//! Seeded multi-domain corpus with one labeled server domain and `K`
//! unlabeled client domains.
//!
//! Every sample is `mu[label] + nu[domain] + intra_noise * eta`. Category
//! means and domain offsets are Gaussian, scaled so that the expected
//! distance between two category means is `category_separation` and between
//! two domain offsets is `domain_shift`. Domain 0 is the server.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::wire::{f32_round, Tensor, TensorFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_categories: usize,
    pub num_clients: usize,
    pub data_dim: usize,
    pub samples_per_category_server: usize,
    pub samples_per_category_client: usize,
    pub samples_per_category_test: usize,
    /// Per category and per domain.
    pub samples_per_category_pretrain: usize,
    pub category_separation: f64,
    pub domain_shift: f64,
    pub intra_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_categories: 10,
            num_clients: 5,
            data_dim: 32,
            samples_per_category_server: 20,
            samples_per_category_client: 40,
            samples_per_category_test: 40,
            samples_per_category_pretrain: 60,
            category_separation: 6.0,
            domain_shift: 5.0,
            intra_noise: 0.6,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("corpus: {m}")));
        if self.num_categories < 2 {
            return bad("num_categories must be at least 2");
        }
        if self.num_clients < 1 {
            return bad("num_clients must be at least 1");
        }
        if self.data_dim < 2 {
            return bad("data_dim must be at least 2");
        }
        if self.samples_per_category_server == 0 {
            return bad("server set must contain every category");
        }
        if !(self.category_separation.is_finite() && self.category_separation > 0.0) {
            return bad("category_separation must be finite and positive");
        }
        if !(self.domain_shift.is_finite() && self.domain_shift >= 0.0) {
            return bad("domain_shift must be finite and non-negative");
        }
        if !(self.intra_noise.is_finite() && self.intra_noise > 0.0) {
            return bad("intra_noise must be finite and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub data: Vec<f64>,
    pub domain_id: usize,
    pub label: usize,
}

/// A client-side sample. There is no label field to leak.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub data: Vec<f64>,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// `M × p`, row-major.
    pub category_means: Vec<f64>,
    /// `(K + 1) × p`, row-major; row 0 is the server domain.
    pub domain_offsets: Vec<f64>,
    pub server_set: Vec<LabeledSample>,
    pub client_sets: Vec<Vec<UnlabeledSample>>,
    /// Ground-truth labels of `client_sets`, never part of a client view.
    /// Only the diagnostic upper-bound method reads it.
    pub client_truth: Vec<Vec<usize>>,
    pub test_sets: Vec<Vec<LabeledSample>>,
    pub pretrain_set: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerView {
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub client_id: usize,
    pub samples: Vec<UnlabeledSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestView {
    pub client_id: usize,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub server: ServerView,
    pub clients: Vec<ClientView>,
    pub tests: Vec<TestView>,
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    means: Vec<f64>,
    offsets: Vec<f64>,
}

impl Generator<'_> {
    fn draw(&self, label: usize, domain: usize, rng: &mut rng::Rng) -> Vec<f64> {
        let p = self.cfg.data_dim;
        let mu = &self.means[label * p..(label + 1) * p];
        let nu = &self.offsets[domain * p..(domain + 1) * p];
        (0..p)
            .map(|i| f32_round(mu[i] + nu[i] + self.cfg.intra_noise * rng::normal(rng)))
            .collect()
    }

    fn labeled(&self, domain: usize, per_category: usize, stream: &[u64]) -> Vec<LabeledSample> {
        let mut rng = rng::stream(self.cfg.seed, stream);
        (0..self.cfg.num_categories)
            .flat_map(|label| (0..per_category).map(move |_| label))
            .map(|label| LabeledSample {
                data: self.draw(label, domain, &mut rng),
                domain_id: domain,
                label,
            })
            .collect()
    }
}

fn gaussian_table(seed: u64, stream: u64, rows: usize, cols: usize, spread: f64) -> Vec<f64> {
    // E|a - b|^2 = 2 * cols * s^2 = spread^2
    let s = spread / (2.0 * cols as f64).sqrt();
    let mut rng = rng::stream(seed, &[stream]);
    (0..rows * cols)
        .map(|_| f32_round(s * rng::normal(&mut rng)))
        .collect()
}

pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let (m, k, p) = (config.num_categories, config.num_clients, config.data_dim);
    let gen = Generator {
        cfg: config,
        means: gaussian_table(config.seed, tag("means"), m, p, config.category_separation),
        offsets: gaussian_table(config.seed, tag("offsets"), k + 1, p, config.domain_shift),
    };

    let server_set = gen.labeled(0, config.samples_per_category_server, &[tag("server")]);

    let mut client_sets = Vec::with_capacity(k);
    let mut client_truth = Vec::with_capacity(k);
    let mut test_sets = Vec::with_capacity(k);
    for client in 0..k {
        let domain = client + 1;
        let (samples, truth) = gen
            .labeled(
                domain,
                config.samples_per_category_client,
                &[tag("client"), client as u64],
            )
            .into_iter()
            .map(|s| {
                (
                    UnlabeledSample {
                        data: s.data,
                        domain_id: s.domain_id,
                    },
                    s.label,
                )
            })
            .unzip();
        client_sets.push(samples);
        client_truth.push(truth);
        test_sets.push(gen.labeled(
            domain,
            config.samples_per_category_test,
            &[tag("test"), client as u64],
        ));
    }

    let pretrain_set = (0..=k)
        .flat_map(|domain| {
            gen.labeled(
                domain,
                config.samples_per_category_pretrain,
                &[tag("pretrain"), domain as u64],
            )
        })
        .collect();

    Ok(Corpus {
        config: config.clone(),
        category_means: gen.means,
        domain_offsets: gen.offsets,
        server_set,
        client_sets,
        client_truth,
        test_sets,
        pretrain_set,
    })
}

impl Corpus {
    pub fn num_categories(&self) -> usize {
        self.config.num_categories
    }

    pub fn num_clients(&self) -> usize {
        self.config.num_clients
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    /// `mu[label] + nu[domain]`, the noiseless center of a (category, domain) cell.
    pub fn cell_center(&self, label: usize, domain: usize) -> Vec<f64> {
        let p = self.data_dim();
        let mu = &self.category_means[label * p..(label + 1) * p];
        let nu = &self.domain_offsets[domain * p..(domain + 1) * p];
        mu.iter().zip(nu).map(|(a, b)| a + b).collect()
    }

    /// Splits the corpus into what each party may see. Client truth labels
    /// and the pretraining set stay behind.
    pub fn partition(&self) -> Partition {
        Partition {
            server: ServerView {
                samples: self.server_set.clone(),
            },
            clients: self
                .client_sets
                .iter()
                .enumerate()
                .map(|(client_id, samples)| ClientView {
                    client_id,
                    samples: samples.clone(),
                })
                .collect(),
            tests: self
                .test_sets
                .iter()
                .enumerate()
                .map(|(client_id, samples)| TestView {
                    client_id,
                    samples: samples.clone(),
                })
                .collect(),
        }
    }
}

const CORPUS_MAGIC: [u8; 8] = *b"FDCORPUS";
const CORPUS_VERSION: u16 = 1;

fn labeled_tensors(file: &mut TensorFile, prefix: &str, set: &[LabeledSample], p: usize) {
    file.insert(
        format!("{prefix}/data"),
        Tensor::matrix(
            set.len(),
            p,
            set.iter().flat_map(|s| s.data.clone()).collect(),
        ),
    );
    file.insert(
        format!("{prefix}/label"),
        Tensor::vector(set.iter().map(|s| s.label as f64).collect()),
    );
    file.insert(
        format!("{prefix}/domain"),
        Tensor::vector(set.iter().map(|s| s.domain_id as f64).collect()),
    );
}

fn read_labeled(file: &mut TensorFile, prefix: &str) -> Result<Vec<LabeledSample>> {
    let data = file.take(&format!("{prefix}/data"))?;
    let labels = file.take(&format!("{prefix}/label"))?;
    let domains = file.take(&format!("{prefix}/domain"))?;
    let p = *data.shape.get(1).unwrap_or(&0);
    if p == 0 {
        return Ok(Vec::new());
    }
    Ok(data
        .data
        .chunks_exact(p)
        .zip(labels.data.iter().zip(&domains.data))
        .map(|(row, (&label, &domain))| LabeledSample {
            data: row.to_vec(),
            domain_id: domain as usize,
            label: label as usize,
        })
        .collect())
}

impl Corpus {
    pub fn to_file(&self) -> Result<TensorFile> {
        let p = self.data_dim();
        let mut file = TensorFile::new(
            CORPUS_MAGIC,
            CORPUS_VERSION,
            serde_json::json!({ "config": self.config }),
        );
        file.insert(
            "category_means",
            Tensor::matrix(self.num_categories(), p, self.category_means.clone()),
        );
        file.insert(
            "domain_offsets",
            Tensor::matrix(self.num_clients() + 1, p, self.domain_offsets.clone()),
        );
        labeled_tensors(&mut file, "server", &self.server_set, p);
        labeled_tensors(&mut file, "pretrain", &self.pretrain_set, p);
        for k in 0..self.num_clients() {
            let client: Vec<LabeledSample> = self.client_sets[k]
                .iter()
                .zip(&self.client_truth[k])
                .map(|(s, &label)| LabeledSample {
                    data: s.data.clone(),
                    domain_id: s.domain_id,
                    label,
                })
                .collect();
            labeled_tensors(&mut file, &format!("client{k}"), &client, p);
            labeled_tensors(&mut file, &format!("test{k}"), &self.test_sets[k], p);
        }
        Ok(file)
    }

    pub fn from_file(mut file: TensorFile) -> Result<Self> {
        let config: CorpusConfig = serde_json::from_value(file.header["config"].clone())?;
        config.validate()?;
        let category_means = file.take("category_means")?.data;
        let domain_offsets = file.take("domain_offsets")?.data;
        let server_set = read_labeled(&mut file, "server")?;
        let pretrain_set = read_labeled(&mut file, "pretrain")?;
        let mut client_sets = Vec::new();
        let mut client_truth = Vec::new();
        let mut test_sets = Vec::new();
        for k in 0..config.num_clients {
            let (samples, truth) = read_labeled(&mut file, &format!("client{k}"))?
                .into_iter()
                .map(|s| {
                    (
                        UnlabeledSample {
                            data: s.data,
                            domain_id: s.domain_id,
                        },
                        s.label,
                    )
                })
                .unzip();
            client_sets.push(samples);
            client_truth.push(truth);
            test_sets.push(read_labeled(&mut file, &format!("test{k}"))?);
        }
        Ok(Self {
            config,
            category_means,
            domain_offsets,
            server_set,
            client_sets,
            client_truth,
            test_sets,
            pretrain_set,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::read(path, CORPUS_MAGIC, CORPUS_VERSION)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_categories: 3,
            num_clients: 2,
            data_dim: 4,
            samples_per_category_server: 5,
            samples_per_category_client: 10,
            samples_per_category_test: 4,
            samples_per_category_pretrain: 3,
            seed: 7,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_corpus() {
        assert_eq!(
            build_corpus(&small()).unwrap(),
            build_corpus(&small()).unwrap()
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        for cfg in [
            CorpusConfig {
                num_categories: 1,
                ..small()
            },
            CorpusConfig {
                intra_noise: 0.0,
                ..small()
            },
            CorpusConfig {
                category_separation: f64::NAN,
                ..small()
            },
            CorpusConfig {
                domain_shift: -1.0,
                ..small()
            },
            CorpusConfig {
                domain_shift: f64::INFINITY,
                ..small()
            },
            CorpusConfig {
                data_dim: 1,
                ..small()
            },
        ] {
            assert!(
                matches!(build_corpus(&cfg), Err(Error::InvalidConfig(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn client_views_have_domain_ids_and_expected_sizes() {
        let corpus = build_corpus(&small()).unwrap();
        let part = corpus.partition();
        assert_eq!(part.clients.len(), 2);
        for view in &part.clients {
            assert_eq!(view.samples.len(), 30);
            assert!(view
                .samples
                .iter()
                .all(|s| s.domain_id == view.client_id + 1));
        }
    }

    #[test]
    fn partition_conserves_sizes() {
        let corpus = build_corpus(&small()).unwrap();
        let part = corpus.partition();
        assert_eq!(part.server.samples.len(), corpus.server_set.len());
        let c: usize = part.clients.iter().map(|v| v.samples.len()).sum();
        let t: usize = part.tests.iter().map(|v| v.samples.len()).sum();
        assert_eq!(c, corpus.client_sets.iter().map(Vec::len).sum::<usize>());
        assert_eq!(t, corpus.test_sets.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn single_client_corpus_has_one_view() {
        let corpus = build_corpus(&CorpusConfig {
            num_clients: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(corpus.partition().clients.len(), 1);
    }

    #[test]
    fn server_set_covers_every_category() {
        let corpus = build_corpus(&small()).unwrap();
        for j in 0..3 {
            assert!(corpus.server_set.iter().any(|s| s.label == j));
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let corpus = build_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        corpus.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), corpus);
    }
}
