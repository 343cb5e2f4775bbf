//! Seeded experiment runner: methods, sweeps, ablations and their
//! machine-readable outputs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{evaluate, evaluate_with, finetune, LinearHead, Metrics};
use crate::clientside::CentroidMode;
use crate::config::{ExperimentConfig, Method};
use crate::diffusion::{pretrain_denoiser, Checkpoint, NoiseSchedule, PretrainReport};
use crate::error::{Error, Result};
use crate::featurizer::{pseudo_label, FeatureVector, Featurizer};
use crate::federation::{exchange, generate, plan_generation, CommLedger, RoundInputs};
use crate::rng::{derive_seed, tag};
use crate::synthdata::{build_corpus, Corpus, Partition};

/// Everything that is fixed across the seeds of one configuration: the
/// corpus, the shared encoder and the noise schedule.
pub struct Environment {
    pub corpus: Corpus,
    pub partition: Partition,
    pub featurizer: Featurizer,
    pub schedule: NoiseSchedule,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = match &cfg.paths.corpus {
            Some(path) => {
                let c = Corpus::load(path)?;
                if c.config != cfg.corpus {
                    return Err(Error::InvalidConfig(format!(
                        "corpus file {} was built from a different corpus config",
                        path.display()
                    )));
                }
                c
            }
            None => build_corpus(&cfg.corpus)?,
        };
        let featurizer = Featurizer::new(
            cfg.featurizer.seed,
            cfg.featurizer.feature_dim,
            cfg.corpus.data_dim,
        )?;
        let schedule = NoiseSchedule::new(cfg.schedule)?;
        Ok(Self {
            partition: corpus.partition(),
            corpus,
            featurizer,
            schedule,
        })
    }

    pub fn round_inputs(&self) -> RoundInputs<'_> {
        RoundInputs {
            server: &self.partition.server,
            clients: &self.partition.clients,
            featurizer: &self.featurizer,
            schedule: &self.schedule,
            num_categories: self.corpus.num_categories(),
        }
    }
}

pub fn pretrain(env: &Environment, cfg: &ExperimentConfig) -> Result<(Checkpoint, PretrainReport)> {
    let (denoiser, report) = pretrain_denoiser(
        &env.corpus.pretrain_set,
        &env.featurizer,
        &env.schedule,
        env.corpus.num_categories(),
        &cfg.pretrain,
    )?;
    Ok((
        Checkpoint {
            denoiser,
            schedule: cfg.schedule,
            pretrain: cfg.pretrain.clone(),
            epoch_losses: report.epoch_losses.clone(),
        },
        report,
    ))
}

fn check_checkpoint(ckpt: &Checkpoint, env: &Environment) -> Result<()> {
    let shape = ckpt.denoiser.shape();
    if ckpt.schedule != env.schedule.config()
        || shape.data_dim != env.corpus.data_dim()
        || shape.feature_dim != env.featurizer.feature_dim()
        || shape.num_categories != env.corpus.num_categories()
    {
        return Err(Error::InvalidConfig(
            "checkpoint was trained for a different schedule or shape".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub method: Method,
    /// Free-form label distinguishing sweep points and ablations.
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub ledger: CommLedger,
    pub generated_samples: usize,
    pub uploaded_vectors: usize,
    /// Fraction of client samples whose pseudo label matched the hidden
    /// truth; `None` when clients never pseudo-labeled.
    pub pseudo_label_accuracy: Option<f64>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

fn run_id(config_hash: &str, method: Method, variant: &str, seed: u64) -> String {
    let digest = Sha256::digest(format!("{config_hash}/{method}/{variant}/{seed}").as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn pseudo_label_accuracy(env: &Environment, pseudo: &[Vec<usize>]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (labels, truth) in pseudo.iter().zip(&env.corpus.client_truth) {
        hit += labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        total += labels.len();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Executes one method for one seed.
pub fn run_method(
    env: &Environment,
    checkpoint: Option<&Checkpoint>,
    cfg: &ExperimentConfig,
    variant: &str,
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let method = cfg.method;
    let inputs = env.round_inputs();
    let uploads_needed = matches!(method, Method::Feddisc | Method::FinetuneCentroids);
    let protocol_seed = derive_seed(seed, &[tag("protocol")]);
    let ex = exchange(&inputs, &cfg.protocol, uploads_needed, protocol_seed)?;
    let head = LinearHead::zeros(env.corpus.num_categories(), env.featurizer.feature_dim());
    let finetune_seed = derive_seed(seed, &[tag("finetune")]);
    let mut generated_samples = 0;

    let metrics = match method {
        Method::ProtoZeroshot => {
            let acc = evaluate_with(&env.featurizer, &env.partition.tests, |f| {
                Ok(
                    pseudo_label(&FeatureVector::new(f.to_vec()), &ex.broadcast.prototypes)?
                        .category,
                )
            })?;
            Metrics::from_accuracies(acc, Vec::new())
        }
        Method::FinetuneCentroids | Method::Feddisc | Method::OracleUpperbound => {
            let mut train: Vec<(Vec<f64>, usize)> = match method {
                Method::FinetuneCentroids => ex
                    .uploads
                    .iter()
                    .flat_map(|u| &u.entries)
                    .flat_map(|e| e.centroids.iter().map(move |c| (c.clone(), e.category)))
                    .collect(),
                Method::OracleUpperbound => env
                    .corpus
                    .client_sets
                    .iter()
                    .zip(&env.corpus.client_truth)
                    .flat_map(|(set, truth)| set.iter().zip(truth))
                    .map(|(s, &y)| Ok((env.featurizer.encode(&s.data)?, y)))
                    .collect::<Result<_>>()?,
                _ => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        Error::MissingCheckpoint(cfg.paths.checkpoint.display().to_string())
                    })?;
                    check_checkpoint(ckpt, env)?;
                    let plan = plan_generation(
                        &ex.uploads,
                        cfg.protocol.samples_per_centroid,
                        cfg.protocol.use_domain_features,
                        derive_seed(seed, &[tag("plan")]),
                    )?;
                    let guidance = if cfg.protocol.use_domain_features {
                        cfg.protocol.guidance
                    } else {
                        crate::diffusion::GuidanceWeights {
                            w_g: 0.0,
                            ..cfg.protocol.guidance
                        }
                    };
                    let samples = generate(
                        &plan,
                        &ex.uploads,
                        &ckpt.denoiser,
                        &env.schedule,
                        guidance,
                        &cfg.protocol.sampler,
                        derive_seed(seed, &[tag("generate")]),
                    )?;
                    generated_samples = samples.len();
                    samples
                        .iter()
                        .map(|s| Ok((env.featurizer.encode(&s.data)?, s.pseudo_label)))
                        .collect::<Result<_>>()?
                }
            };
            if cfg.include_server_data && method == Method::Feddisc {
                for s in &env.partition.server.samples {
                    train.push((env.featurizer.encode(&s.data)?, s.label));
                }
            }
            let report = finetune(&head, &train, &cfg.finetune, finetune_seed)?;
            evaluate(
                &report.head,
                &env.featurizer,
                &env.partition.tests,
                report.loss_curve,
            )?
        }
    };

    let config_hash = cfg.hash();
    Ok(RunRecord {
        run_id: run_id(&config_hash, method, variant, seed),
        config_hash,
        method,
        variant: variant.to_owned(),
        seed,
        metrics,
        uploaded_vectors: ex.uploads.iter().map(|u| u.vector_count()).sum(),
        pseudo_label_accuracy: pseudo_label_accuracy(env, &ex.pseudo_labels),
        ledger: ex.ledger,
        generated_samples,
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_seeds(
    env: &Environment,
    checkpoint: Option<&Checkpoint>,
    cfg: &ExperimentConfig,
    variant: &str,
) -> Result<Vec<RunRecord>> {
    cfg.seeds
        .iter()
        .map(|&seed| run_method(env, checkpoint, cfg, variant, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    L,
    R,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(SweepAxis::L),
            "R" | "r" => Ok(SweepAxis::R),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// One run per (value, seed) over a shared environment and checkpoint.
pub fn sweep(
    env: &Environment,
    checkpoint: Option<&Checkpoint>,
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<Vec<RunRecord>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one value".into(),
        ));
    }
    let mut out = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        let label = match axis {
            SweepAxis::L => {
                c.protocol.num_centroids = v;
                format!("L={v}")
            }
            SweepAxis::R => {
                c.protocol.samples_per_centroid = v;
                format!("R={v}")
            }
        };
        out.extend(run_seeds(env, checkpoint, &c, &label)?);
    }
    Ok(out)
}

/// Full run plus the two single-condition ablations.
pub fn ablation_configs(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let mut full = cfg.clone();
    full.method = Method::Feddisc;
    let mut no_domain = full.clone();
    no_domain.protocol.use_domain_features = false;
    no_domain.protocol.guidance.w_g = 0.0;
    let mut no_centroid = full.clone();
    no_centroid.protocol.centroid_mode = CentroidMode::RandomFeatures;
    vec![
        ("full", full),
        ("no_domain", no_domain),
        ("no_centroid", no_centroid),
    ]
}

pub fn ablate(
    env: &Environment,
    checkpoint: Option<&Checkpoint>,
    cfg: &ExperimentConfig,
) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (label, c) in ablation_configs(cfg) {
        out.extend(run_seeds(env, checkpoint, &c, label)?);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "run_id,seed,method,client_id,accuracy";

fn csv_line(out: &mut String, run_id: &str, seed: u64, method: &str, client: usize, acc: f64) {
    writeln!(out, "{run_id},{seed},{method},{client},{acc:.6}").unwrap();
}

/// One row per (run, client).
pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        for (k, &acc) in r.metrics.per_client_accuracy.iter().enumerate() {
            csv_line(&mut out, &r.run_id, r.seed, r.method.name(), k, acc);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
    pub mean_average_accuracy: Vec<VariantMean>,
    pub total_wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub method: Method,
    pub variant: String,
    pub seeds: usize,
    pub mean_average_accuracy: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// Seed-averaged accuracy per (method, variant), in first-seen order.
pub fn variant_means(records: &[RunRecord]) -> Vec<VariantMean> {
    let mut out: Vec<(VariantMean, f64)> = Vec::new();
    for r in records {
        let pos = out
            .iter()
            .position(|(m, _)| m.method == r.method && m.variant == r.variant);
        let (m, sum) = match pos {
            Some(i) => &mut out[i],
            None => {
                out.push((
                    VariantMean {
                        method: r.method,
                        variant: r.variant.clone(),
                        seeds: 0,
                        mean_average_accuracy: 0.0,
                        uplink_bytes: r.ledger.uplink_bytes,
                        downlink_bytes: r.ledger.downlink_bytes,
                    },
                    0.0,
                ));
                out.last_mut().unwrap()
            }
        };
        m.seeds += 1;
        *sum += r.metrics.average_accuracy;
    }
    out.into_iter()
        .map(|(mut m, sum)| {
            m.mean_average_accuracy = sum / m.seeds as f64;
            m
        })
        .collect()
}

impl Summary {
    pub fn new(config: &ExperimentConfig, runs: Vec<RunRecord>) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            mean_average_accuracy: variant_means(&runs),
            total_wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
            runs,
        }
    }

    /// Rebuilds the CSV from the JSON form alone.
    pub fn csv_from_json(summary: &serde_json::Value) -> Result<String> {
        let bad = || Error::Format {
            what: "summary.json",
            reason: "unexpected run layout".into(),
        };
        let mut out = format!("{CSV_HEADER}\n");
        for run in summary["runs"].as_array().ok_or_else(bad)? {
            let run_id = run["run_id"].as_str().ok_or_else(bad)?;
            let seed = run["seed"].as_u64().ok_or_else(bad)?;
            let method = run["method"].as_str().ok_or_else(bad)?;
            let accs = run["metrics"]["per_client_accuracy"]
                .as_array()
                .ok_or_else(bad)?;
            for (k, a) in accs.iter().enumerate() {
                csv_line(
                    &mut out,
                    run_id,
                    seed,
                    method,
                    k,
                    a.as_f64().ok_or_else(bad)?,
                );
            }
        }
        Ok(out)
    }
}

/// Writes `metrics.csv`, `summary.json` and `ledger.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(records))?;
    let summary = Summary::new(cfg, records.to_vec());
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let ledgers: Vec<_> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "run_id": r.run_id,
                "method": r.method,
                "variant": r.variant,
                "seed": r.seed,
                "ledger": r.ledger,
            })
        })
        .collect();
    std::fs::write(
        dir.join("ledger.json"),
        serde_json::to_string_pretty(&ledgers)?,
    )?;
    Ok(())
}
