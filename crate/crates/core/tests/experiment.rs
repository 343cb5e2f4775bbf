use feddisc_core::clientside::CentroidMode;
use feddisc_core::config::ExperimentConfig;
use feddisc_core::experiment::{self, ablation_configs, Environment, Summary, SweepAxis};
use feddisc_core::federation::plan_generation;
use feddisc_core::Method;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "corpus.num_categories=3",
            "corpus.num_clients=2",
            "corpus.data_dim=6",
            "corpus.samples_per_category_pretrain=8",
            "corpus.samples_per_category_client=10",
            "corpus.samples_per_category_test=6",
            "featurizer.feature_dim=4",
            "pretrain.epochs=2",
            "pretrain.hidden=[16]",
            "protocol.num_centroids=2",
            "protocol.samples_per_centroid=2",
            "protocol.sampler.num_steps=4",
            "finetune.epochs=3",
            "seeds=[0,1]",
        ])
        .unwrap()
}

#[test]
fn partial_config_files_fill_in_defaults() {
    let cfg = ExperimentConfig::from_json(r#"{"protocol": {"num_centroids": 3}}"#).unwrap();
    assert_eq!(cfg.protocol.num_centroids, 3);
    assert_eq!(cfg.protocol.samples_per_centroid, 10);
    assert_eq!(cfg.corpus, ExperimentConfig::default().corpus);
    assert!(ExperimentConfig::from_json(r#"{"protocol": {"num_centriods": 3}}"#).is_err());
}

#[test]
fn default_intensity_scales_with_t() {
    let cfg = ExperimentConfig::default();
    let env_t = |t: usize| {
        feddisc_core::NoiseSchedule::new(feddisc_core::diffusion::ScheduleConfig {
            timesteps: t,
            ..Default::default()
        })
        .unwrap()
    };
    assert_eq!(cfg.protocol.intensity(&env_t(1000)), 200);
    assert_eq!(cfg.protocol.intensity(&env_t(50)), 10);
}

#[test]
fn summary_json_reproduces_the_csv_and_runs_are_deterministic() {
    let cfg = tiny();
    let env = Environment::build(&cfg).unwrap();
    let (ckpt, _) = experiment::pretrain(&env, &cfg).unwrap();
    let records = experiment::run_seeds(&env, Some(&ckpt), &cfg, "default").unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.metrics.per_client_accuracy.len(), 2);
        assert_eq!(r.ledger.round_count, 1);
        assert_eq!(r.config_hash, cfg.hash());
    }
    let dir = tempfile::tempdir().unwrap();
    experiment::write_outputs(dir.path(), &cfg, &records).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(Summary::csv_from_json(&summary).unwrap(), csv);
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ledger.json")).unwrap())
            .unwrap();
    assert_eq!(ledger.as_array().unwrap().len(), 2);

    let again = experiment::run_seeds(&env, Some(&ckpt), &cfg, "default").unwrap();
    assert_eq!(experiment::metrics_csv(&again), csv);
    let (ckpt2, _) = experiment::pretrain(&env, &cfg).unwrap();
    assert_eq!(ckpt2.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn sweeps_and_ablations_produce_the_expected_records() {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..tiny()
    };
    let env = Environment::build(&cfg).unwrap();
    let (ckpt, _) = experiment::pretrain(&env, &cfg).unwrap();

    let sweep = experiment::sweep(&env, Some(&ckpt), &cfg, SweepAxis::L, &[1, 3]).unwrap();
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[0].variant, "L=1");
    assert!(sweep[0].generated_samples < sweep[1].generated_samples);
    let single = experiment::sweep(&env, Some(&ckpt), &cfg, SweepAxis::R, &[3]).unwrap();
    assert_eq!(single.len(), 1);
    assert!(experiment::sweep(&env, Some(&ckpt), &cfg, SweepAxis::R, &[]).is_err());

    let configs = ablation_configs(&cfg);
    assert_eq!(configs.iter().filter(|(l, _)| *l == "full").count(), 1);
    let (_, no_domain) = &configs[1];
    assert!(!no_domain.protocol.use_domain_features);
    assert_eq!(no_domain.protocol.guidance.w_g, 0.0);
    let (_, no_centroid) = &configs[2];
    assert_eq!(
        no_centroid.protocol.centroid_mode,
        CentroidMode::RandomFeatures
    );

    let records = experiment::ablate(&env, Some(&ckpt), &cfg).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.method == Method::Feddisc));
    assert_eq!(records[0].uploaded_vectors, records[2].uploaded_vectors);
}

#[test]
fn no_domain_plans_carry_no_domain_references() {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..tiny()
    };
    let env = Environment::build(&cfg).unwrap();
    let (_, no_domain) = &ablation_configs(&cfg)[1];
    let inputs = feddisc_core::federation::RoundInputs {
        server: &env.partition.server,
        clients: &env.partition.clients,
        featurizer: &env.featurizer,
        schedule: &env.schedule,
        num_categories: 3,
    };
    let ex = feddisc_core::federation::exchange(&inputs, &no_domain.protocol, true, 0).unwrap();
    let plan = plan_generation(&ex.uploads, 2, no_domain.protocol.use_domain_features, 0).unwrap();
    assert!(plan.entries.iter().all(|e| e.domain_clients.is_empty()));

    let (_, no_centroid) = &ablation_configs(&cfg)[2];
    let ex2 = feddisc_core::federation::exchange(&inputs, &no_centroid.protocol, true, 0).unwrap();
    for u in &ex2.uploads {
        for e in &u.entries {
            assert_eq!(e.centroids.len(), 2.min(e.sample_count as usize));
        }
    }
}

#[test]
fn saved_corpus_is_accepted_only_for_its_config() {
    let cfg = tiny();
    let env = Environment::build(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    env.corpus.save(&path).unwrap();
    let mut with_file = cfg.clone();
    with_file.paths.corpus = Some(path);
    let loaded = Environment::build(&with_file).unwrap();
    assert_eq!(loaded.corpus.server_set, env.corpus.server_set);
    let other = with_file.with_overrides(&["corpus.seed=5"]).unwrap();
    assert!(Environment::build(&other).is_err());
}
