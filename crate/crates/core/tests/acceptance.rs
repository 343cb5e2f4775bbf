//! One PASS/FAIL line per acceptance criterion. Exact and statistical
//! criteria also fail the test; trend criteria only report, since they are
//! measurements of the simulator rather than invariants of the code.

use feddisc_core::clientside::{add_noise, kmeans, ClientUpload, KMeansConfig, UploadEntry};
use feddisc_core::config::ExperimentConfig;
use feddisc_core::diffusion::{
    composed_eps, ddim_step, pretrain_denoiser, FeatureSlot, PretrainConfig, ScheduleConfig,
};
use feddisc_core::experiment::{
    self, ablation_configs, metrics_csv, variant_means, Environment, RunRecord, SweepAxis,
};
use feddisc_core::federation::{exchange, plan_generation};
use feddisc_core::rng::{self, derive_seed, tag};
use feddisc_core::synthdata::build_corpus;
use feddisc_core::{
    classifier::LinearHead, CorpusConfig, Featurizer, GuidanceWeights, Method, NoiseSchedule,
};
use rand::Rng;

struct Report {
    lines: Vec<(bool, bool, String)>,
}

impl Report {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.record(name, pass, detail, true);
    }

    fn trend(&mut self, name: &str, pass: bool, detail: String) {
        self.record(name, pass, detail, false);
    }

    fn record(&mut self, name: &str, pass: bool, detail: String, hard: bool) {
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, hard, line));
    }

    fn finish(self) {
        let hard: Vec<&String> = self
            .lines
            .iter()
            .filter(|(p, h, _)| !p && *h)
            .map(|(_, _, l)| l)
            .collect();
        let soft = self.lines.iter().filter(|(p, h, _)| !p && !*h).count();
        println!(
            "{} criteria, {} exact failures, {soft} trend shortfalls",
            self.lines.len(),
            hard.len()
        );
        assert!(hard.is_empty(), "{hard:#?}");
    }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleConfig::default()).unwrap()
}

fn sse(points: &[Vec<f64>], labels: &[usize], l: usize) -> f64 {
    let d = points[0].len();
    let mut total = 0.0;
    for c in 0..l {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        for i in 0..d {
            let m = members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|p| (p[i] - m).powi(2)).sum::<f64>();
        }
    }
    total
}

fn exhaustive_optimum(points: &[Vec<f64>], l: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(sse(points, &labels, l));
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < l {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Points within radius 0.75 of centres spaced 10 apart: separation ratio
/// above 13.
fn separated_instance(n: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[tag("kmeans-instance"), n as u64, l as u64]);
    let centres: Vec<[f64; 2]> = (0..l)
        .map(|c| [10.0 * c as f64, 5.0 * (c % 2) as f64])
        .collect();
    (0..n)
        .map(|i| {
            let c = centres[i % l];
            let jitter = |r: &mut rng::Rng| (0.5 * rng::normal(r)).clamp(-0.5, 0.5);
            vec![c[0] + jitter(&mut r), c[1] + jitter(&mut r)]
        })
        .collect()
}

fn oracle_suite(rep: &mut Report) {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for l in 1..=3 {
        for n in l..=8 {
            for seed in 0..5 {
                let pts = separated_instance(n, l, seed);
                let mut r = rng::stream(seed, &[tag("kmeans-run")]);
                let got = kmeans(&pts, l, KMeansConfig::default(), 0, &mut r)
                    .unwrap()
                    .objective;
                worst = worst.max((got - exhaustive_optimum(&pts, l)).abs());
                instances += 1;
            }
        }
    }
    rep.check(
        "kmeans matches exhaustive optimum",
        worst <= 1e-9,
        format!("{instances} instances, max gap {worst:.2e}"),
    );

    let s = schedule();
    let mut r = rng::stream(0, &[tag("ddim-inversion")]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x0 = rng::normal_vec(&mut r, 8);
        let eps = rng::normal_vec(&mut r, 8);
        let t = r.random_range(1..=1000usize);
        let t_prev = r.random_range(0..t);
        let x_t = s.forward_diffuse(&x0, t, &eps).unwrap();
        let stepped = ddim_step(&x_t, &eps, t, t_prev, &s, 0.0, None).unwrap();
        let closed = s.forward_diffuse(&x0, t_prev, &eps).unwrap();
        for (a, b) in stepped.iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
    }
    rep.check(
        "DDIM inversion identity",
        worst <= 1e-9,
        format!("100 triples, max error {worst:.2e}"),
    );

    let corpus = build_corpus(&CorpusConfig {
        num_categories: 3,
        num_clients: 2,
        data_dim: 6,
        samples_per_category_pretrain: 10,
        ..CorpusConfig::default()
    })
    .unwrap();
    let f = Featurizer::new(0, 4, 6).unwrap();
    let cfg = PretrainConfig {
        epochs: 3,
        hidden: vec![16],
        ..PretrainConfig::default()
    };
    let (den, _) = pretrain_denoiser(&corpus.pretrain_set, &f, &s, 3, &cfg).unwrap();
    let mut r = rng::stream(1, &[tag("guidance-states")]);
    let mut worst = 0.0f64;
    for state in 0..100 {
        let x = rng::normal_vec(&mut r, 6);
        let z = rng::normal_vec(&mut r, 4);
        let g = rng::normal_vec(&mut r, 4);
        let (t, c) = (1 + state * 9, state % 3);
        let eps_c = den.predict_eps(&x, t, c, FeatureSlot::Null).unwrap();
        let eps_z = den.predict_eps(&x, t, c, FeatureSlot::Feature(&z)).unwrap();
        let zero = composed_eps(
            &den,
            &x,
            t,
            c,
            &z,
            Some(&g),
            GuidanceWeights { w_f: 0.0, w_g: 0.0 },
        )
        .unwrap();
        let one = composed_eps(
            &den,
            &x,
            t,
            c,
            &z,
            Some(&g),
            GuidanceWeights { w_f: 1.0, w_g: 0.0 },
        )
        .unwrap();
        for i in 0..6 {
            worst = worst
                .max((zero[i] - eps_c[i]).abs())
                .max((one[i] - eps_z[i]).abs());
        }
    }
    rep.check(
        "guidance collapse identities",
        worst <= 1e-6,
        format!("100 states, max error {worst:.2e}"),
    );

    let (m, d) = (4, 6);
    let mut worst = 0.0f64;
    for point in 0..20u64 {
        let mut r = rng::stream(point, &[tag("fd-point")]);
        let head = LinearHead::from_parts(
            m,
            d,
            rng::normal_vec(&mut r, m * d),
            rng::normal_vec(&mut r, m),
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..8).map(|_| rng::normal_vec(&mut r, d)).collect();
        let batch: Vec<(&[f64], usize)> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.as_slice(), i % m))
            .collect();
        let (_, grad) = head.loss_and_grad(&batch).unwrap();
        let analytic: Vec<f64> = grad.weight.iter().chain(&grad.bias).copied().collect();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let bumped = |delta: f64| {
                let (mut w, mut b) = (head.weight().to_vec(), head.bias().to_vec());
                if i < m * d {
                    w[i] += delta;
                } else {
                    b[i - m * d] += delta;
                }
                LinearHead::from_parts(m, d, w, b)
                    .unwrap()
                    .loss(&batch)
                    .unwrap()
            };
            let fd = (bumped(h) - bumped(-h)) / (2.0 * h);
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
    }
    rep.check(
        "classifier gradient vs central differences",
        worst < 1e-4,
        format!("20 points, max relative error {worst:.2e}"),
    );

    let b = |t: usize| 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
    let mut prod = 1.0;
    let mut worst = (s.alpha_bar(0) - 1.0).abs();
    for t in 1..=1000 {
        prod *= 1.0 - b(t);
        worst = worst.max((s.alpha_bar(t) - prod).abs());
    }
    rep.check(
        "alpha_bar equals the product oracle",
        worst <= 1e-12,
        format!("t = 0..=1000, max error {worst:.2e}"),
    );
}

fn statistical_suite(rep: &mut Report) {
    let s = schedule();
    let v = [1.0, -2.0, 0.5, 3.0];
    let draws = 10_000usize;
    let mut ok = true;
    let mut details = Vec::new();
    for n in [0, 200, 1000] {
        let ab = s.alpha_bar(n);
        let mut r = rng::stream(7, &[tag("noise-suite"), n as u64]);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let out = add_noise(&v, n, &s, &mut r).unwrap();
            for i in 0..4 {
                sum[i] += out[i];
                sq[i] += out[i] * out[i];
            }
        }
        let mut worst_z = 0.0f64;
        for i in 0..4 {
            let mean = sum[i] / draws as f64;
            let var = (sq[i] - draws as f64 * mean * mean) / (draws - 1) as f64;
            let (mu, sigma2) = (ab.sqrt() * v[i], 1.0 - ab);
            if sigma2 == 0.0 {
                ok &= mean == mu && var.abs() < 1e-12;
                continue;
            }
            let z_mean = (mean - mu).abs() / (sigma2 / draws as f64).sqrt();
            let z_var = (var - sigma2).abs() / (sigma2 * (2.0 / (draws - 1) as f64).sqrt());
            worst_z = worst_z.max(z_mean).max(z_var);
        }
        ok &= worst_z <= 4.0;
        details.push(format!("n={n} max |z| {worst_z:.2}"));
    }
    rep.check("add_noise moments within 4 SE", ok, details.join(", "));

    let uploads: Vec<ClientUpload> = (0..5)
        .map(|k| ClientUpload {
            client_id: k,
            num_categories: 1,
            num_centroids: 1,
            feature_dim: 2,
            entries: vec![UploadEntry {
                category: 0,
                centroids: vec![vec![0.0; 2]],
                domain_feature: vec![k as f64; 2],
                sample_count: 1,
            }],
        })
        .collect();
    let plan = plan_generation(&uploads, 2_000, true, 11).unwrap();
    let mut counts = [0usize; 5];
    plan.entries
        .iter()
        .flat_map(|e| &e.domain_clients)
        .for_each(|&k| counts[k] += 1);
    let total: usize = counts.iter().sum();
    let se = (0.2f64 * 0.8 / total as f64).sqrt();
    let worst_z = counts
        .iter()
        .map(|&c| (c as f64 / total as f64 - 0.2).abs() / se)
        .fold(0.0, f64::max);
    rep.check(
        "client selection uniform within 4 SE",
        total == 10_000 && worst_z <= 4.0,
        format!("{total} draws, max |z| {worst_z:.2}"),
    );
}

/// Re-derives the exchange behind a record and compares its ledger with the
/// serialized message lengths.
fn ledger_matches(env: &Environment, cfg: &ExperimentConfig, rec: &RunRecord) -> bool {
    let uploads_needed = matches!(rec.method, Method::Feddisc | Method::FinetuneCentroids);
    let protocol = match rec.variant.as_str() {
        "no_domain" => ablation_configs(cfg)[1].1.protocol.clone(),
        "no_centroid" => ablation_configs(cfg)[2].1.protocol.clone(),
        v => {
            let mut p = cfg.protocol.clone();
            if let Some(l) = v.strip_prefix("L=") {
                p.num_centroids = l.parse().unwrap();
            }
            if let Some(r) = v.strip_prefix("R=") {
                p.samples_per_centroid = r.parse().unwrap();
            }
            p
        }
    };
    let ex = exchange(
        &env.round_inputs(),
        &protocol,
        uploads_needed,
        derive_seed(rec.seed, &[tag("protocol")]),
    )
    .unwrap();
    let uplink: u64 = ex
        .uploads
        .iter()
        .map(|u| u.to_bytes().unwrap().len() as u64)
        .sum();
    let downlink =
        ex.broadcast.to_bytes().unwrap().len() as u64 * env.partition.clients.len() as u64;
    rec.ledger
        .check(env.partition.clients.len(), uploads_needed)
        .is_ok()
        && rec.ledger.round_count == 1
        && rec.ledger.client_param_updates == 0
        && rec.ledger.uplink_bytes == uplink
        && rec.ledger.downlink_bytes == downlink
}

fn mean_of(records: &[RunRecord], variant: &str, method: Method) -> f64 {
    let picked: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.variant == variant && r.method == method)
        .cloned()
        .collect();
    assert!(!picked.is_empty(), "no runs for {variant}/{method:?}");
    variant_means(&picked)[0].mean_average_accuracy
}

#[test]
fn acceptance() {
    let mut rep = Report::new();
    oracle_suite(&mut rep);
    statistical_suite(&mut rep);

    let cfg = ExperimentConfig::default();
    let env = Environment::build(&cfg).unwrap();
    let (ckpt, pre) = experiment::pretrain(&env, &cfg).unwrap();
    println!(
        "pretrained denoiser: {} epochs, loss {:.4} -> {:.4}",
        pre.epoch_losses.len(),
        pre.first_loss().unwrap(),
        pre.last_loss().unwrap()
    );

    let mut records = Vec::new();
    for method in Method::ALL {
        let c = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        records.extend(experiment::run_seeds(&env, Some(&ckpt), &c, "default").unwrap());
    }
    let feddisc_cfg = ExperimentConfig {
        method: Method::Feddisc,
        ..cfg.clone()
    };
    records.extend(
        experiment::sweep(&env, Some(&ckpt), &feddisc_cfg, SweepAxis::L, &[3, 10]).unwrap(),
    );
    records.extend(
        experiment::sweep(&env, Some(&ckpt), &feddisc_cfg, SweepAxis::R, &[3, 10]).unwrap(),
    );
    for (label, c) in ablation_configs(&cfg).into_iter().skip(1) {
        records.extend(experiment::run_seeds(&env, Some(&ckpt), &c, label).unwrap());
    }

    let bad = records
        .iter()
        .filter(|r| !ledger_matches(&env, &cfg, r))
        .count();
    rep.check(
        "ledger exact for every method and run",
        bad == 0,
        format!("{} runs, {bad} mismatches", records.len()),
    );

    let (m, l, d) = (
        cfg.corpus.num_categories,
        cfg.protocol.num_centroids,
        cfg.featurizer.feature_dim,
    );
    let vector_bound = m * (l + 1);
    let byte_bound = 10 + m * (2 + 2 + l * d * 4 + d * 4 + 4);
    let mut largest = Vec::new();
    let mut within = true;
    for per_category in [5, 50, 500] {
        let c = cfg
            .with_overrides(&[&format!(
                "corpus.samples_per_category_client={per_category}"
            )])
            .unwrap();
        let e = Environment::build(&c).unwrap();
        let ex = exchange(&e.round_inputs(), &c.protocol, true, 0).unwrap();
        within &= ex
            .uploads
            .iter()
            .all(|u| u.vector_count() <= vector_bound && u.byte_size() <= byte_bound);
        largest.push(ex.uploads.iter().map(|u| u.byte_size()).max().unwrap());
    }
    rep.check(
        "upload size independent of client N",
        within,
        format!("largest upload {largest:?} bytes at N per category 5/50/500, bound {byte_bound} bytes and {vector_bound} vectors"),
    );

    let fd = mean_of(&records, "default", Method::Feddisc);
    let ft = mean_of(&records, "default", Method::FinetuneCentroids);
    let zs = mean_of(&records, "default", Method::ProtoZeroshot);
    let or = mean_of(&records, "default", Method::OracleUpperbound);
    rep.trend(
        "feddisc beats finetune by 0.02 and zero-shot",
        fd >= ft + 0.02 && fd >= zs,
        format!("feddisc {fd:.4}, finetune {ft:.4}, zero-shot {zs:.4}, oracle {or:.4}"),
    );
    let (l3, l10) = (
        mean_of(&records, "L=3", Method::Feddisc),
        mean_of(&records, "L=10", Method::Feddisc),
    );
    rep.trend(
        "accuracy at L=10 >= L=3",
        l10 >= l3,
        format!("L=3 {l3:.4}, L=10 {l10:.4}"),
    );
    let (r3, r10) = (
        mean_of(&records, "R=3", Method::Feddisc),
        mean_of(&records, "R=10", Method::Feddisc),
    );
    rep.trend(
        "accuracy at R=10 >= R=3",
        r10 >= r3,
        format!("R=3 {r3:.4}, R=10 {r10:.4}"),
    );
    let nd = mean_of(&records, "no_domain", Method::Feddisc);
    let nc = mean_of(&records, "no_centroid", Method::Feddisc);
    rep.trend(
        "full feddisc >= each single-condition ablation",
        fd >= nd && fd >= nc,
        format!("full {fd:.4}, no_domain {nd:.4}, no_centroid {nc:.4}"),
    );

    let first: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.variant == "default")
        .cloned()
        .collect();
    let mut again = Vec::new();
    for method in Method::ALL {
        let c = ExperimentConfig {
            method,
            ..cfg.clone()
        };
        again.extend(experiment::run_seeds(&env, Some(&ckpt), &c, "default").unwrap());
    }
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::write_outputs(dirs.0.path(), &cfg, &first).unwrap();
    experiment::write_outputs(dirs.1.path(), &cfg, &again).unwrap();
    let a = std::fs::read(dirs.0.path().join("metrics.csv")).unwrap();
    let b = std::fs::read(dirs.1.path().join("metrics.csv")).unwrap();
    rep.check(
        "metrics.csv byte-identical across executions",
        a == b && metrics_csv(&first).as_bytes() == a.as_slice(),
        format!(
            "{} bytes, {} rows",
            a.len(),
            first.len() * cfg.corpus.num_clients
        ),
    );

    rep.finish();
}
