//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.
//! Run with `cargo test --release -p cdnet-cli --test acceptance -- --nocapture`
//! to see the lines and their details.

use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use cdnet::data::{synth_generate, Dataset, Journey, SynthConfig};
use cdnet::evaluation::{epistemic_analysis, representations, EnsembleConfig, EnsembleReport, FfnEnsemble};
use cdnet::imputer::{mixture_sample, MixtureVars};
use cdnet::metrics::{auprc, auroc, MetricsReport};
use cdnet::model::{LossWeights, Noise};
use cdnet::numerics::{finite_diff_check_with, Stencil, Tape, Tensor};
use cdnet::predictor::class_sample;
use cdnet::ran::{attention_weights, unreliability};
use cdnet::rng::{normal_tensor, stream, Rng, Stream};
use cdnet::{build_variant, train, Cdnet, ModelConfig, TrainConfig, Variant};
use cdnet_cli::{prepare, run, Cli};
use clap::Parser;
use rand::Rng as _;

/// Serializes the criteria so wall-clock budgets are measured without
/// competing tests on the same core.
static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {n}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

// ---------------------------------------------------------------- 1

/// A 2 x 3 synthetic journey, centered so activations stay moderate.
fn gradient_journey(seed: u64) -> Journey {
    let cfg = SynthConfig {
        n_journeys: 1,
        n_features: 2,
        steps: 3,
        seed,
        ..SynthConfig::default()
    }
    .uniform_rate(0.4);
    let j = synth_generate(&cfg).unwrap().0.journeys.remove(0);
    let cells = (0..2)
        .flat_map(|i| (0..3).map(move |t| (i, t)))
        .map(|(i, t)| j.value(i, t).map(|v| (v - 10.0 * (i as f64 + 1.0)) / 2.0))
        .collect();
    Journey::new("g", 2, 3, cells, j.label).unwrap()
}

#[test]
fn criterion_1_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ModelConfig {
        variant: Variant::Cdnet,
        n_features: 2,
        d_emb: 4,
        hidden: 4,
        d_head: 4,
        components: 2,
        d_z: 4,
        pred_components: 3,
        ..ModelConfig::default()
    };
    let weights = LossWeights {
        prediction: 1.0,
        imputation: 1.0,
        masked_mse: 0.0,
    };
    let mut worst: f64 = 0.0;
    let mut groups = 0;
    for seed in 0..5u64 {
        let mut model: Cdnet = build_variant(&cfg, seed).unwrap();
        let mut rng = stream(seed, Stream::Init);
        for id in model.params().ids().collect::<Vec<_>>() {
            let shape = model.params().get(id).shape().to_vec();
            model
                .params_mut()
                .set(id, normal_tensor(&mut rng, shape[0], shape[1], 0.5))
                .unwrap();
        }
        let j = gradient_journey(seed);
        let report = finite_diff_check_with(model.params(), 1e-3, Stencil::Richardson, |tape, b| {
            let trace = model.forward(tape, b, &j, &mut Noise::mean())?;
            model.objective(tape, b, &trace, j.label, weights)
        })
        .unwrap();
        groups = report.checked.max(groups);
        worst = worst.max(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    assert!(verdict(
        "1",
        pass,
        &format!(
            "max relative error {worst:.2e} over {groups} parameters x 5 seeds in {:.1}s",
            elapsed.as_secs_f64()
        )
    ));
}

// ---------------------------------------------------------------- 2

fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice_u, mut pairs) = (0u128, 0u128);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice_u += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice_u as f64 / (2 * pairs) as f64
}

fn brute_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let total = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev, mut ap) = (0.0, 0.0);
    for th in thresholds {
        let picked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let tp = picked.iter().filter(|&&i| labels[i] == 1).count() as f64;
        ap += (tp / total - prev) * tp / picked.len() as f64;
        prev = tp / total;
    }
    ap
}

#[test]
fn criterion_2_metric_oracles() {
    let _g = serial();
    let mut rng = stream(2, Stream::Synth);
    let (mut roc_mismatch, mut pr_worst, mut instances) = (0, 0f64, 0);
    while instances < 1000 {
        let n = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 7.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1u8)).collect();
        let pos = labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        instances += 1;
        if auroc(&scores, &labels).unwrap().to_bits() != brute_auroc(&scores, &labels).to_bits() {
            roc_mismatch += 1;
        }
        pr_worst = pr_worst.max((auprc(&scores, &labels).unwrap() - brute_auprc(&scores, &labels)).abs());
    }
    let hand = auroc(&[0.9, 0.8, 0.4, 0.2], &[1, 0, 1, 0]).unwrap();
    let pass = roc_mismatch == 0 && pr_worst <= 1e-12 && hand == 0.75;
    assert!(verdict(
        "2",
        pass,
        &format!(
            "{instances} instances: {roc_mismatch} AUROC mismatches, max AUPRC gap {pr_worst:.1e}; hand example {hand}"
        )
    ));
}

// ---------------------------------------------------------------- 3

struct Mixture {
    beta: Vec<f64>,
    mu: Tensor<f64>,
    var: Tensor<f64>,
}

fn random_mixture(rng: &mut Rng, k: usize, n: usize) -> Mixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let var = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
    Mixture {
        beta: raw.iter().map(|b| b / total).collect(),
        mu: normal_tensor(rng, k, n, 1.5),
        var,
    }
}

impl Mixture {
    fn vars(&self, tape: &Tape<f64>) -> MixtureVars {
        MixtureVars {
            beta: tape.constant(Tensor::column(self.beta.clone())),
            mu: tape.constant(self.mu.clone()),
            var: tape.constant(self.var.clone()),
        }
    }

    /// `Σβ_k a_k` and `Σβ_k² b_k` for per-component columns `a`, `b`.
    fn closed(&self, mean_of: impl Fn(usize) -> f64, var_of: impl Fn(usize) -> f64) -> (f64, f64) {
        let k = self.beta.len();
        (
            (0..k).map(|c| self.beta[c] * mean_of(c)).sum(),
            (0..k).map(|c| self.beta[c].powi(2) * var_of(c)).sum(),
        )
    }
}

/// Returns (mean z-score, relative variance error).
fn moments(samples: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
    ((m - mean) / (var / n).sqrt(), (v - var).abs() / var)
}

#[test]
fn criterion_3_mixture_sampling() {
    let _g = serial();
    const DRAWS: usize = 100_000;
    let mut rng = stream(3, Stream::Xi);
    let (k, n) = (4, 3);
    let imp = random_mixture(&mut rng, k, n);
    let mut per_feature = vec![Vec::with_capacity(DRAWS); n];
    for _ in 0..DRAWS {
        let tape = Tape::new();
        let xi = tape.constant(normal_tensor(&mut rng, k, n, 1.0));
        let x = mixture_sample(&tape, &imp.vars(&tape), xi).unwrap();
        for (i, v) in tape.value(x).data().iter().enumerate() {
            per_feature[i].push(*v);
        }
    }
    let mut details = Vec::new();
    let mut pass = true;
    for (i, samples) in per_feature.iter().enumerate() {
        let (mean, var) = imp.closed(|c| imp.mu.get(c, i), |c| imp.var.get(c, i));
        let (z, rel) = moments(samples, mean, var);
        pass &= z.abs() < 4.0 && rel < 0.05;
        details.push(format!("imputation[{i}] z={z:+.2} var err={:.2}%", 100.0 * rel));
    }

    // The class probabilities are a softmax of pooled logits, so their log
    // ratio recovers the pooled logit difference.
    let cls = random_mixture(&mut rng, 5, 2);
    let mut diffs = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        let tape = Tape::new();
        let eta = tape.constant(normal_tensor(&mut rng, 5, 2, 1.0));
        let y = class_sample(&tape, &cls.vars(&tape), eta).unwrap();
        let p = tape.value(y).data().to_vec();
        diffs.push(p[1].ln() - p[0].ln());
    }
    let (mean, var) = cls.closed(
        |c| cls.mu.get(c, 1) - cls.mu.get(c, 0),
        |c| cls.var.get(c, 1) + cls.var.get(c, 0),
    );
    let (z, rel) = moments(&diffs, mean, var);
    pass &= z.abs() < 4.0 && rel < 0.05;
    details.push(format!("class logit z={z:+.2} var err={:.2}%", 100.0 * rel));
    assert!(verdict("3", pass, &format!("{DRAWS} draws; {}", details.join("; "))));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_ran_anti_monotonicity() {
    let _g = serial();
    let mut rng = stream(4, Stream::Uncertainty);
    let (mut violations, mut pairs) = (0usize, 0usize);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=8);
        let t = rng.random_range(1..=6);
        let mask: Vec<bool> = (0..n * t).map(|_| rng.random::<f64>() < 0.4).collect();
        let var = Tensor::new(vec![n, t], (0..n * t).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let tape = Tape::new();
        let phi = unreliability(&tape, mask.into(), tape.constant(var)).unwrap();
        let gamma = attention_weights(
            &tape,
            tape.constant(Tensor::identity(n)),
            tape.constant(Tensor::zeros(&[n, 1])),
            phi,
        )
        .unwrap();
        let (phi, gamma) = (tape.value(phi), tape.value(gamma));
        for c in 0..t {
            for i in 0..n {
                for j in 0..n {
                    if phi.get(i, c) > phi.get(j, c) {
                        pairs += 1;
                        if gamma.get(i, c) >= gamma.get(j, c) {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(verdict(
        "4",
        violations == 0,
        &format!("10000 grids, {pairs} ordered pairs, {violations} violations")
    ));
}

// ---------------------------------------------------------------- 5 and 6

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn desk_data(seed: u64, n: usize) -> Dataset {
    let cfg = SynthConfig {
        n_journeys: n,
        n_features: 8,
        steps: 24,
        mnar_strength: 1.0,
        seed,
        p_onset: 0.02,
        p_recover: 0.0,
        ..SynthConfig::default()
    }
    .uniform_rate(0.6);
    synth_generate(&cfg).unwrap().0
}

fn desk_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            variant,
            d_emb: 16,
            hidden: 16,
            d_head: 16,
            d_z: 16,
            pred_components: 10,
            ..ModelConfig::default()
        },
        seed,
        epochs: 30,
        patience: 8,
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}

struct Comparison {
    reports: Vec<MetricsReport>,
    /// Trained cdnet model and its test split, per seed.
    cdnet: Vec<(Cdnet, Dataset)>,
    elapsed: Duration,
}

fn comparison() -> &'static Comparison {
    static RUNS: OnceLock<Comparison> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let variants = [
            Variant::Cdnet,
            Variant::CdnetBeta,
            Variant::CdnetAlpha,
            Variant::MeanBaseline,
        ];
        let mut reports: Vec<MetricsReport> = variants.iter().map(|v| MetricsReport::new(v.as_str())).collect();
        let mut cdnet = Vec::new();
        for seed in SEEDS {
            let (train_ds, val_ds, test_ds) = prepare(&desk_data(seed, 2000), seed).unwrap();
            for (v, report) in variants.iter().zip(&mut reports) {
                let out = train::<f64>(&desk_config(*v, seed), &train_ds, &val_ds).unwrap();
                report
                    .record(seed, &out.model.scores(&test_ds).unwrap(), &test_ds.labels())
                    .unwrap();
                if *v == Variant::Cdnet {
                    cdnet.push((out.model, test_ds.clone()));
                }
            }
        }
        Comparison {
            reports,
            cdnet,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_5_directional_comparison() {
    let _g = serial();
    let c = comparison();
    let mean = |i: usize| {
        (
            c.reports[i].auroc_summary().unwrap().0,
            c.reports[i].auprc_summary().unwrap().0,
        )
    };
    let (cd, beta, alpha, base) = (mean(0), mean(1), mean(2), mean(3));
    for r in &c.reports {
        print!("{r}");
    }
    let gap = cd.0 - base.0;
    let a = gap >= 0.02;
    let b = cd.1 >= beta.1 && beta.1 >= alpha.1;
    let in_time = c.elapsed < Duration::from_secs(20 * 60);
    verdict(
        "5a",
        a,
        &format!(
            "cdnet AUROC {:.4} vs mean_baseline {:.4}: gap {gap:+.4} (need >= 0.02)",
            cd.0, base.0
        ),
    );
    verdict(
        "5b",
        b,
        &format!(
            "AUPRC cdnet {:.4}, cdnet_beta {:.4}, cdnet_alpha {:.4} (need non-increasing)",
            cd.1, beta.1, alpha.1
        ),
    );
    verdict(
        "5-time",
        in_time,
        &format!("20 runs in {:.0}s (limit 1200s)", c.elapsed.as_secs_f64()),
    );
    assert!(a && b && in_time, "criterion 5 failed");
}

/// Median β-weighted spread of the component class probabilities.
fn median_spread(model: &Cdnet, ds: &Dataset) -> f64 {
    let mut s: Vec<f64> = ds
        .journeys
        .iter()
        .map(|j| epistemic_analysis(model, j).unwrap().spread)
        .collect();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[test]
fn criterion_6_epistemic_spread_shrinks_with_data() {
    let _g = serial();
    let c = comparison();
    let mut lower = 0;
    let mut rows = Vec::new();
    for (seed, (large, test_ds)) in SEEDS.iter().zip(&c.cdnet) {
        // The small run keeps the first 10% of the same training and
        // validation journeys and is scored on the same test journeys.
        let raw = desk_data(*seed, 2000);
        let parts = cdnet::data::split(&raw, cdnet::data::DEFAULT_RATIOS, *seed).unwrap();
        let small_train = parts.train.head(parts.train.len() / 10);
        let small_val = parts.val.head(parts.val.len() / 10);
        let stats = cdnet::data::NormStats::fit(&small_train).unwrap();
        let norm = |d: &Dataset| cdnet::data::normalize(d, Some(&stats)).unwrap();
        let small = train::<f64>(
            &desk_config(Variant::Cdnet, *seed),
            &norm(&small_train),
            &norm(&small_val),
        )
        .unwrap();
        let small_spread = median_spread(&small.model, &norm(&parts.test));
        let large_spread = median_spread(large, test_ds);
        if large_spread < small_spread {
            lower += 1;
        }
        rows.push(format!("seed {seed}: {small_spread:.4} -> {large_spread:.4}"));
    }
    assert!(verdict(
        "6",
        lower >= 4,
        &format!(
            "spread lower with 2000 journeys in {lower}/5 seeds ({})",
            rows.join(", ")
        )
    ));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_ensemble_comparison_pipeline() {
    let _g = serial();
    let start = Instant::now();
    let seed = 1;
    let (train_ds, val_ds, test_ds) = prepare(&desk_data(seed, 2000), seed).unwrap();
    let mut cfg = desk_config(Variant::Cdnet, seed);
    cfg.model.pred_components = 100;
    let model = train::<f64>(&cfg, &train_ds, &val_ds).unwrap().model;
    let reps = representations(&model, &train_ds).unwrap();
    let ensemble = FfnEnsemble::fit(&reps, &train_ds.labels(), &EnsembleConfig::default()).unwrap();
    let mut overlaps = Vec::new();
    for j in test_ds.journeys.iter().take(10) {
        let mdn = epistemic_analysis(&model, j).unwrap();
        let rep = model.overall(j).unwrap().into_data();
        let ffn = EnsembleReport::new(&ensemble, &rep, &j.patient_id).unwrap();
        overlaps.push(ffn.histogram.overlap(&mdn.histogram));
    }
    let elapsed = start.elapsed();
    let in_range = overlaps.iter().all(|o| (0.0..=1.0).contains(o));
    let shown: Vec<String> = overlaps.iter().map(|o| format!("{o:.2}")).collect();
    assert!(verdict(
        "7",
        in_range && ensemble.len() == 100 && elapsed < Duration::from_secs(600),
        &format!(
            "100 FFNs vs 100 components, overlaps [{}] in {:.0}s (limit 600s)",
            shown.join(" "),
            elapsed.as_secs_f64()
        )
    ));
}

// ---------------------------------------------------------------- 8

fn train_cli(data: &Path, out: &Path) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let args = [
        "cdnet".to_string(),
        "train".into(),
        "--values".into(),
        s(&data.join("values.csv")),
        "--labels".into(),
        s(&data.join("labels.csv")),
        "--out-dir".into(),
        s(out),
        "--seeds".into(),
        "2".into(),
        "--epochs".into(),
        "3".into(),
        "--set".into(),
        "hidden=8".into(),
        "--set".into(),
        "d_emb=8".into(),
        "--set".into(),
        "pred_components=10".into(),
    ];
    run(&Cli::try_parse_from(args).unwrap()).unwrap();
}

#[test]
fn criterion_8_train_is_deterministic() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run(&Cli::try_parse_from([
        "cdnet",
        "synth",
        "--n",
        "200",
        "--seed",
        "8",
        "--out-dir",
        data.to_str().unwrap(),
    ])
    .unwrap())
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_cli(&data, &a);
    train_cli(&data, &b);
    let files = [
        "checkpoint-seed0.cdn",
        "checkpoint-seed1.cdn",
        "report.csv",
        "report.txt",
        "manifest.txt",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    assert!(verdict(
        "8",
        differing.is_empty(),
        &format!(
            "{} artifacts compared byte for byte, differing: {differing:?}",
            files.len()
        )
    ));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_real_extract_optional() {
    let _g = serial();
    let (Ok(values), Ok(labels)) = (std::env::var("CDNET_VALUES"), std::env::var("CDNET_LABELS")) else {
        println!("criterion 9: SKIP  set CDNET_VALUES and CDNET_LABELS to run the 10-seed evaluation");
        return;
    };
    let ds = cdnet::data::load_csv(Path::new(&values), Path::new(&labels)).unwrap();
    let mut report = MetricsReport::new("mortality");
    for seed in 0..10 {
        let (train_ds, val_ds, test_ds) = prepare(&ds, seed).unwrap();
        let cfg = TrainConfig {
            seed,
            model: ModelConfig {
                n_features: ds.n_features(),
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train::<f64>(&cfg, &train_ds, &val_ds).unwrap();
        report
            .record(seed, &out.model.scores(&test_ds).unwrap(), &test_ds.labels())
            .unwrap();
    }
    let (m, s) = report.auroc_summary().unwrap();
    // Non-gating: the outcome is reported, never asserted.
    verdict(
        "9",
        (m - 0.7673).abs() <= 0.03,
        &format!("AUROC {}", MetricsReport::cell(m, s)),
    );
}
