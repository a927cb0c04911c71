//! Command-line workflows: synthetic data, training, evaluation, imputation
//! and uncertainty reports. Every command writes into `--out-dir` and ends
//! with a `manifest.txt` listing each produced file with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use cdnet::data::{
    load_csv, normalize, split, synth_generate, write_csv, Dataset, Journey, NormStats, SynthConfig, DEFAULT_RATIOS,
};
use cdnet::evaluation::{
    aleatoric_analysis, epistemic_analysis, histogram_csv, ran_report, representations, EnsembleConfig, EnsembleReport,
    FfnEnsemble,
};
use cdnet::metrics::MetricsReport;
use cdnet::rng::{stream, Stream};
use cdnet::training::log_csv;
use cdnet::{train, Cdnet, Checkpoint, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cdnet::Error),
    #[error("unknown journey `{0}`")]
    UnknownJourney(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(cdnet::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cdnet",
    version,
    about = "Joint imputation and risk prediction for incomplete clinical time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with state-dependent missingness.
    Synth(SynthArgs),
    /// Split, normalize and train one model per seed.
    Train(TrainArgs),
    /// Score checkpoints on a data split.
    Eval(EvalArgs),
    /// Write imputed journeys in raw units.
    Impute(ImputeArgs),
    /// Epistemic, aleatoric and ensemble reports for chosen journeys.
    Uncertainty(UncertaintyArgs),
    /// Attention scores of imputed cells for chosen journeys.
    RanReport(RanReportArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Directory receiving every output file and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Values CSV: patient_id, t, then one column per feature.
    #[arg(long)]
    pub values: PathBuf,
    /// Labels CSV: patient_id, label.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutDir,
    /// File of `key=value` generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of journeys.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of features.
    #[arg(long)]
    pub features: Option<usize>,
    /// Records per journey.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Healthy-state missing probability: one value, or one per feature separated by commas.
    #[arg(long)]
    pub missing_rate: Option<String>,
    /// Logit shift of the missing probability in the sick state.
    #[arg(long)]
    pub mnar_strength: Option<f64>,
    /// Probability of flipping each label.
    #[arg(long)]
    pub label_noise: Option<f64>,
    /// Extra generator setting as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub data: DataArgs,
    /// File of `key=value` training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// cdnet, cdnet_alpha, cdnet_beta or mean_baseline.
    #[arg(long)]
    pub variant: Option<String>,
    /// First seed; run `k` uses seed + k for its split and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of repeated runs.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the imputation loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Extra setting as `key=value`, e.g. `hidden=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    /// Every journey in the files, normalized with the checkpoint statistics.
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint file; repeatable.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Split scored, rebuilt from each checkpoint's seed.
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub split: Part,
    /// Task name in the report.
    #[arg(long, default_value = "mortality")]
    pub task: String,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Journey to report on; repeatable.
    #[arg(long = "journey", value_name = "PATIENT_ID", required = true)]
    pub journeys: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Draw imputations with this seed instead of using the mixture mean.
    #[arg(long)]
    pub sample_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Predictor-noise draws for the aleatoric report.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Ensemble members; 0 skips the ensemble comparison.
    #[arg(long, default_value_t = 100)]
    pub members: usize,
    /// Training epochs of each ensemble member.
    #[arg(long, default_value_t = 30)]
    pub member_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RanReportArgs {
    #[command(flatten)]
    pub input: ModelInput,
}

/// Collects written files for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(io(&path))
    }

    fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.files.sort();
        self.files.dedup();
        let mut manifest = String::new();
        for name in &self.files {
            let path = self.dir.join(name);
            let bytes = fs::read(&path).map_err(io(&path))?;
            manifest.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
        }
        let path = self.dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(io(&path))?;
        Ok(self.files.iter().map(|f| self.dir.join(f)).chain([path]).collect())
    }
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{s}`")))
}

fn config_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| split_kv(l).map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Config file first, then `--set` pairs, then named flags.
fn layered(
    config: &Option<PathBuf>,
    set: &[String],
    flags: Vec<(&str, Option<String>)>,
) -> Result<Vec<(String, String)>> {
    let mut pairs = match config {
        Some(p) => config_lines(p)?,
        None => Vec::new(),
    };
    for s in set {
        let (k, v) = split_kv(s)?;
        pairs.push((k.to_string(), v.to_string()));
    }
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(pairs)
}

pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let s = |v: Option<_>| v.map(|x: f64| x.to_string());
    let flags = vec![
        ("n_journeys", args.n.map(|v| v.to_string())),
        ("n_features", args.features.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("missing_rate", args.missing_rate.clone()),
        ("mnar_strength", s(args.mnar_strength)),
        ("label_noise", s(args.label_noise)),
    ];
    let mut cfg = SynthConfig::default();
    for (k, v) in layered(&args.config, &args.set, flags)? {
        cfg.apply(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pairs_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let cfg = synth_config(args)?;
    let (ds, _) = synth_generate(&cfg)?;
    let mut out = Outputs::new(&args.out.out_dir)?;
    let values = out.path("values.csv");
    let labels = out.path("labels.csv");
    write_csv(&ds, &values, &labels)?;
    out.write("generator.txt", pairs_text(&cfg.to_pairs()))?;
    out.finish()
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let flags = vec![
        ("variant", args.variant.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("patience", args.patience.map(|v| v.to_string())),
    ];
    let mut cfg = TrainConfig::default();
    for (k, v) in layered(&args.config, &args.set, flags)? {
        cfg.apply(&k, &v)?;
    }
    Ok(cfg)
}

/// Train, validation and test parts of `ds` for `seed`, normalized with
/// training statistics.
pub fn prepare(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let parts = split(ds, DEFAULT_RATIOS, seed)?;
    let stats = NormStats::fit(&parts.train)?;
    Ok((
        normalize(&parts.train, Some(&stats))?,
        normalize(&parts.val, Some(&stats))?,
        normalize(&parts.test, Some(&stats))?,
    ))
}

fn load(data: &DataArgs) -> Result<Dataset> {
    Ok(load_csv(&data.values, &data.labels)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut base = train_config(args)?;
    let ds = load(&args.data)?;
    if base.model.n_features != ds.n_features() {
        base.model.n_features = ds.n_features();
    }
    base.validate()?;

    let mut out = Outputs::new(&args.out.out_dir)?;
    out.write("config.txt", base.to_text())?;
    let mut report = MetricsReport::new(base.model.variant.as_str());
    for k in 0..args.seeds {
        let cfg = TrainConfig {
            seed: base.seed + k,
            ..base.clone()
        };
        let (train_ds, val_ds, test_ds) = prepare(&ds, cfg.seed)?;
        let outcome = train::<f64>(&cfg, &train_ds, &val_ds)?;
        let ckpt = Checkpoint::from_outcome(&cfg, &outcome, train_ds.normalization.clone());
        ckpt.save(&out.path(&format!("checkpoint-seed{}.cdn", cfg.seed)))?;
        out.write(&format!("log-seed{}.csv", cfg.seed), log_csv(&outcome.log))?;
        report.record(cfg.seed, &outcome.model.scores(&test_ds)?, &test_ds.labels())?;
    }
    out.write("report.csv", report.to_csv()?)?;
    out.write("report.txt", report.to_string())?;
    out.finish()
}

/// The requested part of `ds`, normalized with the checkpoint statistics.
pub fn checkpoint_data(ckpt: &Checkpoint, ds: &Dataset, part: Part) -> Result<Dataset> {
    let stats = ckpt
        .normalization
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint has no normalization statistics".into()))?;
    if stats.mean.len() != ds.n_features() || ckpt.config.model.n_features != ds.n_features() {
        return Err(cdnet::Error::dim(
            "checkpoint features",
            &[ckpt.config.model.n_features],
            &[ds.n_features()],
        )
        .into());
    }
    let raw = match part {
        Part::All => ds.clone(),
        _ => {
            let parts = split(ds, DEFAULT_RATIOS, ckpt.config.seed)?;
            match part {
                Part::Train => parts.train,
                Part::Val => parts.val,
                _ => parts.test,
            }
        }
    };
    Ok(normalize(&raw, Some(stats))?)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let ds = load(&args.data)?;
    let mut report = MetricsReport::new(&args.task);
    for path in &args.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let model: Cdnet = ckpt.model()?;
        let part = checkpoint_data(&ckpt, &ds, args.split)?;
        report.record(ckpt.config.seed, &model.scores(&part)?, &part.labels())?;
    }
    let mut out = Outputs::new(&args.out.out_dir)?;
    out.write("metrics.csv", report.to_csv()?)?;
    out.write("metrics.txt", report.to_string())?;
    out.finish()
}

struct Loaded {
    ckpt: Checkpoint,
    model: Cdnet,
    /// Every journey, normalized with the checkpoint statistics.
    data: Dataset,
    raw: Dataset,
}

fn load_model(input: &ModelInput) -> Result<Loaded> {
    let raw = load(&input.data)?;
    let ckpt = Checkpoint::load(&input.checkpoint)?;
    let model = ckpt.model()?;
    let data = checkpoint_data(&ckpt, &raw, Part::All)?;
    for id in &input.journeys {
        if data.find(id).is_none() {
            return Err(CliError::UnknownJourney(id.clone()));
        }
    }
    Ok(Loaded { ckpt, model, data, raw })
}

fn journey<'a>(ds: &'a Dataset, id: &str) -> Result<&'a Journey> {
    ds.find(id).ok_or_else(|| CliError::UnknownJourney(id.to_string()))
}

pub fn cmd_impute(args: &ImputeArgs) -> Result<Vec<PathBuf>> {
    let l = load_model(&args.input)?;
    let stats = l.ckpt.normalization.clone().expect("checked on load");
    let mut rng = args.sample_seed.map(|s| stream(s, Stream::Xi));
    let mut out = Outputs::new(&args.input.out.out_dir)?;
    let header = format!("patient_id,t,{}\n", l.data.feature_names.join(","));
    let (mut values, mut variance) = (header.clone(), header);
    for id in &args.input.journeys {
        let j = journey(&l.data, id)?;
        let raw = journey(&l.raw, id)?;
        let imp = l.model.impute(j, rng.as_mut())?;
        for t in 0..j.steps() {
            values.push_str(&format!("{id},{t}"));
            variance.push_str(&format!("{id},{t}"));
            for i in 0..j.n_features() {
                let v = match raw.value(i, t) {
                    Some(v) => v,
                    None => imp.combined.get(i, t) * stats.std[i] + stats.mean[i],
                };
                values.push_str(&format!(",{v}"));
                match (&imp.mixed_var, j.is_observed(i, t)) {
                    (Some(var), false) => variance.push_str(&format!(",{}", var.get(i, t) * stats.std[i].powi(2))),
                    _ => variance.push(','),
                }
            }
            values.push('\n');
            variance.push('\n');
        }
    }
    out.write("imputed.csv", values)?;
    out.write("mixed_variance.csv", variance)?;
    out.finish()
}

pub fn cmd_uncertainty(args: &UncertaintyArgs) -> Result<Vec<PathBuf>> {
    let l = load_model(&args.input)?;
    let mut out = Outputs::new(&args.input.out.out_dir)?;
    let ensemble = if args.members > 0 {
        let train_part = checkpoint_data(&l.ckpt, &l.raw, Part::Train)?;
        let reps = representations(&l.model, &train_part)?;
        let cfg = EnsembleConfig {
            members: args.members,
            epochs: args.member_epochs,
            seed: args.seed,
            ..EnsembleConfig::default()
        };
        Some(FfnEnsemble::fit(&reps, &train_part.labels(), &cfg)?)
    } else {
        None
    };
    let mut summary = String::from(
        "patient_id,epistemic_mean,epistemic_spread,aleatoric_mean,aleatoric_std,aleatoric_class_overlap,ensemble_overlap\n",
    );
    for id in &args.input.journeys {
        let j = journey(&l.data, id)?;
        let epi = epistemic_analysis(&l.model, j)?;
        let ale = aleatoric_analysis(&l.model, j, args.draws, args.seed)?;
        out.write(&format!("epistemic-{id}.csv"), epi.to_csv())?;
        out.write(&format!("aleatoric-{id}.csv"), ale.to_csv())?;
        let mut series = vec![
            ("mdn_components", &epi.histogram),
            ("aleatoric_p0", &ale.histograms[0]),
            ("aleatoric_p1", &ale.histograms[1]),
        ];
        let ens = match &ensemble {
            Some(e) => {
                let rep: Vec<f64> = l.model.overall(j)?.into_data();
                Some(EnsembleReport::new(e, &rep, id)?)
            }
            None => None,
        };
        let overlap = match &ens {
            Some(r) => {
                out.write(&format!("ensemble-{id}.csv"), r.to_csv())?;
                series.push(("ffn_ensemble", &r.histogram));
                r.histogram.overlap(&epi.histogram).to_string()
            }
            None => String::new(),
        };
        out.write(&format!("histograms-{id}.csv"), histogram_csv(&series))?;
        summary.push_str(&format!(
            "{id},{},{},{},{},{},{overlap}\n",
            epi.mean, epi.spread, ale.mean, ale.std, ale.overlap
        ));
    }
    out.write("uncertainty.csv", summary)?;
    out.finish()
}

pub fn cmd_ran_report(args: &RanReportArgs) -> Result<Vec<PathBuf>> {
    let l = load_model(&args.input)?;
    let mut out = Outputs::new(&args.input.out.out_dir)?;
    for id in &args.input.journeys {
        let r = ran_report(&l.model, journey(&l.data, id)?, &l.data.feature_names)?;
        out.write(&format!("ran-{id}.csv"), r.to_csv())?;
        out.write(&format!("ran-grid-{id}.csv"), r.to_grid_csv())?;
    }
    out.finish()
}

/// Runs one parsed command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Uncertainty(a) => cmd_uncertainty(a),
        Command::RanReport(a) => cmd_ran_report(a),
    }
}
