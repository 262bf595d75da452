//! The `sfda` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs_shift, load_csv, save_csv, two_moons_shift, Dataset};
use crate::diagnostics::{bound_rhs, empirical_smoothness, histogram, tv_discrete, BoundParameters, HistogramGrid};
use crate::engine::{adapt_target, evaluate, train_source, AdaptationConfig};
use crate::error::Error;
use crate::losses::JnTarget;
use crate::model::EncoderClassifier;

pub const CONFIG_ECHO: &str = "config_echo.toml";
pub const MODEL_SOURCE: &str = "model_source.json";
pub const MODEL_ADAPTED: &str = "model_adapted.json";
pub const METRICS: &str = "metrics.csv";
pub const SOURCE_METRICS: &str = "source_metrics.csv";
pub const TIMING_LOG: &str = "timing.log";
pub const SUMMARY: &str = "summary.json";
pub const ABLATION: &str = "ablation.csv";
pub const BOUND_REPORT: &str = "bound.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation with Jacobian-norm regularization")]
pub struct Cli {
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source.csv and target.csv.
    GenData(GenDataArgs),
    /// Train the source model on labeled source data.
    TrainSource(RunArgs),
    /// Adapt a trained source model to the target domain.
    Adapt(AdaptArgs),
    /// Report the accuracy of a model on a labeled dataset.
    Eval(EvalArgs),
    /// Compare alignment-only, smoothness-only and full objectives over seeds.
    Ablate(AblateArgs),
    /// Evaluate every term of the smoothness generalization bound.
    Bound(BoundArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// two-moons or blobs; falls back to --generator or the config file.
    #[arg(value_name = "GENERATOR")]
    pub kind: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// Generate data instead of reading CSV files.
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Rotation of the target domain in degrees (two-moons).
    #[arg(long)]
    pub rotate: Option<f64>,
    /// Number of classes (blobs).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    /// Comma-separated target shift (blobs).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub shift: Option<Vec<f64>>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_new_layer_mult: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub source_epochs: Option<usize>,
    #[arg(long)]
    pub adapt_epochs: Option<usize>,
    #[arg(long)]
    pub jn_samples: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// probs or logits.
    #[arg(long)]
    pub jn_target: Option<String>,
    #[arg(long)]
    pub pseudo_passes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub bottleneck_dim: Option<usize>,
    #[arg(long)]
    pub probe_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Source model; defaults to <out>/model_source.json.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled CSV file.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated seeds shared by every configuration.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Smoothness radius r.
    #[arg(long, default_value_t = 0.05)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.05)]
    pub theta: f64,
    /// Histogram bins per input dimension for the TV estimate.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Loss upper bound M (1 for the 0-1 loss).
    #[arg(long, default_value_t = 1.0)]
    pub loss_bound: f64,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How to obtain the source and target domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub generator: Option<String>,
    pub n: usize,
    pub noise: f64,
    pub rotate: f64,
    pub classes: usize,
    pub separation: f64,
    pub shift: Vec<f64>,
    pub scale: f64,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            generator: None,
            n: 600,
            noise: 0.1,
            rotate: 30.0,
            classes: 3,
            separation: 4.0,
            shift: vec![2.0, 1.0],
            scale: 1.0,
            source: None,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub adaptation: AdaptationConfig,
    pub data: DataSpec,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl DataArgs {
    fn apply(&self, spec: &mut DataSpec) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    spec.$field = v.clone();
                }
            )*};
        }
        set!(n, noise, rotate, classes, separation, shift, scale);
        if self.generator.is_some() {
            spec.generator = self.generator.clone();
        }
        if self.source.is_some() {
            spec.source = self.source.clone();
        }
        if self.target.is_some() {
            spec.target = self.target.clone();
        }
    }
}

impl HyperArgs {
    fn apply(&self, c: &mut AdaptationConfig) -> CliResult<()> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        set!(
            lambda,
            beta,
            gamma,
            alpha,
            lr,
            lr_new_layer_mult,
            momentum,
            batch_size,
            source_epochs,
            adapt_epochs,
            jn_samples,
            pseudo_passes,
            hidden_dims,
            bottleneck_dim,
            probe_points,
            seed
        );
        if let Some(s) = self.sigma {
            c.sigma = Some(s);
        }
        if let Some(t) = &self.jn_target {
            c.jn_target = match t.as_str() {
                "probs" => JnTarget::Probs,
                "logits" => JnTarget::Logits,
                other => return Err(CliError::Usage(format!("unknown JN target {other:?} (probs or logits)"))),
            };
        }
        Ok(())
    }
}

fn base_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn effective(cli_config: Option<&Path>, run: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = base_config(cli_config)?;
    run.data.apply(&mut cfg.data);
    run.hyper.apply(&mut cfg.adaptation)?;
    if run.out.is_some() {
        cfg.out_dir = run.out.clone();
    }
    cfg.adaptation
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out or out_dir)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Generated `(source, target)` for `seed`, labels included.
pub fn generate(spec: &DataSpec, name: &str, seed: u64) -> CliResult<(Dataset, Dataset)> {
    Ok(match name {
        "two-moons" => two_moons_shift(spec.n, spec.noise, spec.rotate, seed)?,
        "blobs" => gen_blobs_shift(spec.n, spec.classes, spec.separation, &spec.shift, spec.scale, seed)?,
        other => return Err(CliError::Usage(format!("unknown generator {other:?} (two-moons or blobs)"))),
    })
}

enum Need {
    Source,
    Target,
    Both,
}

/// Loads the requested domains from exactly one of generator or files.
fn domains(spec: &DataSpec, seed: u64, need: Need, num_classes: Option<usize>) -> CliResult<(Option<Dataset>, Option<Dataset>)> {
    let has_files = spec.source.is_some() || spec.target.is_some();
    match (&spec.generator, has_files) {
        (Some(_), true) => Err(CliError::Usage(
            "give either a generator or data files, not both".into(),
        )),
        (Some(name), false) => {
            let (s, t) = generate(spec, name, seed)?;
            Ok((Some(s), Some(t)))
        }
        (None, _) => {
            let want_source = matches!(need, Need::Source | Need::Both);
            let want_target = matches!(need, Need::Target | Need::Both);
            let load = |p: &Option<PathBuf>, role: &str, wanted: bool| -> CliResult<Option<Dataset>> {
                match (p, wanted) {
                    (Some(p), true) => Ok(Some(load_csv(p, num_classes)?)),
                    (None, true) => Err(CliError::Usage(format!("missing --{role} data (or --generator)"))),
                    _ => Ok(None),
                }
            };
            Ok((load(&spec.source, "source", want_source)?, load(&spec.target, "target", want_target)?))
        }
    }
}

/// Label of the objective a configuration optimizes.
pub fn objective_label(c: &AdaptationConfig) -> &'static str {
    match (c.lambda == 0.0, c.beta == 0.0 && c.gamma == 0.0) {
        (true, true) => "no-op (all weights zero)",
        (true, false) => "baseline (SHOT-equivalent)",
        (false, true) => "smoothness only (JN)",
        (false, false) => "full (alignment + smoothness)",
    }
}

fn cmd_gen_data(config: Option<&Path>, args: &GenDataArgs) -> CliResult<String> {
    let mut cfg = base_config(config)?;
    args.data.apply(&mut cfg.data);
    if let Some(seed) = args.seed {
        cfg.adaptation.seed = seed;
    }
    if args.out.is_some() {
        cfg.out_dir = args.out.clone();
    }
    if args.kind.is_some() {
        cfg.data.generator = args.kind.clone();
    }
    let name = cfg
        .data
        .generator
        .clone()
        .ok_or_else(|| CliError::Usage("gen-data needs a generator name".into()))?;
    let dir = out_dir(&cfg)?;
    let (source, target) = generate(&cfg.data, &name, cfg.adaptation.seed)?;
    save_csv(&source, &dir.join("source.csv"))?;
    save_csv(&target, &dir.join("target.csv"))?;
    Ok(format!(
        "wrote {} source and {} target rows to {}\n",
        source.len(),
        target.len(),
        dir.display()
    ))
}

fn cmd_train_source(config: Option<&Path>, run: &RunArgs) -> CliResult<String> {
    let cfg = effective(config, run)?;
    let dir = out_dir(&cfg)?;
    let (source, _) = domains(&cfg.data, cfg.adaptation.seed, Need::Source, None)?;
    let source = source.expect("source requested");
    let (model, history) = train_source(&source, &cfg.adaptation)?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    model.save(&dir.join(MODEL_SOURCE))?;
    let mut csv = String::from("epoch,source_acc,loss\n");
    let mut timing = String::from("epoch,seconds\n");
    for h in &history {
        let _ = writeln!(csv, "{},{},{}", h.epoch, h.source_acc, h.loss);
        let _ = writeln!(timing, "{},{}", h.epoch, h.seconds);
    }
    write(&dir.join(SOURCE_METRICS), &csv)?;
    write(&dir.join(TIMING_LOG), &timing)?;
    let last = history.last().expect("at least one epoch");
    let summary = serde_json::json!({
        "stage": "train-source",
        "seed": cfg.adaptation.seed,
        "source_acc": last.source_acc,
        "final_loss": last.loss,
        "epochs": history.len(),
    });
    write(&dir.join(SUMMARY), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))?;
    Ok(format!("source accuracy {:.4} after {} epochs\n", last.source_acc, history.len()))
}

fn cmd_adapt(config: Option<&Path>, args: &AdaptArgs) -> CliResult<String> {
    let cfg = effective(config, &args.run)?;
    let dir = out_dir(&cfg)?;
    let model_path = args.model.clone().unwrap_or_else(|| dir.join(MODEL_SOURCE));
    if !model_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "missing source model {} (run train-source first)",
            model_path.display()
        ))
        .into());
    }
    let source_model = EncoderClassifier::load(&model_path)?;
    let (_, target) = domains(&cfg.data, cfg.adaptation.seed, Need::Target, Some(source_model.num_classes))?;
    let target = target.expect("target requested");
    let source_only = target.labels.as_ref().map(|_| evaluate(&source_model, &target)).transpose()?;
    let (model, metrics) = adapt_target(&source_model, &target, &cfg.adaptation)?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    model.save(&dir.join(MODEL_ADAPTED))?;
    write(&dir.join(METRICS), &metrics.to_csv(false))?;
    write(&dir.join(TIMING_LOG), &metrics.timing_csv())?;
    let last = metrics.last().expect("at least one epoch");
    let label = objective_label(&cfg.adaptation);
    let summary = serde_json::json!({
        "stage": "adapt",
        "objective": label,
        "seed": cfg.adaptation.seed,
        "source_only_target_acc": source_only,
        "target_acc": last.target_acc,
        "pseudo_acc": last.pseudo_acc,
        "jn_exact_probe": last.jn_exact_probe,
        "classifier_frozen": model.classifier_params_equal(&source_model),
        "epochs": metrics.records.len(),
    });
    write(&dir.join(SUMMARY), &format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")))?;
    let acc = last.target_acc.map_or("n/a (unlabeled)".to_string(), |a| format!("{a:.4}"));
    Ok(format!("{label}: target accuracy {acc}\n"))
}

fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let model = EncoderClassifier::load(&args.model)?;
    let ds = load_csv(&args.data, Some(model.num_classes))?;
    let acc = evaluate(&model, &ds)?;
    Ok(format!("accuracy {acc}\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: String,
    pub target_acc: f64,
    pub source_only_acc: f64,
}

/// Arms compared by the ablation: alignment only, smoothness only, both.
pub fn ablation_arms(base: &AdaptationConfig) -> [(&'static str, AdaptationConfig); 3] {
    [
        (
            "shot",
            AdaptationConfig {
                lambda: 0.0,
                ..base.clone()
            },
        ),
        (
            "jn_only",
            AdaptationConfig {
                beta: 0.0,
                gamma: 0.0,
                ..base.clone()
            },
        ),
        ("full", base.clone()),
    ]
}

/// Runs every arm for every seed. Seeds run concurrently; rows come back in
/// seed order, then arm order, followed by one mean row per arm.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> CliResult<Vec<AblationRow>> {
    let per_seed = |seed: u64| -> CliResult<Vec<AblationRow>> {
        let base = AdaptationConfig {
            seed,
            ..cfg.adaptation.clone()
        };
        let (source, target) = domains(&cfg.data, seed, Need::Both, None)?;
        let (source, target) = (source.expect("source"), target.expect("target"));
        if target.labels.is_none() {
            return Err(CliError::Usage("ablation needs labeled target data for scoring".into()));
        }
        let (model, _) = train_source(&source, &base)?;
        let source_only = evaluate(&model, &target)?;
        let unlabeled = target.unlabeled();
        let mut rows = Vec::new();
        for (name, arm) in ablation_arms(&base) {
            let (adapted, _) = adapt_target(&model, &unlabeled, &arm)?;
            rows.push(AblationRow {
                config: name.into(),
                seed: seed.to_string(),
                target_acc: evaluate(&adapted, &target)?,
                source_only_acc: source_only,
            });
        }
        Ok(rows)
    };
    let results: Vec<CliResult<Vec<AblationRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || per_seed(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let arms = ["shot", "jn_only", "full"];
    for arm in arms {
        let picked: Vec<&AblationRow> = rows.iter().filter(|r| r.config == arm).collect();
        let k = picked.len().max(1) as f64;
        let mean = AblationRow {
            config: arm.into(),
            seed: "mean".into(),
            target_acc: picked.iter().map(|r| r.target_acc).sum::<f64>() / k,
            source_only_acc: picked.iter().map(|r| r.source_only_acc).sum::<f64>() / k,
        };
        rows.push(mean);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,seed,target_acc,source_only_acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.config, r.seed, r.target_acc, r.source_only_acc);
    }
    out
}

fn cmd_ablate(config: Option<&Path>, args: &AblateArgs) -> CliResult<String> {
    let cfg = effective(config, &args.run)?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let dir = out_dir(&cfg)?;
    let rows = run_ablation(&cfg, &args.seeds)?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    let csv = ablation_csv(&rows);
    write(&dir.join(ABLATION), &csv)?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub epsilon_source: f64,
    pub epsilon_target: f64,
    pub params: BoundParameters,
    pub report: crate::diagnostics::BoundReport,
}

/// Largest pairwise Euclidean distance among all rows.
pub fn diameter(parts: &[&crate::tensor::Tensor]) -> f64 {
    let rows: Vec<&[f64]> = parts.iter().flat_map(|t| t.iter_rows()).collect();
    let mut best: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

pub fn estimate_bound(
    model: &EncoderClassifier,
    source: &Dataset,
    target: &Dataset,
    args: &BoundArgs,
) -> CliResult<BoundEstimate> {
    let f = |x: &crate::tensor::Tensor| model.predict_probs(x);
    let eps_s = empirical_smoothness(f, &source.features, args.radius, args.probes, args.seed)?;
    let eps_t = empirical_smoothness(f, &target.features, args.radius, args.probes, args.seed)?;
    let grid = HistogramGrid::covering(&[&source.features, &target.features], args.bins, 1e-9)?;
    let tv = tv_discrete(&histogram(&source.features, &grid)?, &histogram(&target.features, &grid)?)?;
    let source_risk = 1.0 - evaluate(model, source)?;
    let params = BoundParameters {
        loss_bound: args.loss_bound,
        diameter: diameter(&[&source.features, &target.features]).max(f64::MIN_POSITIVE),
        radius: args.radius,
        epsilon: eps_s.max(eps_t),
        theta: args.theta,
        dim: source.dim(),
        m: target.len() as u64,
        n: source.len() as u64,
        tv,
        source_risk,
    };
    let report = bound_rhs(&params)?;
    Ok(BoundEstimate {
        epsilon_source: eps_s,
        epsilon_target: eps_t,
        params,
        report,
    })
}

fn cmd_bound(config: Option<&Path>, args: &BoundArgs) -> CliResult<String> {
    let mut cfg = base_config(config)?;
    args.data.apply(&mut cfg.data);
    let model = EncoderClassifier::load(&args.model)?;
    let (source, target) = domains(&cfg.data, args.seed, Need::Both, Some(model.num_classes))?;
    let est = estimate_bound(&model, &source.expect("source"), &target.expect("target"), args)?;
    let r = &est.report;
    let mut out = String::new();
    let _ = writeln!(out, "source risk E_P(f)        {}", r.source_risk);
    let _ = writeln!(
        out,
        "smoothness 2*eps          {} (eps lower estimate: source {}, target {})",
        r.smoothness, est.epsilon_source, est.epsilon_target
    );
    let _ = writeln!(out, "divergence 2*M*TV         {} (TV {})", r.divergence, est.params.tv);
    let _ = writeln!(out, "complexity (target, m={})  {}", est.params.m, r.target_complexity);
    let _ = writeln!(out, "complexity (source, n={})  {}", est.params.n, r.source_complexity);
    let _ = writeln!(out, "confidence                {}", r.confidence);
    let _ = writeln!(out, "total                     {}", r.total);
    let _ = writeln!(out, "vacuous                   {}", r.vacuous);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(BOUND_REPORT), &format!("{}\n", serde_json::to_string_pretty(&est).expect("json")))?;
    }
    Ok(out)
}

/// Executes a parsed command and returns its standard output.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(config, a),
        Command::TrainSource(a) => cmd_train_source(config, a),
        Command::Adapt(a) => cmd_adapt(config, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(config, a),
        Command::Bound(a) => cmd_bound(config, a),
    }
}

/// Parses `args` (program name first), runs the command, prints its output
/// and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
