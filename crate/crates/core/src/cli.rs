//! Command-line orchestration: generate, train, quantize, evaluate, replay
//! and report. One config document drives all stages; flags override config
//! fields and the resolved configuration is persisted with every artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::canlog::{self, AttackKind, Label, LabeledFrame};
use crate::config::RunConfig;
use crate::container::{sha256_file, Provenance};
use crate::engine::{
    self, DetectorPair, ReplayMode, ReplayReport, Verdict,
};
use crate::metrics::{self, MetricsReport};
use crate::nn::{self, Dataset, MlpModel, TrainError, TrainHistory};
use crate::quant::{self, CalibrationSet, QuantModel};
use crate::window::{windows_of, WindowFeature};

/// Failure classes with distinct exit codes for scripting: configuration
/// (2), data (3), numeric (4).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self {
            CliError::Config(_) => "config error",
            CliError::Data(_) => "data error",
            CliError::Numeric(_) => "numeric error",
        };
        write!(f, "{kind}: {}", self.message())
    }
}

fn cfg_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn num_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => num_err(e),
        TrainError::BadConfig(_) | TrainError::Width { .. } => cfg_err(e),
        TrainError::Empty => data_err(e),
    }
}

fn quant_err(e: quant::QuantError) -> CliError {
    use quant::QuantError::*;
    match e {
        BiasOverflow { .. } | DegenerateScale { .. } => num_err(e),
        EmptyCalibration => data_err(e),
        Train(t) => train_err(t),
        Container(c) => data_err(c),
        other => cfg_err(other),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "canids",
    version,
    about = "Windowed quantized-MLP intrusion detection over CAN logs"
)]
pub struct Cli {
    /// Run configuration file (TOML); omitted fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a labeled CAN log.
    Generate(GenerateArgs),
    /// Train (or transfer-train) a float detector on a labeled log.
    Train(TrainArgs),
    /// Fold, calibrate and quantize a checkpoint; optionally fine-tune.
    Quantize(QuantizeArgs),
    /// Compare pre-quantization and post-quantization detection quality.
    Evaluate(EvaluateArgs),
    /// Replay a log through the concurrent dual-detector engine.
    Replay(ReplayArgs),
    /// Join a verdict stream with ground truth into a detection report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Attack mode override: dos, fuzzy, spoof-rpm, spoof-gear.
    #[arg(long)]
    pub attack: Option<AttackKind>,
    /// Duration override in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Attack fraction target override.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled training log (CSV).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoints and history.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Warm-start from an existing checkpoint (transfer learning).
    #[arg(long)]
    pub transfer_from: Option<PathBuf>,
    /// Epoch count override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning-rate override.
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// Float checkpoint to quantize.
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled log providing calibration windows (and fine-tuning data
    /// unless --dataset is given).
    #[arg(long)]
    pub calibration: PathBuf,
    /// Extra labeled logs for quantization-aware fine-tuning.
    #[arg(long)]
    pub dataset: Vec<PathBuf>,
    /// Output prefix; writes <prefix>.bf.qmlp and, with fine-tuning,
    /// <prefix>.af.qmlp.
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Fine-tuning epochs override (0 disables).
    #[arg(long)]
    pub qat_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Float checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Quantized model before fine-tuning.
    #[arg(long)]
    pub quant_bf: Option<PathBuf>,
    /// Quantized model after fine-tuning.
    #[arg(long)]
    pub quant_af: Option<PathBuf>,
    /// Labeled logs as name=path pairs; repeatable.
    #[arg(long, value_parser = parse_named_path)]
    pub dataset: Vec<(String, PathBuf)>,
    /// Portion of each log to evaluate: full, train, val or test
    /// (chronological split).
    #[arg(long, default_value = "full")]
    pub split: SplitChoice,
    /// Decision threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Report output path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Log to replay.
    #[arg(long)]
    pub log: PathBuf,
    /// Quantized model for detector 1 (DoS + fuzzing).
    #[arg(long)]
    pub detector1: PathBuf,
    /// Quantized model for detector 2 (spoofing).
    #[arg(long)]
    pub detector2: PathBuf,
    /// Replay pacing override: maxrate or timestamped.
    #[arg(long)]
    pub mode: Option<ReplayModeArg>,
    /// Verdict stream CSV output.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Replay report JSON output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Verdict stream CSV from a replay run.
    #[arg(long)]
    pub verdicts: PathBuf,
    /// The labeled log the verdicts were produced from.
    #[arg(long)]
    pub log: PathBuf,
    /// Report output path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Full,
    Train,
    Val,
    Test,
}

impl SplitChoice {
    fn name(self) -> &'static str {
        match self {
            SplitChoice::Full => "full",
            SplitChoice::Train => "train",
            SplitChoice::Val => "val",
            SplitChoice::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReplayModeArg {
    Maxrate,
    Timestamped,
}

impl From<ReplayModeArg> for ReplayMode {
    fn from(v: ReplayModeArg) -> Self {
        match v {
            ReplayModeArg::Maxrate => ReplayMode::MaxRate,
            ReplayModeArg::Timestamped => ReplayMode::Timestamped,
        }
    }
}

impl clap::ValueEnum for AttackKind {
    fn value_variants<'a>() -> &'a [Self] {
        &AttackKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("canids: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Test entry point: parse explicit arguments and run.
pub fn run_with_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(cfg_err)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate(args) => cmd_generate(cfg, args).map(|_| ()),
        Command::Train(args) => cmd_train(cfg, args).map(|_| ()),
        Command::Quantize(args) => cmd_quantize(cfg, args).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(cfg, args).map(|_| ()),
        Command::Replay(args) => cmd_replay(cfg, args).map(|_| ()),
        Command::Report(args) => cmd_report(cfg, args).map(|_| ()),
    }
}

fn provenance_with_inputs(cfg: &RunConfig, inputs: &[&Path]) -> Result<Provenance, CliError> {
    let mut p = Provenance::tool();
    p.resolved_config = Some(cfg.to_toml());
    for path in inputs {
        let digest = sha256_file(path)
            .map_err(|e| data_err(format!("cannot hash {}: {e}", path.display())))?;
        p.push_input(path, digest);
    }
    Ok(p)
}

fn read_log(path: &Path) -> Result<Vec<LabeledFrame>, CliError> {
    canlog::read_log_file(path)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| data_err(format!("write {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub total: usize,
    pub normal: usize,
    pub attack: usize,
    pub attack_fraction: f64,
}

pub fn cmd_generate(mut cfg: RunConfig, args: GenerateArgs) -> Result<GenerateSummary, CliError> {
    if let Some(attack) = args.attack {
        cfg.synthetic.attack = attack;
    }
    if let Some(duration) = args.duration {
        cfg.synthetic.duration = duration;
    }
    if let Some(fraction) = args.fraction {
        cfg.synthetic.attack_fraction = fraction;
    }
    let synth = cfg.synthetic_config();
    let log = canlog::generate_synthetic_log(&synth).map_err(cfg_err)?;
    canlog::write_log_file(&args.out, &log)
        .map_err(|e| data_err(format!("write {}: {e}", args.out.display())))?;

    let attack = log.iter().filter(|f| f.label.is_attack()).count();
    let summary = GenerateSummary {
        path: args.out.clone(),
        total: log.len(),
        normal: log.len() - attack,
        attack,
        attack_fraction: attack as f64 / log.len() as f64,
    };

    // CSV layout must stay dataset-compatible, so provenance rides sidecar.
    let provenance = provenance_with_inputs(&cfg, &[])?;
    let sidecar = serde_json::json!({ "provenance": provenance, "summary": summary });
    write_json(&sidecar_path(&args.out), &sidecar)?;

    println!(
        "generated {}: {} frames ({} normal, {} attack, fraction {:.4})",
        args.out.display(),
        summary.total,
        summary.normal,
        summary.attack,
        summary.attack_fraction
    );
    Ok(summary)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    out.with_file_name(name)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub history_csv: PathBuf,
    pub history: TrainHistory,
}

pub fn cmd_train(mut cfg: RunConfig, args: TrainArgs) -> Result<TrainOutcome, CliError> {
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir)
        .map_err(|e| data_err(format!("create {}: {e}", out_dir.display())))?;

    let log = read_log(&args.dataset)?;
    let windows = windows_of(&log, cfg.window_config());
    let (train_w, val_w, _test_w) =
        canlog::split_dataset(windows, cfg.split_ratios()).map_err(cfg_err)?;
    let train_data = Dataset::from_windows(&train_w);
    let val_data = Dataset::from_windows(&val_w);

    let model = match &args.transfer_from {
        Some(path) => MlpModel::load(path)
            .map_err(|e| data_err(format!("{}: {e}", path.display())))?,
        None => MlpModel::init(cfg.model_spec(), cfg.seed).map_err(cfg_err)?,
    };

    let mut inputs: Vec<&Path> = vec![args.dataset.as_path()];
    if let Some(t) = &args.transfer_from {
        inputs.push(t.as_path());
    }
    let provenance = provenance_with_inputs(&cfg, &inputs)?;

    let train_cfg = cfg.train_config();
    let checkpoint_dir = out_dir.clone();
    let epoch_provenance = provenance.clone();
    let mut checkpoint_failure: Option<CliError> = None;
    let observer = |epoch: usize, model: &MlpModel, stats: &nn::EpochStats| {
        if !train_cfg.checkpoint_every_epoch || checkpoint_failure.is_some() {
            return;
        }
        let path = checkpoint_dir.join(format!("epoch_{:03}.mlp", epoch));
        let meta = serde_json::json!({
            "epoch": epoch,
            "train_loss": stats.train_loss,
            "val_loss": stats.val_loss,
            "val_accuracy": stats.val_accuracy,
        });
        if let Err(e) = model.to_container(epoch_provenance.clone(), meta).write_file(&path) {
            checkpoint_failure = Some(data_err(format!("write {}: {e}", path.display())));
        }
    };

    let started = std::time::Instant::now();
    let (best, history) =
        nn::train_with_observer(model, &train_data, &val_data, &train_cfg, observer)
            .map_err(train_err)?;
    if let Some(e) = checkpoint_failure {
        return Err(e);
    }

    let best_path = out_dir.join("best.mlp");
    let best_meta = serde_json::json!({
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "transfer_from": args.transfer_from.as_ref().map(|p| p.display().to_string()),
    });
    best.to_container(provenance, best_meta)
        .write_file(&best_path)
        .map_err(|e| data_err(format!("write {}: {e}", best_path.display())))?;

    let history_path = out_dir.join("history.csv");
    let mut csv = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &history.epochs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    fs::write(&history_path, csv)
        .map_err(|e| data_err(format!("write {}: {e}", history_path.display())))?;
    fs::write(out_dir.join("resolved-config.toml"), cfg.to_toml())
        .map_err(|e| data_err(format!("write resolved config: {e}")))?;

    println!(
        "trained on {} ({} train / {} val windows), best epoch {:?}, {:.1}s",
        args.dataset.display(),
        train_data.len(),
        val_data.len(),
        history.best_epoch,
        started.elapsed().as_secs_f64()
    );
    if let Some(last) = history.epochs.last() {
        println!(
            "final epoch: train loss {:.6}, val loss {:.6}, val accuracy {:.4}",
            last.train_loss, last.val_loss, last.val_accuracy
        );
    }
    Ok(TrainOutcome { best_checkpoint: best_path, history_csv: history_path, history })
}

#[derive(Debug)]
pub struct QuantizeOutcome {
    pub before_finetune: PathBuf,
    pub after_finetune: Option<PathBuf>,
}

pub fn cmd_quantize(mut cfg: RunConfig, args: QuantizeArgs) -> Result<QuantizeOutcome, CliError> {
    if let Some(epochs) = args.qat_epochs {
        cfg.quant.qat_epochs = epochs;
    }

    let model = MlpModel::load(&args.model)
        .map_err(|e| data_err(format!("{}: {e}", args.model.display())))?;
    let source_hash = sha256_file(&args.model)
        .map_err(|e| data_err(format!("cannot hash {}: {e}", args.model.display())))?;
    let folded = model.fold_batchnorm();

    let calib_log = read_log(&args.calibration)?;
    let calib_windows = windows_of(&calib_log, cfg.window_config());
    let calib = CalibrationSet::from_windows(&calib_windows, cfg.quant.calibration_size)
        .map_err(quant_err)?;
    let scales = quant::calibrate(&folded, &calib).map_err(quant_err)?;

    let mut inputs: Vec<&Path> = vec![args.model.as_path(), args.calibration.as_path()];
    for d in &args.dataset {
        inputs.push(d.as_path());
    }
    let provenance = provenance_with_inputs(&cfg, &inputs)?;

    let bf = quant::quantize(&folded, &scales, Some(source_hash.clone())).map_err(quant_err)?;
    let bf_path = with_suffix(&args.out_prefix, ".bf.qmlp");
    bf.save(&bf_path, provenance.clone())
        .map_err(|e| data_err(format!("write {}: {e}", bf_path.display())))?;

    let af_path = if cfg.quant.qat_epochs > 0 {
        // Fine-tune on the supplied datasets (calibration log by default).
        let mut train_w: Vec<WindowFeature> = Vec::new();
        let mut val_w: Vec<WindowFeature> = Vec::new();
        let sources: Vec<&PathBuf> = if args.dataset.is_empty() {
            vec![&args.calibration]
        } else {
            args.dataset.iter().collect()
        };
        for source in sources {
            let log = if source == &args.calibration {
                calib_log.clone()
            } else {
                read_log(source)?
            };
            let windows = windows_of(&log, cfg.window_config());
            let (t, v, _) =
                canlog::split_dataset(windows, cfg.split_ratios()).map_err(cfg_err)?;
            train_w.extend(t);
            val_w.extend(v);
        }
        let (af, _history) = quant::finetune_qat(
            &folded,
            &scales,
            &train_w,
            &val_w,
            &cfg.qat_train_config(),
            Some(source_hash),
        )
        .map_err(quant_err)?;
        let path = with_suffix(&args.out_prefix, ".af.qmlp");
        af.save(&path, provenance)
            .map_err(|e| data_err(format!("write {}: {e}", path.display())))?;
        Some(path)
    } else {
        None
    };

    println!(
        "quantized {} -> {} (weight fraction bits {:?}, activation {:?})",
        args.model.display(),
        bf_path.display(),
        scales.weight_f,
        scales.input_f
    );
    if let Some(af) = &af_path {
        println!("fine-tuned ({} epochs) -> {}", cfg.quant.qat_epochs, af.display());
    }
    Ok(QuantizeOutcome { before_finetune: bf_path, after_finetune: af_path })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

#[derive(Debug, Serialize)]
pub struct DatasetEvaluation {
    pub name: String,
    pub windows: usize,
    pub pre_q: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_q_bf: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_q_af: Option<MetricsReport>,
}

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub split: String,
    /// The 80:15:5 split is chronological over windows, never shuffled.
    pub split_policy: String,
    pub datasets: Vec<DatasetEvaluation>,
    pub provenance: Provenance,
}

pub fn cmd_evaluate(cfg: RunConfig, args: EvaluateArgs) -> Result<EvaluationReport, CliError> {
    if args.dataset.is_empty() {
        return Err(cfg_err("evaluate requires at least one --dataset name=path"));
    }
    let model = MlpModel::load(&args.model)
        .map_err(|e| data_err(format!("{}: {e}", args.model.display())))?;
    let load_q = |path: &Option<PathBuf>| -> Result<Option<QuantModel>, CliError> {
        match path {
            None => Ok(None),
            Some(p) => Ok(Some(
                QuantModel::load(p).map_err(|e| data_err(format!("{}: {e}", p.display())))?,
            )),
        }
    };
    let bf = load_q(&args.quant_bf)?;
    let af = load_q(&args.quant_af)?;

    let mut inputs: Vec<&Path> = vec![args.model.as_path()];
    for p in [&args.quant_bf, &args.quant_af].into_iter().flatten() {
        inputs.push(p.as_path());
    }
    for (_, p) in &args.dataset {
        inputs.push(p.as_path());
    }
    let provenance = provenance_with_inputs(&cfg, &inputs)?;

    let mut datasets = Vec::new();
    let mut table_rows: Vec<(String, MetricsReport)> = Vec::new();
    for (name, path) in &args.dataset {
        let log = read_log(path)?;
        let windows = windows_of(&log, cfg.window_config());
        let part = select_split(windows, args.split, &cfg)?;
        if part.is_empty() {
            return Err(data_err(format!("{name}: selected split is empty")));
        }
        let labels: Vec<Label> = part.iter().map(|w| w.label).collect();

        let float_scores = model
            .predict_batch(&Dataset::from_windows(&part).features)
            .map_err(|e| cfg_err(format!("{name}: {e}")))?;
        let pre_q = metrics::evaluate(&float_scores, &labels, args.threshold)
            .map_err(|e| num_err(format!("{name}: {e}")))?;
        table_rows.push((format!("{name} pre-q"), pre_q.clone()));

        let mut quant_eval = |tag: &str,
                              q: &Option<QuantModel>|
         -> Result<Option<MetricsReport>, CliError> {
            let Some(q) = q else { return Ok(None) };
            let scores = q
                .score_windows(&part)
                .map_err(|e| cfg_err(format!("{name}: {e}")))?;
            let report = metrics::evaluate(&scores, &labels, args.threshold)
                .map_err(|e| num_err(format!("{name}: {e}")))?;
            table_rows.push((format!("{name} {tag}"), report.clone()));
            Ok(Some(report))
        };
        let post_q_bf = quant_eval("post-q bf", &bf)?;
        let post_q_af = quant_eval("post-q af", &af)?;

        datasets.push(DatasetEvaluation {
            name: name.clone(),
            windows: part.len(),
            pre_q,
            post_q_bf,
            post_q_af,
        });
    }

    let report = EvaluationReport {
        threshold: args.threshold,
        split: args.split.name().to_string(),
        split_policy: "chronological".to_string(),
        datasets,
        provenance,
    };
    print!("{}", metrics::format_table(&table_rows));
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(report)
}

fn select_split(
    windows: Vec<WindowFeature>,
    choice: SplitChoice,
    cfg: &RunConfig,
) -> Result<Vec<WindowFeature>, CliError> {
    if choice == SplitChoice::Full {
        return Ok(windows);
    }
    let (train, val, test) =
        canlog::split_dataset(windows, cfg.split_ratios()).map_err(cfg_err)?;
    Ok(match choice {
        SplitChoice::Train => train,
        SplitChoice::Val => val,
        SplitChoice::Test => test,
        SplitChoice::Full => unreachable!(),
    })
}

#[derive(Debug, Serialize)]
pub struct ReplayDocument {
    #[serde(flatten)]
    pub report: ReplayReport,
    pub provenance: Provenance,
}

pub fn cmd_replay(mut cfg: RunConfig, args: ReplayArgs) -> Result<ReplayDocument, CliError> {
    if let Some(mode) = args.mode {
        cfg.replay.mode = mode.into();
    }
    let log = read_log(&args.log)?;
    let d1 = QuantModel::load(&args.detector1)
        .map_err(|e| data_err(format!("{}: {e}", args.detector1.display())))?;
    let d2 = QuantModel::load(&args.detector2)
        .map_err(|e| data_err(format!("{}: {e}", args.detector2.display())))?;
    let pair = Arc::new(DetectorPair::new(d1, d2).map_err(cfg_err)?);

    let provenance = provenance_with_inputs(
        &cfg,
        &[args.log.as_path(), args.detector1.as_path(), args.detector2.as_path()],
    )?;

    let (mut report, verdicts) =
        engine::replay(&log, pair, cfg.replay.mode, &cfg.replay_options())
            .map_err(|e| num_err(format!("replay: {e}")))?;

    if let Some(path) = &args.verdicts {
        engine::write_verdicts_csv_file(path, &verdicts)
            .map_err(|e| data_err(format!("write {}: {e}", path.display())))?;
        report.verdict_stream = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned());
    }
    let doc = ReplayDocument { report, provenance };
    if let Some(path) = &args.report {
        write_json(path, &doc)?;
    }

    println!(
        "replayed {} messages ({} warm-up): {:.0} msg/s, line rate {:.1} kbps",
        doc.report.total_messages,
        doc.report.warmup_skipped,
        doc.report.throughput_msgs_per_sec,
        doc.report.line_rate_kbps
    );
    if let Some(lat) = &doc.report.latency {
        println!(
            "latency us: mean {:.1}, p50 {:.1}, p99 {:.1}, max {:.1}",
            lat.mean_us, lat.p50_us, lat.p99_us, lat.max_us
        );
    }
    Ok(doc)
}

#[derive(Debug, Serialize)]
pub struct DetectionReport {
    pub frames: usize,
    pub windows: usize,
    pub verdicts: usize,
    pub detector_1: MetricsReport,
    pub detector_2: MetricsReport,
    /// Fusion: attack when either detector flags; scored by max.
    pub fused: MetricsReport,
    pub provenance: Provenance,
}

pub fn cmd_report(cfg: RunConfig, args: ReportArgs) -> Result<DetectionReport, CliError> {
    let verdicts = engine::read_verdicts_csv_file(&args.verdicts).map_err(data_err)?;
    let log = read_log(&args.log)?;
    let windows = windows_of(&log, cfg.window_config());
    if windows.len() != verdicts.len() {
        return Err(data_err(format!(
            "verdict count {} does not match {} windows from {}",
            verdicts.len(),
            windows.len(),
            args.log.display()
        )));
    }
    let labels: Vec<Label> = windows.iter().map(|w| w.label).collect();
    let threshold = cfg.replay.threshold;

    let scores =
        |f: &dyn Fn(&Verdict) -> f64| verdicts.iter().map(f).collect::<Vec<f64>>();
    let eval = |scores: &[f64]| {
        metrics::evaluate(scores, &labels, threshold).map_err(|e| num_err(format!("report: {e}")))
    };
    let detector_1 = eval(&scores(&|v| v.score_1))?;
    let detector_2 = eval(&scores(&|v| v.score_2))?;
    let fused = eval(&scores(&|v| v.score_1.max(v.score_2)))?;

    let provenance =
        provenance_with_inputs(&cfg, &[args.verdicts.as_path(), args.log.as_path()])?;
    let report = DetectionReport {
        frames: log.len(),
        windows: windows.len(),
        verdicts: verdicts.len(),
        detector_1,
        detector_2,
        fused,
        provenance,
    };
    print!(
        "{}",
        metrics::format_table(&[
            ("detector 1".to_string(), report.detector_1.clone()),
            ("detector 2".to_string(), report.detector_2.clone()),
            ("fused".to_string(), report.fused.clone()),
        ])
    );
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}
