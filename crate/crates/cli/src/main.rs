//! `lrf`: command-line front end for the acoustic-model experiments.
//!
//! Subcommands: `rf`, `data synth`, `data reverb`, `features`, `measure`,
//! `train`, `eval`, `sweep`, `compare`, `gradcheck`. Every run is
//! deterministic given its flags (all randomness flows from `--seed`), and
//! outputs are machine-readable CSV/JSON only. Exit codes: 0 success,
//! 2 usage/validation, 3 numeric failure, 4 receptive-field probe
//! disagreement.

mod experiments;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrf_core::architectures;
use lrf_core::corpus::{self, Split};
use lrf_core::netgraph::{self, Family, NetworkSpec};
use lrf_core::network::{load_checkpoint, save_checkpoint};
use lrf_core::rf;
use lrf_core::trainer::{self, TrainConfig};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_PROBE_DISAGREEMENT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<lrf_core::netgraph::SpecError> for CliError {
    fn from(e: lrf_core::netgraph::SpecError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<lrf_core::corpus::CorpusError> for CliError {
    fn from(e: lrf_core::corpus::CorpusError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<lrf_core::acoustics::AudioError> for CliError {
    fn from(e: lrf_core::acoustics::AudioError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<lrf_core::network::NetError> for CliError {
    fn from(e: lrf_core::network::NetError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<lrf_core::rf::RfError> for CliError {
    fn from(e: lrf_core::rf::RfError) -> Self {
        CliError::numeric(e.to_string())
    }
}

impl From<lrf_core::trainer::TrainError> for CliError {
    fn from(e: lrf_core::trainer::TrainError) -> Self {
        use lrf_core::trainer::TrainError as T;
        match e {
            T::Diverged { .. } | T::NonFiniteGradient { .. } | T::KinkAvoidance(_) => {
                CliError::numeric(e.to_string())
            }
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lrf",
    about = "Large-receptive-field convolutional acoustic models: receptive-field analysis, \
             reverberant-speech simulation, training, and the fixed-budget experiments",
    version
)]
struct Cli {
    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory for file outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// JSON file with training hyperparameter overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Receptive-field report: exact calculus, closed forms, and both probes.
    Rf(RfArgs),
    /// Corpus generation and reverberation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Extract CMVN-normalized log-mel features for a corpus.
    Features(FeaturesArgs),
    /// Objective quality measures between two audio files.
    Measure(MeasureArgs),
    /// Train one network on a corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Single-layer kernel-size sweep (accuracy vs receptive field).
    Sweep(SweepArgs),
    /// Fixed-parameter-budget comparison across families.
    Compare(CompareArgs),
    /// Finite-difference gradient check of the layer adjoints.
    Gradcheck(GradcheckArgs),
}

/// Architecture selection shared by rf/train/gradcheck: a family preset with
/// optional structural overrides, or an explicit spec document.
#[derive(Args, Clone)]
struct ArchArgs {
    /// Family preset: standard | dilnet | tdnn | recnet | hgnet.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Path to a spec document (JSON).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Hidden channels per conv layer.
    #[arg(long, default_value_t = 512)]
    channels: usize,
    /// Output classes.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Kernel width (standard/dilnet/recnet/hgnet).
    #[arg(long)]
    width: Option<usize>,
    /// Conv layers (standard).
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated dilation factors (dilnet).
    #[arg(long)]
    dilations: Option<String>,
    /// Comma-separated TDNN contexts as left:right pairs.
    #[arg(long)]
    contexts: Option<String>,
    /// Applications of the shared conv per subnet (recnet).
    #[arg(long)]
    recursions: Option<usize>,
    /// Recursive subnets (recnet).
    #[arg(long)]
    subnets: Option<usize>,
    /// Hourglass units (hgnet).
    #[arg(long)]
    stacks: Option<usize>,
    /// Down/up levels per hourglass unit (hgnet).
    #[arg(long)]
    levels: Option<usize>,
}

impl ArchArgs {
    fn build(&self) -> Result<NetworkSpec, CliError> {
        if let Some(path) = &self.spec {
            let text = std::fs::read_to_string(path)?;
            return Ok(netgraph::parse_spec(&text)?);
        }
        let Some(name) = &self.preset else {
            return Err(CliError::validation("need either --preset or --spec"));
        };
        let family = Family::parse(name)
            .ok_or_else(|| CliError::validation(format!("unknown family `{name}`")))?;
        let spec = match family {
            Family::Standard => architectures::build_standard(
                self.width.unwrap_or(5),
                self.depth.unwrap_or(10),
                self.channels,
                self.classes,
            )?,
            Family::DilNet => {
                let dilations: Vec<usize> = match &self.dilations {
                    Some(s) => parse_list(s, "dilations")?,
                    None => vec![2, 4, 8],
                };
                architectures::build_dilnet(
                    self.width.unwrap_or(5),
                    &dilations,
                    self.channels,
                    self.classes,
                )?
            }
            Family::Tdnn => {
                let contexts = match &self.contexts {
                    Some(s) => rf::parse_contexts(s).ok_or_else(|| {
                        CliError::validation(format!("bad --contexts `{s}` (want e.g. 1:1,2:2)"))
                    })?,
                    None => vec![(1, 1), (2, 2), (4, 4)],
                };
                architectures::build_tdnn(&contexts, self.channels, self.classes)?
            }
            Family::RecNet => architectures::build_recnet(
                self.recursions.unwrap_or(5),
                self.subnets.unwrap_or(5),
                self.width.unwrap_or(3),
                self.channels,
                self.classes,
            )?,
            Family::HgNet => architectures::build_hgnet(
                self.stacks.unwrap_or(5),
                self.width.unwrap_or(5),
                self.levels.unwrap_or(3),
                self.channels,
                self.classes,
            )?,
        };
        Ok(spec)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::validation(format!("bad --{what} entry `{v}`")))
        })
        .collect()
}

#[derive(Args)]
struct RfArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Emit the closed-form discrepancy characterization instead.
    #[arg(long)]
    discrepancies: bool,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a clean synthetic corpus.
    Synth(SynthArgs),
    /// Write a reverberated copy of an existing corpus.
    Reverb(ReverbArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 400)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    dev: usize,
    #[arg(long, default_value_t = 50)]
    eval: usize,
    /// Frames per utterance (10 ms grid).
    #[arg(long, default_value_t = 300)]
    frames: usize,
}

#[derive(Args)]
struct ReverbArgs {
    /// Source corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Reverberation time in seconds.
    #[arg(long)]
    t60: f64,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    /// Reference (clean) audio: .wav or raw float64.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Degraded audio.
    #[arg(long = "deg")]
    degraded: PathBuf,
    /// Sample rate assumed for raw float64 inputs.
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_frames: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Record real wall-clock seconds in metrics files (breaks re-run
    /// byte-identity).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// train | dev | eval
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Clean corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated odd kernel widths.
    #[arg(long, default_value = "3,9,17,33")]
    kernels: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Reverberate the corpus in memory at this t60 before training.
    #[arg(long)]
    t60: Option<f64>,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Clean corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 25_600)]
    budget: u64,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Comma-separated families.
    #[arg(long, default_value = "standard,dilnet,recnet,hgnet")]
    archs: String,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Reverberation time for the distant condition.
    #[arg(long, default_value_t = 0.6)]
    t60: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Check all five family presets (down-scaled) instead of one arch.
    #[arg(long)]
    all_presets: bool,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let train_overrides = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<TrainOverrides>(&text)
                .map_err(|e| CliError::validation(format!("--config {}: {e}", path.display())))?
        }
        None => TrainOverrides::default(),
    };
    match cli.command {
        Command::Rf(args) => cmd_rf(args),
        Command::Data(DataCommand::Synth(args)) => cmd_data_synth(args, cli.seed, &cli.out_dir),
        Command::Data(DataCommand::Reverb(args)) => cmd_data_reverb(args, cli.seed, &cli.out_dir),
        Command::Features(args) => cmd_features(args, &cli.out_dir),
        Command::Measure(args) => cmd_measure(args),
        Command::Train(args) => cmd_train(args, cli.seed, &cli.out_dir, &train_overrides),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args, cli.seed, &cli.out_dir, &train_overrides),
        Command::Compare(args) => cmd_compare(args, cli.seed, &cli.out_dir, &train_overrides),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Hyperparameter overrides loadable from `--config <json>`.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainOverrides {
    alpha: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    crop_frames: Option<usize>,
    grad_clip: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, mut config: TrainConfig) -> TrainConfig {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            };
        }
        take!(alpha);
        take!(beta1);
        take!(beta2);
        take!(eps);
        take!(epochs);
        take!(batch_size);
        take!(crop_frames);
        take!(grad_clip);
        config
    }
}

// ---------------------------------------------------------------------------
// rf
// ---------------------------------------------------------------------------

fn cmd_rf(args: RfArgs) -> Result<(), CliError> {
    if args.discrepancies {
        let report = rf::discrepancy_report()?;
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
        return Ok(());
    }
    let spec = args.arch.build()?;
    let report = rf::analyze(&spec)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if !report.probes_agree() {
        return Err(CliError {
            code: EXIT_PROBE_DISAGREEMENT,
            message: format!(
                "probe disagreement: rf_general {} vs structural {} vs gradient {}",
                report.rf_general, report.structural, report.gradient_probe
            ),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// data synth / data reverb / features / measure
// ---------------------------------------------------------------------------

fn cmd_data_synth(args: SynthArgs, seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let config = corpus::CorpusConfig {
        num_classes: args.k,
        train_utts: args.train,
        dev_utts: args.dev,
        eval_utts: args.eval,
        frames_per_utt: args.frames,
        seed,
    };
    let manifest = corpus::generate_corpus(&config, out_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir.display().to_string(),
            "k": manifest.num_classes,
            "fs": manifest.sample_rate,
            "utterances": manifest.utterances.len(),
        })
    );
    Ok(())
}

fn cmd_data_reverb(args: ReverbArgs, seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let manifest = corpus::reverberate_corpus(&args.corpus, args.t60, seed, out_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir.display().to_string(),
            "t60": args.t60,
            "utterances": manifest.utterances.len(),
        })
    );
    Ok(())
}

fn cmd_features(args: FeaturesArgs, out_dir: &Path) -> Result<(), CliError> {
    let manifest = corpus::load_manifest(&args.corpus)?;
    std::fs::create_dir_all(out_dir)?;
    let mut index = Vec::new();
    for entry in &manifest.utterances {
        let utt = corpus::load_utterance(&args.corpus, entry, manifest.sample_rate)?;
        let (feats, _) = corpus::features_for(&utt)?;
        let file = format!("{}.feat", entry.id);
        let mut bytes = Vec::with_capacity(16 + feats.frames() * feats.dims() * 8);
        bytes.extend_from_slice(&(feats.frames() as u64).to_le_bytes());
        bytes.extend_from_slice(&(feats.dims() as u64).to_le_bytes());
        for v in feats.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(out_dir.join(&file), bytes)?;
        index.push(serde_json::json!({
            "id": entry.id,
            "file": file,
            "split": entry.split.name(),
            "frames": feats.frames(),
            "dims": feats.dims(),
        }));
    }
    let index_json =
        serde_json::to_string_pretty(&serde_json::json!({ "utterances": index })).unwrap();
    std::fs::write(out_dir.join("features.json"), index_json)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir.display().to_string(),
            "utterances": manifest.utterances.len(),
        })
    );
    Ok(())
}

fn cmd_measure(args: MeasureArgs) -> Result<(), CliError> {
    use lrf_core::acoustics::{cepstral_distance, itakura_saito, read_audio, snr_db};
    let reference = read_audio(&args.reference, args.sample_rate)?;
    let degraded = read_audio(&args.degraded, args.sample_rate)?;
    let snr = snr_db(&reference, &degraded)?;
    let is = itakura_saito(&reference, &degraded)?;
    let cd = cepstral_distance(&reference, &degraded)?;
    let snr_json = if snr.is_infinite() {
        serde_json::json!("inf")
    } else {
        serde_json::json!(snr)
    };
    println!(
        "{}",
        serde_json::json!({ "snr_db": snr_json, "is": is, "cd": cd })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

fn load_features_for_split(
    dir: &Path,
    manifest: &corpus::CorpusManifest,
    split: Split,
) -> Result<Vec<trainer::FeatUtt>, CliError> {
    let utts = corpus::load_split(dir, manifest, split)?;
    utts.iter()
        .map(|u| corpus::features_for(u).map_err(CliError::from))
        .collect()
}

fn cmd_train(
    args: TrainArgs,
    seed: u64,
    out_dir: &Path,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let spec = args.arch.build()?;
    let manifest = corpus::load_manifest(&args.corpus)?;
    if manifest.num_classes != spec.num_classes {
        return Err(CliError::validation(format!(
            "corpus has {} classes but the network outputs {}",
            manifest.num_classes, spec.num_classes
        )));
    }
    let train_data = load_features_for_split(&args.corpus, &manifest, Split::Train)?;
    let dev_data = load_features_for_split(&args.corpus, &manifest, Split::Dev)?;

    let mut config = overrides.apply(TrainConfig {
        seed,
        ..TrainConfig::default()
    });
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.crop_frames {
        config.crop_frames = v;
    }
    if let Some(v) = args.lr {
        config.alpha = v;
    }
    if let Some(v) = args.grad_clip {
        config.grad_clip = v;
    }

    let outcome = trainer::train(&spec, &train_data, &dev_data, &config)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics.csv"),
        trainer::metrics_to_csv(&outcome.history, args.wall_clock),
    )?;
    std::fs::write(
        out_dir.join("metrics.jsonl"),
        trainer::metrics_to_jsonl(&outcome.history, args.wall_clock),
    )?;
    save_checkpoint(&out_dir.join("model.ckpt"), &outcome.network)?;
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_dev_accuracy": outcome.best_dev_accuracy,
            "checkpoint": out_dir.join("model.ckpt").display().to_string(),
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| CliError::validation(format!("unknown split `{}`", args.split)))?;
    let net = load_checkpoint(&args.checkpoint)?;
    let manifest = corpus::load_manifest(&args.corpus)?;
    if manifest.num_classes != net.spec().num_classes {
        return Err(CliError::validation(format!(
            "corpus has {} classes but the checkpoint outputs {}",
            manifest.num_classes,
            net.spec().num_classes
        )));
    }
    let data = load_features_for_split(&args.corpus, &manifest, split)?;
    let record = trainer::evaluate(&net, &data, split)?;
    println!(
        "{}",
        serde_json::json!({
            "split": record.split.name(),
            "ce": record.cross_entropy,
            "acc": record.frame_accuracy,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep / compare / gradcheck
// ---------------------------------------------------------------------------

fn cmd_sweep(
    args: SweepArgs,
    seed: u64,
    out_dir: &Path,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let kernels: Vec<usize> = parse_list(&args.kernels, "kernels")?;
    for &k in &kernels {
        if k % 2 == 0 {
            return Err(CliError::validation(format!(
                "kernel widths must be odd, got {k}"
            )));
        }
    }
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    let base_config = overrides.apply(TrainConfig {
        epochs: args.epochs,
        ..TrainConfig::default()
    });
    let result = experiments::run_sweep(&experiments::SweepPlan {
        corpus: args.corpus,
        kernels,
        seeds,
        t60: args.t60,
        channels: args.channels,
        base_config,
        master_seed: seed,
    })?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), &result.summary_csv)?;
    std::fs::write(out_dir.join("sweep_runs.csv"), &result.runs_csv)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir.display().to_string(),
            "rows": result.rows,
            "runs": result.runs,
        })
    );
    Ok(())
}

fn cmd_compare(
    args: CompareArgs,
    seed: u64,
    out_dir: &Path,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let archs: Vec<Family> = args
        .archs
        .split(',')
        .map(|a| {
            Family::parse(a.trim())
                .ok_or_else(|| CliError::validation(format!("unknown family `{a}`")))
        })
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seeds")?;
    let base_config = overrides.apply(TrainConfig {
        epochs: args.epochs,
        ..TrainConfig::default()
    });
    let result = experiments::run_compare(&experiments::ComparePlan {
        corpus: args.corpus,
        budget: args.budget,
        tolerance: args.tolerance,
        archs,
        seeds,
        t60: args.t60,
        base_config,
        master_seed: seed,
    })?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("compare.csv"), &result.summary_csv)?;
    std::fs::write(out_dir.join("compare_runs.csv"), &result.runs_csv)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir.display().to_string(),
            "rows": result.rows,
            "runs": result.runs,
        })
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let reports = if args.all_presets {
        Family::ALL
            .iter()
            .map(|&family| {
                let spec = architectures::small_preset(family, 8, args.arch.classes)?;
                Ok(trainer::grad_check(&spec, args.tolerance)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?
    } else {
        let spec = args.arch.build()?;
        vec![trainer::grad_check(&spec, args.tolerance)?]
    };
    println!("{}", serde_json::to_string_pretty(&reports).unwrap());
    if let Some(bad) = reports.iter().find(|r| !r.pass) {
        return Err(CliError::numeric(format!(
            "gradient check failed for {} at `{}`: max rel err {}",
            bad.family, bad.worst_param, bad.max_rel_err
        )));
    }
    Ok(())
}
