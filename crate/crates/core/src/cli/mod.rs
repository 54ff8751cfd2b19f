//! Command-line front end. Every subcommand reads its inputs from datastore
//! directories and writes its outputs the same way, so stages can be run
//! one at a time or all at once with `run`.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 1 for
//! runtime failures.

pub mod mnist;
pub mod settings;
pub mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{
    extract_embedding_space, train_classifier, MlpModel, Optimizer, TrainConfig,
};
use crate::datastore::{
    align_runs, prepare_output_dir, read_dataset, read_embedding_archive, write_dataset,
    write_embedding_archive, LabeledDataset,
};
use crate::error::{PmalError, Result};
use crate::mining::PrototypeBook;
use crate::openset::{evaluate, OsrReport, RejectionRule};
use crate::pipeline::{compare_with_baseline, mean_std, mine_bundle, MiningConfig, PipelineConfig};
use crate::protolearn::{
    optimize_embedding, write_loss_curve, DistanceMode, ProtoLossConfig, PrototypeFeatures,
    RefreshPolicy,
};
use crate::synthlab::{generate, SynthSpec};
use crate::uncertainty::RobustnessConfig;

use self::mnist::{build_split, random_known_classes, IdxSet, SplitConfig};
use self::settings::Settings;

#[derive(Debug, Parser)]
#[command(
    name = "pmal",
    version,
    about = "Prototype mining and learning for open-set recognition"
)]
pub struct Cli {
    /// `key = value` file; flags on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic known/unknown dataset with ground truth.
    GenSynth(GenSynthArgs),
    /// Train one backbone and export its embedding space.
    Train(TrainArgs),
    /// Score robustness across runs and mine prototypes.
    Mine(MineArgs),
    /// Continue training a checkpoint with the prototype loss.
    Optimize(OptimizeArgs),
    /// Score known and unknown test sets and write a report.
    Eval(EvalArgs),
    /// Convert MNIST IDX files into known/unknown datasets.
    IngestMnist(IngestArgs),
    /// Full pipeline plus softmax baseline, looped over seeds.
    Run(RunArgs),
    /// Mean and standard deviation over report files.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Pr,
    Dr,
}

impl From<RuleArg> for RejectionRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Pr => RejectionRule::Pr,
            RuleArg::Dr => RejectionRule::Dr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Attention,
    Nearest,
}

impl From<DistanceArg> for DistanceMode {
    fn from(d: DistanceArg) -> Self {
        match d {
            DistanceArg::Attention => DistanceMode::Attention,
            DistanceArg::Nearest => DistanceMode::Nearest,
        }
    }
}

fn parse_rule(s: &str) -> Result<RejectionRule> {
    match s.to_ascii_lowercase().as_str() {
        "pr" => Ok(RejectionRule::Pr),
        "dr" => Ok(RejectionRule::Dr),
        _ => Err(PmalError::Validation(format!(
            "rule: expected pr or dr, got `{s}`"
        ))),
    }
}

fn parse_distance(s: &str) -> Result<DistanceMode> {
    match s.to_ascii_lowercase().as_str() {
        "attention" => Ok(DistanceMode::Attention),
        "nearest" => Ok(DistanceMode::Nearest),
        _ => Err(PmalError::Validation(format!(
            "distance: expected attention or nearest, got `{s}`"
        ))),
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub known_classes: Option<usize>,
    #[arg(long)]
    pub unknown_classes: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub class_mean_radius: Option<f64>,
    #[arg(long)]
    pub base_noise: Option<f64>,
    #[arg(long)]
    pub degraded_noise: Option<f64>,
    /// Fraction q of samples per class drawn at the degraded noise scale.
    #[arg(long)]
    pub degraded_fraction: Option<f64>,
    #[arg(long)]
    pub modes_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

/// Backbone training flags shared by `train`, `optimize` and `run`.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// `sgd` or `adam`.
    #[arg(long)]
    pub optimizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub force: bool,
}

/// Mining flags shared by `mine` and `run`.
#[derive(Debug, Args, Default)]
pub struct MineFlags {
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Prototypes per class (T).
    #[arg(long)]
    pub prototypes: Option<usize>,
    /// Uniform reference subsample size (default: every sample).
    #[arg(long)]
    pub reference_size: Option<usize>,
    /// Divide topology gaps by the square root of the reference size.
    #[arg(long)]
    pub normalize: bool,
    /// Ridge added to the metric matrix.
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding archive directory; give one per run (at least two).
    #[arg(long = "archive", required = true)]
    pub archives: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run whose embedding space hosts diversity distances (0-based).
    #[arg(long)]
    pub distance_run: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub mine: MineFlags,
    #[arg(long)]
    pub force: bool,
}

/// Prototype-loss flags shared by `optimize`, `eval` and `run`.
#[derive(Debug, Args, Default)]
pub struct ProtoFlags {
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long, value_enum)]
    pub distance: Option<DistanceArg>,
    /// Recompute prototype embeddings every epoch instead of every step.
    #[arg(long)]
    pub refresh_per_epoch: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Checkpoint directory to warm-start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub book: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub proto: ProtoFlags,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub known: PathBuf,
    #[arg(long)]
    pub unknown: PathBuf,
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Prototype book; required for the dr rule.
    #[arg(long)]
    pub book: Option<PathBuf>,
    /// Dataset the book's sample ids refer to; required for the dr rule.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub distance: Option<DistanceArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory holding train-*/t10k-* IDX files, plain or gzipped.
    #[arg(long)]
    pub mnist_dir: PathBuf,
    /// Comma-separated known digits; drawn from the seed when omitted.
    #[arg(long, value_delimiter = ',')]
    pub known: Option<Vec<u8>>,
    #[arg(long)]
    pub known_count: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Known training set; alternatively use --mnist-dir.
    #[arg(long, requires_all = ["known_test", "unknown_test"], conflicts_with = "mnist_dir")]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub known_test: Option<PathBuf>,
    #[arg(long)]
    pub unknown_test: Option<PathBuf>,
    /// Draw a fresh MNIST split per seed from this IDX directory.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pub known_count: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Backbone runs per seed (U).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Phase-two epochs (phase one uses --epochs).
    #[arg(long)]
    pub phase_two_epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub mine: MineFlags,
    #[command(flatten)]
    pub proto: ProtoFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// report.txt files to aggregate.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PmalError::Validation(format!(
            "{what}: {} does not exist",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PmalError::io(path, e))
}

fn train_config(s: &Settings, f: &TrainFlags, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let optimizer = match s
        .pick("optimizer", f.optimizer.clone(), "sgd".to_string())?
        .to_ascii_lowercase()
        .as_str()
    {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam,
        other => {
            return Err(PmalError::Validation(format!(
                "optimizer: expected sgd or adam, got `{other}`"
            )))
        }
    };
    Ok(TrainConfig {
        hidden_dim: s.pick("hidden_dim", f.hidden_dim, d.hidden_dim)?,
        embed_dim: s.pick("embed_dim", f.embed_dim, d.embed_dim)?,
        epochs: s.pick("epochs", f.epochs, d.epochs)?,
        batch_size: s.pick("batch_size", f.batch_size, d.batch_size)?,
        learning_rate: s.pick("learning_rate", f.learning_rate, d.learning_rate)?,
        momentum: s.pick("momentum", f.momentum, d.momentum)?,
        weight_decay: s.pick("weight_decay", f.weight_decay, d.weight_decay)?,
        lr_decay_factor: s.pick("lr_decay_factor", f.lr_decay_factor, d.lr_decay_factor)?,
        lr_decay_every: s.pick("lr_decay_every", f.lr_decay_every, d.lr_decay_every)?,
        optimizer,
        rng_seed: seed,
    })
}

fn mining_config(s: &Settings, f: &MineFlags, distance_run: Option<usize>) -> Result<MiningConfig> {
    let d = MiningConfig::default();
    let epsilon: f64 = s.pick("epsilon", f.epsilon, d.epsilon)?;
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(PmalError::Validation(format!(
            "epsilon: must lie in (0, 1], got {epsilon}"
        )));
    }
    let prototypes = s.pick("prototypes", f.prototypes, d.prototypes)?;
    if prototypes == 0 {
        return Err(PmalError::Validation(
            "prototypes: must be at least 1".into(),
        ));
    }
    Ok(MiningConfig {
        epsilon,
        prototypes,
        reference_size: s.pick_opt("reference_size", f.reference_size)?,
        robustness: RobustnessConfig {
            normalize: s.switch("normalize", f.normalize)?,
        },
        ridge: s.pick("ridge", f.ridge, d.ridge)?,
        distance_run: s.pick("distance_run", distance_run, d.distance_run)?,
    })
}

fn proto_config(s: &Settings, f: &ProtoFlags) -> Result<ProtoLossConfig> {
    let d = ProtoLossConfig::default();
    let distance_mode = match f.distance {
        Some(a) => a.into(),
        None => match s.raw("distance") {
            Some(v) => parse_distance(v)?,
            None => d.distance_mode,
        },
    };
    let refresh_policy = if s.switch("refresh_per_epoch", f.refresh_per_epoch)? {
        RefreshPolicy::PerEpoch
    } else {
        d.refresh_policy
    };
    let cfg = ProtoLossConfig {
        margin: s.pick("margin", f.margin, d.margin)?,
        weight: s.pick("lambda_p", f.lambda_p, d.weight)?,
        distance_mode,
        refresh_policy,
        scale_dim: d.scale_dim,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen_synth(s: &Settings, a: &GenSynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        known_classes: s.pick("known_classes", a.known_classes, d.known_classes)?,
        unknown_classes: s.pick("unknown_classes", a.unknown_classes, d.unknown_classes)?,
        feature_dim: s.pick("feature_dim", a.feature_dim, d.feature_dim)?,
        samples_per_class: s.pick(
            "samples_per_class",
            a.samples_per_class,
            d.samples_per_class,
        )?,
        class_mean_radius: s.pick(
            "class_mean_radius",
            a.class_mean_radius,
            d.class_mean_radius,
        )?,
        base_noise: s.pick("base_noise", a.base_noise, d.base_noise)?,
        degraded_noise: s.pick("degraded_noise", a.degraded_noise, d.degraded_noise)?,
        degraded_fraction: s.pick(
            "degraded_fraction",
            a.degraded_fraction,
            d.degraded_fraction,
        )?,
        modes_per_class: s.pick("modes_per_class", a.modes_per_class, d.modes_per_class)?,
        rng_seed: s.pick("seed", a.seed, d.rng_seed)?,
    };
    spec.validate()?;
    let (known, unknown, truth) = generate(&spec)?;
    write_dataset(&known, &a.out.join("known"), a.force)?;
    write_dataset(&unknown, &a.out.join("unknown"), a.force)?;
    write_text(&a.out.join("truth.csv"), &truth.to_csv())?;
    write_text(&a.out.join("unknown_truth.csv"), &truth.unknown_csv())?;
    log::info!(
        "wrote {} known and {} unknown samples to {}",
        known.len(),
        unknown.len(),
        a.out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path, what: &str) -> Result<LabeledDataset> {
    require_exists(path, what)?;
    read_dataset(path)
}

fn cmd_train(s: &Settings, a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data, "data")?;
    let seed = s.pick("seed", a.seed, 1)?;
    let cfg = train_config(s, &a.train, seed)?;
    let (model, history) = train_classifier(&data, &cfg)?;
    let accuracy = model.accuracy(&data)?;
    log::info!(
        "seed {seed}: loss {:.4} -> {:.4}, train accuracy = {accuracy:.4}",
        history.initial_loss,
        history.final_loss
    );
    model.save(&a.out.join("model"), a.force)?;
    let space = extract_embedding_space(&model, &data, seed as u32)?;
    write_embedding_archive(&space, &a.out.join("embedding"), a.force)?;
    write_text(
        &a.out.join("train_log.txt"),
        &format!(
            "seed = {seed}\ninitial_loss = {:.6}\nfinal_loss = {:.6}\ntrain_accuracy = {accuracy:.6}\n",
            history.initial_loss, history.final_loss
        ),
    )
}

fn cmd_mine(s: &Settings, a: &MineArgs) -> Result<()> {
    if a.archives.len() < 2 {
        return Err(PmalError::Validation(
            "archive: need at least two embedding archives".into(),
        ));
    }
    let data = load_dataset(&a.data, "data")?;
    let spaces = a
        .archives
        .iter()
        .map(|p| {
            require_exists(p, "archive")?;
            read_embedding_archive(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = mining_config(s, &a.mine, a.distance_run)?;
    let seed = s.pick("seed", a.seed, 1)?;
    let outcome = mine_bundle(&data, align_runs(spaces)?, &cfg, seed)?;
    prepare_output_dir(&a.out, a.force)?;
    outcome.book.write_csv(&a.out.join("book.csv"))?;
    outcome
        .table
        .write_csv(&data, &a.out.join("robustness.csv"))?;
    let sizes: Vec<usize> = outcome.candidates.classes.iter().map(Vec::len).collect();
    log::info!(
        "candidates per class {sizes:?}; {} prototypes mined",
        outcome.book.total()
    );
    Ok(())
}

fn cmd_optimize(s: &Settings, a: &OptimizeArgs) -> Result<()> {
    require_exists(&a.book, "book")?;
    require_exists(&a.checkpoint, "checkpoint")?;
    let data = load_dataset(&a.data, "data")?;
    let book = PrototypeBook::read_csv(&a.book)?;
    let model = MlpModel::load(&a.checkpoint)?;
    let seed = s.pick("seed", a.seed, 1)?;
    let mut cfg = train_config(s, &a.train, seed)?;
    cfg.hidden_dim = model.layer_sizes[1];
    cfg.embed_dim = model.layer_sizes[2];
    let proto = proto_config(s, &a.proto)?;
    let (model, history) = optimize_embedding(model, &data, &book, &cfg, &proto)?;
    model.save(&a.out.join("model"), a.force)?;
    write_loss_curve(&history, &a.out.join("loss.csv"))?;
    let trend = match (history.epoch_loss.first(), history.epoch_loss.last()) {
        (Some(first), Some(last)) if last <= first => "decreasing",
        (Some(_), Some(_)) => "not decreasing",
        _ => "empty",
    };
    log::info!(
        "phase two: {} steps, epoch loss trend {trend}",
        history.steps.len()
    );
    Ok(())
}

fn write_report(report: &OsrReport, dir: &Path, title: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PmalError::io(dir, e))?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    report.write_roc_csv(&dir.join("roc.csv"))?;
    write_text(
        &dir.join("roc.svg"),
        &svg::roc_svg(
            &report.roc_points,
            &format!("{title} AUROC {:.4}", report.auroc),
        ),
    )
}

fn guard_report_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join("report.txt").exists() && !force {
        return Err(PmalError::Validation(format!(
            "{} already holds a report; pass --force to overwrite",
            dir.display()
        )));
    }
    Ok(())
}

fn cmd_eval(s: &Settings, a: &EvalArgs) -> Result<()> {
    require_exists(&a.checkpoint, "checkpoint")?;
    let known = load_dataset(&a.known, "known")?;
    let unknown = load_dataset(&a.unknown, "unknown")?;
    let rule = match a.rule {
        Some(r) => r.into(),
        None => parse_rule(s.raw("rule").unwrap_or("dr"))?,
    };
    let mode = match a.distance {
        Some(d) => d.into(),
        None => parse_distance(s.raw("distance").unwrap_or("attention"))?,
    };
    guard_report_dir(&a.out, a.force)?;
    let model = MlpModel::load(&a.checkpoint)?;
    let protos =
        match rule {
            RejectionRule::Pr => None,
            RejectionRule::Dr => {
                let book = a.book.as_ref().ok_or_else(|| {
                    PmalError::Validation("book: required for the dr rule".into())
                })?;
                let data = a.data.as_ref().ok_or_else(|| {
                    PmalError::Validation("data: required for the dr rule".into())
                })?;
                require_exists(book, "book")?;
                let book = PrototypeBook::read_csv(book)?;
                let data = load_dataset(data, "data")?;
                Some(PrototypeFeatures::resolve(&book, &data)?.embed(&model, 0)?)
            }
        };
    let report = evaluate(&model, protos.as_ref(), &known, &unknown, rule, mode)?;
    write_report(&report, &a.out, &rule.to_string())?;
    log::info!(
        "{rule}: accuracy {:.4}, AUROC {:.4}",
        report.closed_set_accuracy,
        report.auroc
    );
    Ok(())
}

fn split_config(
    s: &Settings,
    known: Option<Vec<u8>>,
    known_count: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
    seed: u64,
) -> Result<SplitConfig> {
    let known = match known {
        Some(k) => k,
        None => match s.raw("known") {
            Some(v) => v
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse::<u8>()
                        .map_err(|_| PmalError::Validation(format!("known: cannot parse `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => random_known_classes(s.pick("known_count", known_count, 4)?, seed),
        },
    };
    Ok(SplitConfig {
        known,
        train_per_class: s.pick_opt("train_per_class", train_per_class)?,
        test_per_class: s.pick_opt("test_per_class", test_per_class)?,
        seed,
    })
}

fn cmd_ingest(s: &Settings, a: &IngestArgs) -> Result<()> {
    require_exists(&a.mnist_dir, "mnist_dir")?;
    let seed = s.pick("seed", a.seed, 1)?;
    let cfg = split_config(
        s,
        a.known.clone(),
        a.known_count,
        a.train_per_class,
        a.test_per_class,
        seed,
    )?;
    let (train, test) = IdxSet::read_dir(&a.mnist_dir)?;
    let split = build_split(&train, &test, &cfg)?;
    write_dataset(&split.known_train, &a.out.join("train"), a.force)?;
    write_dataset(&split.known_test, &a.out.join("known_test"), a.force)?;
    write_dataset(&split.unknown_test, &a.out.join("unknown_test"), a.force)?;
    write_text(
        &a.out.join("split.txt"),
        &split_text(&split.known_classes, &split.unknown_classes, seed),
    )?;
    log::info!(
        "known digits {:?}: {} train, {} known test, {} unknown test",
        split.known_classes,
        split.known_train.len(),
        split.known_test.len(),
        split.unknown_test.len()
    );
    Ok(())
}

fn split_text(known: &[u8], unknown: &[u8], seed: u64) -> String {
    let join = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join(",");
    format!(
        "seed = {seed}\nknown = {}\nunknown = {}\n",
        join(known),
        join(unknown)
    )
}

fn cmd_run(s: &Settings, a: &RunArgs) -> Result<()> {
    let seeds = match &a.seeds {
        Some(v) => v.clone(),
        None => match s.raw("seeds") {
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<u64>()
                        .map_err(|_| PmalError::Validation(format!("seeds: cannot parse `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![1],
        },
    };
    if seeds.is_empty() {
        return Err(PmalError::Validation("seeds: need at least one".into()));
    }
    let fixed = match &a.train_data {
        Some(train) => Some((
            load_dataset(train, "train_data")?,
            load_dataset(a.known_test.as_ref().unwrap(), "known_test")?,
            load_dataset(a.unknown_test.as_ref().unwrap(), "unknown_test")?,
        )),
        None => None,
    };
    let mnist = match (&fixed, &a.mnist_dir) {
        (Some(_), _) => None,
        (None, Some(dir)) => {
            require_exists(dir, "mnist_dir")?;
            Some(IdxSet::read_dir(dir)?)
        }
        (None, None) => {
            return Err(PmalError::Validation(
                "run: give --train-data/--known-test/--unknown-test or --mnist-dir".into(),
            ))
        }
    };
    if a.out.join("summary.txt").exists() && !a.force {
        return Err(PmalError::Validation(format!(
            "{} already holds a summary; pass --force to overwrite",
            a.out.display()
        )));
    }

    let phase_one = train_config(s, &a.train, 0)?;
    let phase_two = TrainConfig {
        epochs: s.pick("phase_two_epochs", a.phase_two_epochs, phase_one.epochs)?,
        ..phase_one.clone()
    };
    let base = PipelineConfig {
        phase_one,
        phase_two,
        runs: s.pick("runs", a.runs, 2)?,
        mining: mining_config(s, &a.mine, None)?,
        proto: proto_config(s, &a.proto)?,
        seed: 0,
    };

    let mut rows: Vec<(u64, Comparison3)> = Vec::new();
    for &seed in &seeds {
        let cfg = PipelineConfig {
            seed,
            ..base.clone()
        };
        cfg.validate()?;
        let dir = a.out.join(format!("seed-{seed}"));
        let (train, known_test, unknown_test) = match (&fixed, &mnist) {
            (Some((t, k, u)), _) => (t.clone(), k.clone(), u.clone()),
            (None, Some((train_idx, test_idx))) => {
                let split_cfg = split_config(
                    s,
                    None,
                    a.known_count,
                    a.train_per_class,
                    a.test_per_class,
                    seed,
                )?;
                let split = build_split(train_idx, test_idx, &split_cfg)?;
                std::fs::create_dir_all(&dir).map_err(|e| PmalError::io(&dir, e))?;
                write_text(
                    &dir.join("split.txt"),
                    &split_text(&split.known_classes, &split.unknown_classes, seed),
                )?;
                (split.known_train, split.known_test, split.unknown_test)
            }
            (None, None) => unreachable!(),
        };
        let cmp = compare_with_baseline(&train, &known_test, &unknown_test, &cfg)?;
        write_report(&cmp.pmal_dr, &dir.join("pmal-dr"), "PMAL DR")?;
        write_report(&cmp.pmal_pr, &dir.join("pmal-pr"), "PMAL PR")?;
        write_report(&cmp.baseline_pr, &dir.join("softmax-pr"), "softmax PR")?;
        log::info!(
            "seed {seed}: PMAL DR {:.4}, PMAL PR {:.4}, softmax PR {:.4}",
            cmp.pmal_dr.auroc,
            cmp.pmal_pr.auroc,
            cmp.baseline_pr.auroc
        );
        rows.push((
            seed,
            Comparison3 {
                pmal_dr: (cmp.pmal_dr.auroc, cmp.pmal_dr.closed_set_accuracy),
                pmal_pr: (cmp.pmal_pr.auroc, cmp.pmal_pr.closed_set_accuracy),
                softmax_pr: (cmp.baseline_pr.auroc, cmp.baseline_pr.closed_set_accuracy),
            },
        ));
    }
    let summary = run_summary(&rows);
    write_text(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

struct Comparison3 {
    pmal_dr: (f64, f64),
    pmal_pr: (f64, f64),
    softmax_pr: (f64, f64),
}

fn run_summary(rows: &[(u64, Comparison3)]) -> String {
    let mut out = String::from(
        "seed,pmal_dr_auroc,pmal_pr_auroc,softmax_pr_auroc,pmal_dr_accuracy,softmax_accuracy\n",
    );
    for (seed, c) in rows {
        writeln!(
            out,
            "{seed},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.pmal_dr.0, c.pmal_pr.0, c.softmax_pr.0, c.pmal_dr.1, c.softmax_pr.1
        )
        .unwrap();
    }
    let line = |name: &str, f: &dyn Fn(&Comparison3) -> f64| {
        let v: Vec<f64> = rows.iter().map(|(_, c)| f(c)).collect();
        let (m, sd) = mean_std(&v);
        format!("{name} = {m:.4} ± {sd:.4}\n")
    };
    out.push('\n');
    out += &line("pmal_dr_auroc", &|c| c.pmal_dr.0);
    out += &line("pmal_pr_auroc", &|c| c.pmal_pr.0);
    out += &line("softmax_pr_auroc", &|c| c.softmax_pr.0);
    out += &line("pmal_dr_accuracy", &|c| c.pmal_dr.1);
    out += &line("softmax_accuracy", &|c| c.softmax_pr.1);
    out
}

/// Parses the `key = value` lines of a report.
pub fn parse_report(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let s = Settings::parse(text, path)?;
    let mut out = Vec::new();
    for key in ["rule", "accuracy", "auroc"] {
        let v = s
            .raw(key)
            .ok_or_else(|| PmalError::Validation(format!("{}: missing `{key}`", path.display())))?;
        out.push((key.to_string(), v.to_string()));
    }
    Ok(out)
}

fn cmd_summarize(a: &SummarizeArgs) -> Result<()> {
    let mut auroc = Vec::new();
    let mut accuracy = Vec::new();
    for p in &a.reports {
        require_exists(p, "report")?;
        let text = std::fs::read_to_string(p).map_err(|e| PmalError::io(p, e))?;
        for (k, v) in parse_report(&text, p)? {
            let parse = || {
                v.parse::<f64>().map_err(|_| {
                    PmalError::Validation(format!("{}: bad `{k}` value `{v}`", p.display()))
                })
            };
            match k.as_str() {
                "auroc" => auroc.push(parse()?),
                "accuracy" => accuracy.push(parse()?),
                _ => {}
            }
        }
    }
    let (am, asd) = mean_std(&auroc);
    let (cm, csd) = mean_std(&accuracy);
    println!("reports = {}", a.reports.len());
    println!("auroc = {am:.4} ± {asd:.4}");
    println!("accuracy = {cm:.4} ± {csd:.4}");
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let threads = settings.pick_opt("threads", cli.threads)?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(PmalError::Validation("threads: must be at least 1".into()));
        }
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&settings, a),
        Command::Train(a) => cmd_train(&settings, a),
        Command::Mine(a) => cmd_mine(&settings, a),
        Command::Optimize(a) => cmd_optimize(&settings, a),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::IngestMnist(a) => cmd_ingest(&settings, a),
        Command::Run(a) => cmd_run(&settings, a),
        Command::Summarize(a) => cmd_summarize(a),
    }
}

/// Exit code for a command outcome.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}
