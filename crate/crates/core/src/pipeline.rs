//! End-to-end wiring: U backbone runs, robustness, mining, prototype
//! learning, and the softmax baseline trained for the same budget.

use crate::backbone::{
    extract_embedding_space, train_classifier, train_with_objective, MlpModel, SoftmaxOnly,
    TrainConfig, TrainHistory,
};
use crate::datastore::{align_runs, LabeledDataset, RunBundle};
use crate::error::{PmalError, Result};
use crate::metric::{build_metric_with_ridge, MetricModel};
use crate::mining::{filter_diverse, PrototypeBook};
use crate::openset::{evaluate, OsrReport, RejectionRule};
use crate::protolearn::{
    optimize_embedding, ProtoLossConfig, PrototypeEmbeddings, PrototypeFeatures,
};
use crate::uncertainty::{
    robustness, select_candidates, CandidateSets, ReferenceSet, RobustnessConfig, RobustnessTable,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub epsilon: f64,
    pub prototypes: usize,
    /// `None` uses every training sample.
    pub reference_size: Option<usize>,
    pub robustness: RobustnessConfig,
    pub ridge: f64,
    /// Run whose embedding space hosts the diversity distances.
    pub distance_run: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            epsilon: 0.7,
            prototypes: 10,
            reference_size: None,
            robustness: RobustnessConfig::default(),
            ridge: 0.0,
            distance_run: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub phase_one: TrainConfig,
    pub phase_two: TrainConfig,
    pub runs: usize,
    pub mining: MiningConfig,
    pub proto: ProtoLossConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            phase_one: TrainConfig::default(),
            phase_two: TrainConfig::default(),
            runs: 2,
            mining: MiningConfig::default(),
            proto: ProtoLossConfig::default(),
            seed: 1,
        }
    }
}

impl PipelineConfig {
    /// Backbone seed of run `u`.
    pub fn run_seed(&self, u: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(u as u64 + 1)
    }

    pub fn phase_two_seed(&self) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(999)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 2 {
            return Err(PmalError::Validation("runs: need at least 2".into()));
        }
        if self.mining.distance_run >= self.runs {
            return Err(PmalError::Validation(
                "distance_run: must index one of the runs".into(),
            ));
        }
        self.proto.validate()
    }
}

/// Trains `cfg.runs` backbones that differ only in their seed.
pub fn train_runs(train: &LabeledDataset, cfg: &PipelineConfig) -> Result<Vec<MlpModel>> {
    (0..cfg.runs)
        .map(|u| {
            let run_cfg = TrainConfig {
                rng_seed: cfg.run_seed(u),
                ..cfg.phase_one.clone()
            };
            let (model, history) = train_classifier(train, &run_cfg)?;
            log::info!(
                "run {}: loss {:.4} -> {:.4}",
                u + 1,
                history.initial_loss,
                history.final_loss
            );
            Ok(model)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub bundle: RunBundle,
    pub metrics: Vec<MetricModel>,
    pub table: RobustnessTable,
    pub candidates: CandidateSets,
    pub book: PrototypeBook,
}

/// Robustness, candidate selection and diversity filtering over aligned runs.
pub fn mine_bundle(
    train: &LabeledDataset,
    bundle: RunBundle,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<MiningOutcome> {
    if bundle.source_checksum() != train.checksum() {
        return Err(PmalError::Alignment(
            "embedding archives were not extracted from this dataset".into(),
        ));
    }
    if cfg.distance_run >= bundle.len() {
        return Err(PmalError::Validation(
            "distance_run: must index one of the runs".into(),
        ));
    }
    let metrics = bundle
        .runs()
        .iter()
        .map(|s| build_metric_with_ridge(s, cfg.ridge))
        .collect::<Result<Vec<_>>>()?;
    let reference = match cfg.reference_size {
        Some(size) => ReferenceSet::subsample(train, size, seed),
        None => ReferenceSet::all(train),
    };
    let table = robustness(&bundle, &metrics, &reference, cfg.robustness)?;
    let candidates = select_candidates(&table, train, cfg.epsilon)?;
    let run = cfg.distance_run;
    let book = filter_diverse(
        &candidates,
        &bundle.runs()[run],
        &metrics[run],
        cfg.prototypes,
    )?;
    Ok(MiningOutcome {
        bundle,
        metrics,
        table,
        candidates,
        book,
    })
}

/// Extracts every model's embedding space on `train` and mines prototypes.
pub fn mine(
    train: &LabeledDataset,
    models: &[MlpModel],
    cfg: &MiningConfig,
    seed: u64,
) -> Result<MiningOutcome> {
    let spaces = models
        .iter()
        .enumerate()
        .map(|(u, m)| extract_embedding_space(m, train, u as u32 + 1))
        .collect::<Result<Vec<_>>>()?;
    mine_bundle(train, align_runs(spaces)?, cfg, seed)
}

#[derive(Debug, Clone)]
pub struct PmalOutcome {
    pub runs: Vec<MlpModel>,
    pub mining: MiningOutcome,
    pub model: MlpModel,
    pub history: TrainHistory,
    pub prototypes: PrototypeEmbeddings,
}

impl PmalOutcome {
    /// Phase-one model phase two started from.
    pub fn warm_start(&self) -> &MlpModel {
        &self.runs[0]
    }
}

/// Phase two from run 1's model with the mined book.
pub fn run_pmal(train: &LabeledDataset, cfg: &PipelineConfig) -> Result<PmalOutcome> {
    cfg.validate()?;
    let runs = train_runs(train, cfg)?;
    let mining = mine(train, &runs, &cfg.mining, cfg.seed)?;
    let phase_two = TrainConfig {
        rng_seed: cfg.phase_two_seed(),
        ..cfg.phase_two.clone()
    };
    let (model, history) =
        optimize_embedding(runs[0].clone(), train, &mining.book, &phase_two, &cfg.proto)?;
    let prototypes = PrototypeFeatures::resolve(&mining.book, train)?.embed(&model, 0)?;
    Ok(PmalOutcome {
        runs,
        mining,
        model,
        history,
        prototypes,
    })
}

/// Softmax-only continuation of `warm_start` with the phase-two budget.
pub fn softmax_baseline(
    warm_start: &MlpModel,
    train: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<(MlpModel, TrainHistory)> {
    let phase_two = TrainConfig {
        rng_seed: cfg.phase_two_seed(),
        ..cfg.phase_two.clone()
    };
    train_with_objective(warm_start.clone(), train, &phase_two, &mut SoftmaxOnly)
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub pmal_dr: OsrReport,
    pub pmal_pr: OsrReport,
    pub baseline_pr: OsrReport,
}

/// PMAL and its softmax baseline, both evaluated on the same test split.
pub fn compare_with_baseline(
    train: &LabeledDataset,
    known_test: &LabeledDataset,
    unknown_test: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<Comparison> {
    let pmal = run_pmal(train, cfg)?;
    let (baseline, _) = softmax_baseline(pmal.warm_start(), train, cfg)?;
    let mode = cfg.proto.distance_mode;
    let report = |m: &MlpModel, p: Option<&PrototypeEmbeddings>, rule| {
        evaluate(m, p, known_test, unknown_test, rule, mode)
    };
    Ok(Comparison {
        pmal_dr: report(&pmal.model, Some(&pmal.prototypes), RejectionRule::Dr)?,
        pmal_pr: report(&pmal.model, None, RejectionRule::Pr)?,
        baseline_pr: report(&baseline, None, RejectionRule::Pr)?,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
