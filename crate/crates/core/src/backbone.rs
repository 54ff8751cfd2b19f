//! A one-hidden-layer perceptron with a linear embedding layer and a softmax
//! head, trained with hand-derived gradients.
//!
//! `x -> relu(x·W1 + b1) -> z = h·W2 + b2 -> logits = z·W + b -> softmax`

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{
    prepare_output_dir, read_json, read_matrix_file, write_json, write_matrix_file, EmbeddingSpace,
    LabeledDataset, Matrix, FORMAT_VERSION,
};
use crate::error::{PmalError, Result};

/// Trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// F×H
    pub hidden_weights: Matrix,
    pub hidden_bias: Vec<f64>,
    /// H×D
    pub embed_weights: Matrix,
    pub embed_bias: Vec<f64>,
    /// D×K, column k is the class-k weight vector
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, embed: usize, classes: usize) -> Self {
        MlpParams {
            hidden_weights: Matrix::zeros(input, hidden),
            hidden_bias: vec![0.0; hidden],
            embed_weights: Matrix::zeros(hidden, embed),
            embed_bias: vec![0.0; embed],
            head_weights: Matrix::zeros(embed, classes),
            head_bias: vec![0.0; classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(
            self.hidden_weights.rows(),
            self.hidden_weights.cols(),
            self.embed_weights.cols(),
            self.head_weights.cols(),
        )
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.hidden_weights.as_slice(),
            &self.hidden_bias,
            self.embed_weights.as_slice(),
            &self.embed_bias,
            self.head_weights.as_slice(),
            &self.head_bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.hidden_weights.as_mut_slice(),
            &mut self.hidden_bias,
            self.embed_weights.as_mut_slice(),
            &mut self.embed_bias,
            self.head_weights.as_mut_slice(),
            &mut self.head_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn quantized(&self) -> MlpParams {
        let q = |v: &[f64]| v.iter().map(|&x| (x as f32) as f64).collect::<Vec<_>>();
        MlpParams {
            hidden_weights: self.hidden_weights.quantized(),
            hidden_bias: q(&self.hidden_bias),
            embed_weights: self.embed_weights.quantized(),
            embed_bias: q(&self.embed_bias),
            head_weights: self.head_weights.quantized(),
            head_bias: q(&self.head_bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `[F, H, D]`
    pub layer_sizes: [usize; 3],
    pub class_count: usize,
    pub params: MlpParams,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

struct Trace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    out: ForwardOutput,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `x·M + bias` for a row vector `x`.
fn affine(x: &[f64], m: &Matrix, bias: &[f64]) -> Vec<f64> {
    let mut out = bias.to_vec();
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(p)) {
            *o += xp * w;
        }
    }
    out
}

/// Glorot-uniform weights, zero biases.
fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

impl MlpModel {
    pub fn new(layer_sizes: [usize; 3], class_count: usize, rng_seed: u64) -> Self {
        let [f, h, d] = layer_sizes;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let params = MlpParams {
            hidden_weights: glorot(&mut rng, f, h),
            hidden_bias: vec![0.0; h],
            embed_weights: glorot(&mut rng, h, d),
            embed_bias: vec![0.0; d],
            head_weights: glorot(&mut rng, d, class_count),
            head_bias: vec![0.0; class_count],
        };
        MlpModel {
            layer_sizes,
            class_count,
            params,
            rng_seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.layer_sizes[2]
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(PmalError::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
                context: "model input",
            });
        }
        let p = &self.params;
        let hidden_pre = affine(x, &p.hidden_weights, &p.hidden_bias);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let embedding = affine(&hidden, &p.embed_weights, &p.embed_bias);
        let logits = affine(&embedding, &p.head_weights, &p.head_bias);
        let probabilities = softmax(&logits);
        Ok(Trace {
            hidden_pre,
            hidden,
            out: ForwardOutput {
                embedding,
                logits,
                probabilities,
            },
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        self.trace(x).map(|t| t.out)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|o| o.embedding)
    }

    /// Forward pass over every sample, in storage order.
    pub fn forward_all(&self, dataset: &LabeledDataset) -> Result<Vec<ForwardOutput>> {
        (0..dataset.len())
            .into_par_iter()
            .map(|i| self.forward(dataset.feature(i)))
            .collect()
    }

    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        let outs = self.forward_all(dataset)?;
        let correct = outs
            .iter()
            .zip(dataset.labels())
            .filter(|(o, &l)| argmax(&o.probabilities) == l as usize)
            .count();
        Ok(correct as f64 / dataset.len().max(1) as f64)
    }
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Value of an extra loss term on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraLoss {
    /// Unweighted, batch-averaged value.
    pub value: f64,
    /// Weight the term enters the total with.
    pub weight: f64,
    /// Gradient of `weight * value` with respect to each sample's embedding.
    pub grads: Vec<Vec<f64>>,
}

/// Additional loss defined on the embeddings of a batch.
pub trait EmbeddingLoss {
    fn evaluate(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<ExtraLoss>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    /// Unweighted extra term.
    pub extra: f64,
    /// `cls + weight * extra`
    pub total: f64,
}

/// Mean cross-entropy over the batch plus the optional extra term, with the
/// analytic gradient of the total with respect to every parameter.
pub fn loss_and_gradients(
    model: &MlpModel,
    batch: &[(&[f64], usize)],
    extra: Option<&dyn EmbeddingLoss>,
) -> Result<(LossBreakdown, MlpParams)> {
    if batch.is_empty() {
        return Err(PmalError::Validation("empty batch".into()));
    }
    let k = model.class_count;
    let scale = 1.0 / batch.len() as f64;
    let traces = batch
        .iter()
        .map(|(x, y)| {
            if *y >= k {
                return Err(PmalError::Validation(format!("label {y} out of range")));
            }
            model.trace(x)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cls = 0.0;
    for (t, (_, y)) in traces.iter().zip(batch) {
        cls -= t.out.probabilities[*y].max(f64::MIN_POSITIVE).ln() * scale;
    }

    let (extra_loss, extra_weight, extra_grads) = match extra {
        Some(hook) => {
            let embeddings: Vec<Vec<f64>> =
                traces.iter().map(|t| t.out.embedding.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
            let e = hook.evaluate(&embeddings, &labels)?;
            // a zero weight leaves the trajectory bitwise identical to plain softmax
            let grads = if e.weight == 0.0 { None } else { Some(e.grads) };
            (e.value, e.weight, grads)
        }
        None => (0.0, 0.0, None),
    };
    let total = if extra_weight == 0.0 {
        cls
    } else {
        cls + extra_weight * extra_loss
    };
    if !total.is_finite() {
        return Err(PmalError::Numerical(format!("non-finite loss {total}")));
    }

    let p = &model.params;
    let mut g = p.zeros_like();
    let (d, h) = (model.embed_dim(), model.layer_sizes[1]);
    for (s, (t, (x, y))) in traces.iter().zip(batch).enumerate() {
        let mut dlogits = t.out.probabilities.clone();
        dlogits[*y] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= scale);

        let mut dz = vec![0.0; d];
        for (a, dza) in dz.iter_mut().enumerate() {
            let wrow = p.head_weights.row(a);
            *dza = wrow.iter().zip(&dlogits).map(|(w, dl)| w * dl).sum();
            let grow = g.head_weights.row_mut(a);
            let za = t.out.embedding[a];
            for (gw, dl) in grow.iter_mut().zip(&dlogits) {
                *gw += za * dl;
            }
        }
        for (gb, dl) in g.head_bias.iter_mut().zip(&dlogits) {
            *gb += dl;
        }
        if let Some(eg) = &extra_grads {
            for (dza, e) in dz.iter_mut().zip(&eg[s]) {
                *dza += e;
            }
        }

        let mut dh = vec![0.0; h];
        for (j, dhj) in dh.iter_mut().enumerate() {
            let hj = t.hidden[j];
            let erow = p.embed_weights.row(j);
            let grow = g.embed_weights.row_mut(j);
            let mut acc = 0.0;
            for ((gw, &w), &dza) in grow.iter_mut().zip(erow).zip(&dz) {
                *gw += hj * dza;
                acc += w * dza;
            }
            *dhj = if t.hidden_pre[j] > 0.0 { acc } else { 0.0 };
        }
        for (gb, dza) in g.embed_bias.iter_mut().zip(&dz) {
            *gb += dza;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (gw, dhj) in g.hidden_weights.row_mut(i).iter_mut().zip(&dh) {
                *gw += xi * dhj;
            }
        }
        for (gb, dhj) in g.hidden_bias.iter_mut().zip(&dh) {
            *gb += dhj;
        }
    }
    Ok((
        LossBreakdown {
            cls,
            extra: extra_loss,
            total,
        },
        g,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub optimizer: Optimizer,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 64,
            embed_dim: 16,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            optimizer: Optimizer::Sgd,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |what: &str| Err(PmalError::Validation(format!("{what} must be positive")));
        if self.hidden_dim == 0 {
            return bad("hidden_dim");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(PmalError::Validation("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PmalError::Validation(
                "weight_decay must be non-negative".into(),
            ));
        }
        if self.batch_size > n {
            return Err(PmalError::Validation(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Hooks a training loop calls to obtain the extra loss for each step.
pub trait TrainingObjective {
    fn begin_epoch(&mut self, _model: &MlpModel, _epoch: usize) -> Result<()> {
        Ok(())
    }

    fn begin_step(&mut self, _model: &MlpModel) -> Result<()> {
        Ok(())
    }

    fn extra_loss(&self) -> Option<&dyn EmbeddingLoss> {
        None
    }
}

/// Plain softmax cross-entropy.
pub struct SoftmaxOnly;

impl TrainingObjective for SoftmaxOnly {}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// One entry per optimization step.
    pub steps: Vec<LossBreakdown>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean cross-entropy over the whole dataset before the first step.
    pub initial_loss: f64,
    /// Mean cross-entropy over the whole dataset after the last step.
    pub final_loss: f64,
}

fn mean_cross_entropy(model: &MlpModel, dataset: &LabeledDataset) -> Result<f64> {
    let outs = model.forward_all(dataset)?;
    let sum: f64 = outs
        .iter()
        .zip(dataset.labels())
        .map(|(o, &l)| -o.probabilities[l as usize].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(sum / dataset.len() as f64)
}

enum OptimizerState {
    Sgd { velocity: MlpParams },
    Adam { m: MlpParams, v: MlpParams, t: i32 },
}

impl OptimizerState {
    fn new(kind: Optimizer, like: &MlpParams) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd {
                velocity: like.zeros_like(),
            },
            Optimizer::Adam => OptimizerState::Adam {
                m: like.zeros_like(),
                v: like.zeros_like(),
                t: 0,
            },
        }
    }

    fn apply(&mut self, params: &mut MlpParams, grads: &MlpParams, cfg: &TrainConfig, lr: f64) {
        match self {
            OptimizerState::Sgd { velocity } => {
                for ((p, g), v) in params
                    .slices_mut()
                    .into_iter()
                    .zip(grads.slices())
                    .zip(velocity.slices_mut())
                {
                    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        let grad = gi + cfg.weight_decay * *pi;
                        *vi = cfg.momentum * *vi + grad;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let beta1 = cfg.momentum;
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for (((p, g), ms), vs) in params
                    .slices_mut()
                    .into_iter()
                    .zip(grads.slices())
                    .zip(m.slices_mut())
                    .zip(v.slices_mut())
                {
                    for (((pi, gi), mi), vi) in
                        p.iter_mut().zip(g).zip(ms.iter_mut()).zip(vs.iter_mut())
                    {
                        let grad = gi + cfg.weight_decay * *pi;
                        *mi = beta1 * *mi + (1.0 - beta1) * grad;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * grad * grad;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Runs mini-batch training from `model`, consulting `objective` for the
/// extra loss term. Shuffling is a seeded Fisher–Yates per epoch; the last
/// short batch is kept.
pub fn train_with_objective(
    mut model: MlpModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    objective: &mut dyn TrainingObjective,
) -> Result<(MlpModel, TrainHistory)> {
    if dataset.is_empty() {
        return Err(PmalError::Validation("training set is empty".into()));
    }
    if dataset.feature_dim() != model.input_dim() || dataset.class_count() != model.class_count {
        return Err(PmalError::Dimension {
            expected: model.input_dim(),
            actual: dataset.feature_dim(),
            context: "dataset features vs model input",
        });
    }
    cfg.validate(dataset.len())?;

    let mut history = TrainHistory {
        initial_loss: mean_cross_entropy(&model, dataset)?,
        ..Default::default()
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut state = OptimizerState::new(cfg.optimizer, &model.params);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        objective.begin_epoch(&model, epoch)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            objective.begin_step(&model)?;
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (dataset.feature(i), dataset.label(i)))
                .collect();
            let (loss, grads) = match loss_and_gradients(&model, &batch, objective.extra_loss()) {
                Ok(v) => v,
                Err(PmalError::Numerical(_)) => {
                    return Err(PmalError::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            state.apply(&mut model.params, &grads, cfg, lr);
            if !model.params.is_finite() {
                return Err(PmalError::Divergence {
                    epoch,
                    step,
                    loss: loss.total,
                });
            }
            history.steps.push(loss);
            epoch_sum += loss.total;
            batches += 1;
            step += 1;
        }
        history.epoch_loss.push(epoch_sum / batches as f64);
        log::debug!(
            "epoch {epoch}: lr {lr:.5} loss {:.5}",
            epoch_sum / batches as f64
        );
    }
    history.final_loss = mean_cross_entropy(&model, dataset)?;
    Ok((model, history))
}

/// Trains a fresh softmax classifier initialised from `cfg.rng_seed`.
pub fn train_classifier(
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    if dataset.class_count() < 2 {
        return Err(PmalError::Validation("need at least 2 classes".into()));
    }
    let model = MlpModel::new(
        [dataset.feature_dim(), cfg.hidden_dim, cfg.embed_dim],
        dataset.class_count(),
        cfg.rng_seed,
    );
    train_with_objective(model, dataset, cfg, &mut SoftmaxOnly)
}

/// Embeds every sample of `dataset` (rounded to `f32` so the space can be
/// archived losslessly) and copies the head.
pub fn extract_embedding_space(
    model: &MlpModel,
    dataset: &LabeledDataset,
    run_id: u32,
) -> Result<EmbeddingSpace> {
    if dataset.feature_dim() != model.input_dim() || dataset.class_count() != model.class_count {
        return Err(PmalError::Dimension {
            expected: model.input_dim(),
            actual: dataset.feature_dim(),
            context: "dataset features vs model input",
        });
    }
    let rows: Vec<Vec<f64>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| model.embed(dataset.feature(i)))
        .collect::<Result<_>>()?;
    let embeddings = if rows.is_empty() {
        Matrix::zeros(0, model.embed_dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    let space = EmbeddingSpace::new(
        run_id,
        embeddings,
        model.params.head_weights.clone(),
        model.params.head_bias.clone(),
        dataset.checksum(),
    )?;
    Ok(space.quantized())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    layer_sizes: [usize; 3],
    k: usize,
    seed: u64,
    matrices: Vec<crate::datastore::MatrixEntry>,
}

const CHECKPOINT_FILES: [&str; 6] = [
    "hidden_weights.bin",
    "hidden_bias.bin",
    "embed_weights.bin",
    "embed_bias.bin",
    "head_weights.bin",
    "head_bias.bin",
];

impl MlpModel {
    /// Parameters are rounded to `f32` on the way out.
    pub fn quantized(&self) -> MlpModel {
        MlpModel {
            params: self.params.quantized(),
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        prepare_output_dir(dir, force)?;
        let q = self.params.quantized();
        let mats = [
            q.hidden_weights.clone(),
            Matrix::from_vec(1, q.hidden_bias.len(), q.hidden_bias.clone())?,
            q.embed_weights.clone(),
            Matrix::from_vec(1, q.embed_bias.len(), q.embed_bias.clone())?,
            q.head_weights.clone(),
            Matrix::from_vec(1, q.head_bias.len(), q.head_bias.clone())?,
        ];
        let mut entries = Vec::new();
        for (name, m) in CHECKPOINT_FILES.iter().zip(&mats) {
            write_matrix_file(&dir.join(name), m)?;
            entries.push(crate::datastore::MatrixEntry {
                file: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        let manifest = CheckpointManifest {
            format: "PMAL".into(),
            version: FORMAT_VERSION,
            layer_sizes: self.layer_sizes,
            k: self.class_count,
            seed: self.rng_seed,
            matrices: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<MlpModel> {
        let mp = dir.join("manifest.json");
        let m: CheckpointManifest = read_json(&mp)?;
        if m.format != "PMAL" || m.version != FORMAT_VERSION {
            return Err(PmalError::archive(&mp, "not a version-1 PMAL checkpoint"));
        }
        if m.matrices.len() != 6 {
            return Err(PmalError::archive(&mp, "checkpoint must list 6 matrices"));
        }
        let [f, h, d] = m.layer_sizes;
        let k = m.k;
        let shapes = [(f, h), (1, h), (h, d), (1, d), (d, k), (1, k)];
        let mut mats = Vec::with_capacity(6);
        for (entry, shape) in m.matrices.iter().zip(shapes) {
            let path = dir.join(&entry.file);
            let mat = read_matrix_file(&path)?;
            if mat.shape() != shape || (entry.rows, entry.cols) != shape {
                return Err(PmalError::archive(
                    path,
                    format!(
                        "expected {}x{}, found {}x{}",
                        shape.0,
                        shape.1,
                        mat.rows(),
                        mat.cols()
                    ),
                ));
            }
            mats.push(mat);
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("six matrices");
        let params = MlpParams {
            hidden_weights: next(),
            hidden_bias: next().as_slice().to_vec(),
            embed_weights: next(),
            embed_bias: next().as_slice().to_vec(),
            head_weights: next(),
            head_bias: next().as_slice().to_vec(),
        };
        Ok(MlpModel {
            layer_sizes: m.layer_sizes,
            class_count: k,
            params,
            rng_seed: m.seed,
        })
    }
}
