//! Prototype margin learning.
//!
//! Prototypes are fixed training samples; their embeddings are recomputed
//! from the current model and treated as constants, so gradients only reach
//! the parameters through the embedding of the sample being scored.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    softmax, train_with_objective, EmbeddingLoss, ExtraLoss, MlpModel, TrainConfig, TrainHistory,
    TrainingObjective,
};
use crate::datastore::LabeledDataset;
use crate::error::{PmalError, Result};
use crate::mining::PrototypeBook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Cosine distance to the attention-weighted prototype combination.
    Attention,
    /// Cosine distance to the closest single prototype.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoLossConfig {
    pub margin: f64,
    pub weight: f64,
    pub distance_mode: DistanceMode,
    pub refresh_policy: RefreshPolicy,
    /// Dimension in the `sqrt(d)` attention scale; `None` means the embedding dimension.
    pub scale_dim: Option<usize>,
}

impl Default for ProtoLossConfig {
    fn default() -> Self {
        ProtoLossConfig {
            margin: 0.5,
            weight: 1.0,
            distance_mode: DistanceMode::Attention,
            refresh_policy: RefreshPolicy::PerStep,
            scale_dim: None,
        }
    }
}

impl ProtoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(PmalError::Validation("margin must be positive".into()));
        }
        if !(self.weight >= 0.0) {
            return Err(PmalError::Validation(
                "lambda_p must be non-negative".into(),
            ));
        }
        if self.scale_dim == Some(0) {
            return Err(PmalError::Validation("scale_dim must be positive".into()));
        }
        Ok(())
    }

    fn scale_for(&self, dim: usize) -> usize {
        self.scale_dim.unwrap_or(dim)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity and its gradient with respect to `z` (`v` held fixed),
/// plus the gradient with respect to `v`.
fn cosine_parts(z: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (nz, nv) = (norm(z), norm(v));
    if nz == 0.0 || nv == 0.0 || !nz.is_finite() || !nv.is_finite() {
        return Err(PmalError::Numerical(
            "cosine undefined for a zero-norm vector".into(),
        ));
    }
    let zv = dot(z, v);
    let c = zv / (nz * nv);
    let dz = z
        .iter()
        .zip(v)
        .map(|(zi, vi)| vi / (nz * nv) - zv * zi / (nz * nz * nz * nv))
        .collect();
    let dv = z
        .iter()
        .zip(v)
        .map(|(zi, vi)| zi / (nz * nv) - zv * vi / (nz * nv * nv * nv))
        .collect();
    Ok((c, dz, dv))
}

/// Point-to-set distance with its gradient with respect to `z`
/// (prototype columns held constant).
pub fn point_to_set_distance_grad(
    z: &[f64],
    protos: &[Vec<f64>],
    mode: DistanceMode,
    scale_dim: usize,
) -> Result<(f64, Vec<f64>)> {
    if protos.is_empty() {
        return Err(PmalError::Validation("prototype set is empty".into()));
    }
    if let Some(p) = protos.iter().find(|p| p.len() != z.len()) {
        return Err(PmalError::Dimension {
            expected: z.len(),
            actual: p.len(),
            context: "prototype embedding",
        });
    }
    match mode {
        DistanceMode::Nearest => {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for p in protos {
                let (c, dz, _) = cosine_parts(z, p)?;
                let d = 1.0 - c.clamp(-1.0, 1.0);
                if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                    best = Some((d, dz.into_iter().map(|g| -g).collect()));
                }
            }
            Ok(best.expect("non-empty prototype set"))
        }
        DistanceMode::Attention => {
            let scale = (scale_dim as f64).sqrt();
            let logits: Vec<f64> = protos.iter().map(|p| dot(z, p) / scale).collect();
            let a = softmax(&logits);
            let mut v = vec![0.0; z.len()];
            for (al, p) in a.iter().zip(protos) {
                for (vi, pi) in v.iter_mut().zip(p) {
                    *vi += al * pi;
                }
            }
            let (c, mut dz, dv) = cosine_parts(z, &v)?;
            let h: Vec<f64> = protos.iter().map(|p| dot(&dv, p)).collect();
            let hbar = dot(&a, &h);
            for ((am, hm), p) in a.iter().zip(&h).zip(protos) {
                let coef = am * (hm - hbar) / scale;
                for (g, pi) in dz.iter_mut().zip(p) {
                    *g += coef * pi;
                }
            }
            Ok((
                1.0 - c.clamp(-1.0, 1.0),
                dz.into_iter().map(|g| -g).collect(),
            ))
        }
    }
}

/// Distance in `[0, 2]` from an embedding to a prototype set (one prototype
/// embedding per entry of `protos`).
pub fn point_to_set_distance(
    z: &[f64],
    protos: &[Vec<f64>],
    mode: DistanceMode,
    scale_dim: usize,
) -> Result<f64> {
    point_to_set_distance_grad(z, protos, mode, scale_dim).map(|(d, _)| d)
}

/// Current-model embeddings of the fixed prototype samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEmbeddings {
    /// `classes[k][l]` is the embedding of the l-th prototype of class k.
    pub classes: Vec<Vec<Vec<f64>>>,
    /// Identifies the parameter snapshot the embeddings were taken from.
    pub model_version: u64,
}

/// Raw features of the prototype samples, resolved once from the dataset.
#[derive(Debug, Clone)]
pub struct PrototypeFeatures {
    classes: Vec<Vec<Vec<f64>>>,
}

impl PrototypeFeatures {
    pub fn resolve(book: &PrototypeBook, dataset: &LabeledDataset) -> Result<Self> {
        book.validate_against(dataset)?;
        let classes = book
            .classes
            .iter()
            .map(|protos| {
                protos
                    .iter()
                    .map(|p| Ok(dataset.feature(dataset.index_of(p.sample_id)?).to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrototypeFeatures { classes })
    }

    pub fn embed(&self, model: &MlpModel, model_version: u64) -> Result<PrototypeEmbeddings> {
        let classes = self
            .classes
            .iter()
            .map(|c| c.iter().map(|x| model.embed(x)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(PrototypeEmbeddings {
            classes,
            model_version,
        })
    }
}

/// Distances from `z` to every class's prototype set.
pub fn class_distances(
    z: &[f64],
    protos: &PrototypeEmbeddings,
    mode: DistanceMode,
    scale_dim: usize,
) -> Result<Vec<f64>> {
    protos
        .classes
        .iter()
        .map(|p| point_to_set_distance(z, p, mode, scale_dim))
        .collect()
}

/// Closest class other than `own`; ties go to the smaller class index.
fn rival(distances: &[f64], own: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, &d) in distances.iter().enumerate() {
        if k != own && best.map_or(true, |b| d < distances[b]) {
            best = Some(k);
        }
    }
    best.expect("at least two classes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeLossValue {
    /// Mean hinge over the batch.
    pub loss: f64,
    /// Rival class chosen for each sample.
    pub rivals: Vec<usize>,
    /// Gradient of the (unweighted) mean hinge with respect to each embedding.
    pub grads: Vec<Vec<f64>>,
}

/// Mean of `[d(z, P_own) − d(z, P_rival) + δ]₊` over the batch, where the
/// rival is the closest prototype set of another class.
pub fn prototype_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    protos: &PrototypeEmbeddings,
    cfg: &ProtoLossConfig,
) -> Result<PrototypeLossValue> {
    let k = protos.classes.len();
    if k < 2 {
        return Err(PmalError::Validation(
            "prototype loss needs at least two classes".into(),
        ));
    }
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(PmalError::Validation("batch is empty or misaligned".into()));
    }
    let scale = 1.0 / embeddings.len() as f64;
    let mut loss = 0.0;
    let mut rivals = Vec::with_capacity(labels.len());
    let mut grads = Vec::with_capacity(labels.len());
    for (z, &y) in embeddings.iter().zip(labels) {
        if y >= k {
            return Err(PmalError::Validation(format!(
                "no prototype set for class {y}"
            )));
        }
        let scale_dim = cfg.scale_for(z.len());
        let parts = protos
            .classes
            .iter()
            .map(|p| point_to_set_distance_grad(z, p, cfg.distance_mode, scale_dim))
            .collect::<Result<Vec<_>>>()?;
        let dists: Vec<f64> = parts.iter().map(|(d, _)| *d).collect();
        let u = rival(&dists, y);
        let hinge = dists[y] - dists[u] + cfg.margin;
        let mut g = vec![0.0; z.len()];
        if hinge > 0.0 {
            loss += hinge * scale;
            for ((gi, a), b) in g.iter_mut().zip(&parts[y].1).zip(&parts[u].1) {
                *gi = (a - b) * scale;
            }
        }
        rivals.push(u);
        grads.push(g);
    }
    Ok(PrototypeLossValue {
        loss,
        rivals,
        grads,
    })
}

/// Prototype loss bound to a fixed set of prototype embeddings.
pub struct PrototypeLoss {
    pub protos: PrototypeEmbeddings,
    pub cfg: ProtoLossConfig,
}

impl EmbeddingLoss for PrototypeLoss {
    fn evaluate(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<ExtraLoss> {
        let v = prototype_loss(embeddings, labels, &self.protos, &self.cfg)?;
        let w = self.cfg.weight;
        Ok(ExtraLoss {
            value: v.loss,
            weight: w,
            grads: v
                .grads
                .into_iter()
                .map(|g| g.into_iter().map(|x| x * w).collect())
                .collect(),
        })
    }
}

struct PrototypeObjective {
    features: PrototypeFeatures,
    loss: PrototypeLoss,
    version: u64,
}

impl PrototypeObjective {
    fn refresh(&mut self, model: &MlpModel) -> Result<()> {
        self.version += 1;
        self.loss.protos = self.features.embed(model, self.version)?;
        Ok(())
    }
}

impl TrainingObjective for PrototypeObjective {
    fn begin_epoch(&mut self, model: &MlpModel, _epoch: usize) -> Result<()> {
        if self.loss.cfg.refresh_policy == RefreshPolicy::PerEpoch {
            self.refresh(model)?;
        }
        Ok(())
    }

    fn begin_step(&mut self, model: &MlpModel) -> Result<()> {
        if self.loss.cfg.refresh_policy == RefreshPolicy::PerStep {
            self.refresh(model)?;
        }
        Ok(())
    }

    fn extra_loss(&self) -> Option<&dyn EmbeddingLoss> {
        Some(&self.loss)
    }
}

/// Continues training `model` on `L_cls + λ_p·L_p`.
pub fn optimize_embedding(
    model: MlpModel,
    dataset: &LabeledDataset,
    book: &PrototypeBook,
    train_cfg: &TrainConfig,
    proto_cfg: &ProtoLossConfig,
) -> Result<(MlpModel, TrainHistory)> {
    proto_cfg.validate()?;
    if book.class_count() < 2 {
        return Err(PmalError::Validation(
            "prototype loss needs at least two classes".into(),
        ));
    }
    let features = PrototypeFeatures::resolve(book, dataset)?;
    let protos = features.embed(&model, 0)?;
    let mut objective = PrototypeObjective {
        features,
        loss: PrototypeLoss {
            protos,
            cfg: *proto_cfg,
        },
        version: 0,
    };
    train_with_objective(model, dataset, train_cfg, &mut objective)
}

/// Mean distance from each sample of `eval` to its own class's prototype
/// set, with prototypes embedded by `model`.
pub fn mean_distance_to_own_set(
    model: &MlpModel,
    features: &PrototypeFeatures,
    eval: &LabeledDataset,
    cfg: &ProtoLossConfig,
) -> Result<f64> {
    let protos = features.embed(model, 0)?;
    if protos.classes.len() != eval.class_count() {
        return Err(PmalError::Dimension {
            expected: protos.classes.len(),
            actual: eval.class_count(),
            context: "prototype classes vs dataset classes",
        });
    }
    let scale_dim = cfg.scale_for(model.embed_dim());
    let mut sum = 0.0;
    for i in 0..eval.len() {
        let z = model.embed(eval.feature(i))?;
        sum += point_to_set_distance(
            &z,
            &protos.classes[eval.label(i)],
            cfg.distance_mode,
            scale_dim,
        )?;
    }
    Ok(sum / eval.len().max(1) as f64)
}

/// CSV `step,L_cls,L_p,L_total`.
pub fn loss_curve_csv(history: &TrainHistory) -> String {
    let mut out = String::from("step,L_cls,L_p,L_total\n");
    for (i, s) in history.steps.iter().enumerate() {
        writeln!(out, "{i},{:e},{:e},{:e}", s.cls, s.extra, s.total).unwrap();
    }
    out
}

pub fn write_loss_curve(history: &TrainHistory, path: &Path) -> Result<()> {
    std::fs::write(path, loss_curve_csv(history)).map_err(|e| PmalError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(classes: Vec<Vec<Vec<f64>>>) -> PrototypeEmbeddings {
        PrototypeEmbeddings {
            classes,
            model_version: 0,
        }
    }

    #[test]
    fn single_prototype_is_cosine_distance_in_both_modes() {
        let z = [1.0, 2.0, -0.5];
        let p = vec![vec![0.3, -1.0, 2.0]];
        let cos = dot(&z, &p[0]) / (norm(&z) * norm(&p[0]));
        for mode in [DistanceMode::Attention, DistanceMode::Nearest] {
            let d = point_to_set_distance(&z, &p, mode, 3).unwrap();
            assert!((d - (1.0 - cos)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_prototypes_give_zero() {
        let z = vec![0.4, -0.2];
        let p = vec![z.clone(), z.clone(), z.clone()];
        for mode in [DistanceMode::Attention, DistanceMode::Nearest] {
            assert!(point_to_set_distance(&z, &p, mode, 2).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_query_gives_one() {
        let z = [0.0, 0.0, 1.0];
        let p = vec![vec![1.0, 0.0, 0.0], vec![0.5, 2.0, 0.0]];
        let d = point_to_set_distance(&z, &p, DistanceMode::Attention, 3).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_are_errors() {
        let p = vec![vec![1.0, 0.0]];
        assert!(point_to_set_distance(&[0.0, 0.0], &p, DistanceMode::Attention, 2).is_err());
        let cancel = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        // z orthogonal to both: equal weights, z_att = 0
        assert!(point_to_set_distance(&[0.0, 1.0], &cancel, DistanceMode::Attention, 2).is_err());
        assert!(point_to_set_distance(&[1.0, 0.0], &[], DistanceMode::Nearest, 2).is_err());
    }

    #[test]
    fn hinge_arithmetic() {
        // own class at cosine distance 0.2, rival at 0.9
        let angle = |d: f64| (1.0f64 - d).acos();
        let at = |d: f64| vec![angle(d).cos(), angle(d).sin()];
        let cfg = ProtoLossConfig::default();
        let p = protos(vec![vec![at(0.2)], vec![at(0.9)]]);
        let v = prototype_loss(&[vec![1.0, 0.0]], &[0], &p, &cfg).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.rivals, vec![1]);
        let p = protos(vec![vec![at(0.8)], vec![at(0.4)]]);
        let v = prototype_loss(&[vec![1.0, 0.0]], &[0], &p, &cfg).unwrap();
        assert!((v.loss - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rival_is_never_own_class_and_ties_pick_smaller_index() {
        let d = [0.1, 0.5, 0.5, 0.7];
        assert_eq!(rival(&d, 0), 1);
        assert_eq!(rival(&d, 1), 0);
        assert_eq!(rival(&[0.3, 0.3], 0), 1);
    }

    #[test]
    fn single_class_book_is_rejected() {
        let p = protos(vec![vec![vec![1.0, 0.0]]]);
        assert!(prototype_loss(&[vec![1.0, 0.0]], &[0], &p, &ProtoLossConfig::default()).is_err());
    }

    #[test]
    fn loss_csv_header() {
        let h = TrainHistory::default();
        assert_eq!(loss_curve_csv(&h), "step,L_cls,L_p,L_total\n");
    }
}
