//! Embedding topology, topology robustness across runs, and ε-thresholded
//! candidate selection.
//!
//! Scores are carried in the log domain as well: `ln r = −gap` for two runs.
//! Gaps over thousands of reference samples routinely exceed 700, where
//! `exp(−gap)` underflows, so thresholding is done on `ln r`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datastore::{EmbeddingSpace, LabeledDataset, RunBundle};
use crate::error::{PmalError, Result};
use crate::metric::{euclidean, mahalanobis, MetricModel};

/// Ordered reference samples against which topologies are measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSet {
    ids: Vec<u32>,
    indices: Vec<usize>,
}

impl ReferenceSet {
    /// Every sample of the dataset, in storage order.
    pub fn all(dataset: &LabeledDataset) -> Self {
        ReferenceSet {
            ids: dataset.ids().to_vec(),
            indices: (0..dataset.len()).collect(),
        }
    }

    /// A seeded uniform subsample of `size` samples, kept in storage order.
    pub fn subsample(dataset: &LabeledDataset, size: usize, seed: u64) -> Self {
        if size >= dataset.len() {
            return Self::all(dataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = sample(&mut rng, dataset.len(), size).into_vec();
        indices.sort_unstable();
        ReferenceSet {
            ids: indices.iter().map(|&i| dataset.ids()[i]).collect(),
            indices,
        }
    }

    pub fn from_ids(dataset: &LabeledDataset, ids: &[u32]) -> Result<Self> {
        let indices = ids
            .iter()
            .map(|&id| dataset.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReferenceSet {
            ids: ids.to_vec(),
            indices,
        })
    }

    /// Reference set over storage indices `0..n` with ids equal to indices.
    pub fn sequential(n: usize) -> Self {
        ReferenceSet {
            ids: (0..n as u32).collect(),
            indices: (0..n).collect(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mahalanobis distances from sample `index` to every reference sample.
pub fn topology(
    metric: &MetricModel,
    space: &EmbeddingSpace,
    index: usize,
    reference: &ReferenceSet,
) -> Result<Vec<f64>> {
    let n = space.len();
    let check = |i: usize| {
        if i < n {
            Ok(i)
        } else {
            Err(PmalError::UnknownSample(i as u32))
        }
    };
    let zi = space.embedding(check(index)?);
    reference
        .indices()
        .iter()
        .map(|&j| mahalanobis(metric, zi, space.embedding(check(j)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RobustnessConfig {
    /// Divide the topology gap by `sqrt(|reference|)`.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    scores: Vec<f64>,
    log_scores: Vec<f64>,
    pub reference_set: Vec<u32>,
    pub pair_count: usize,
}

impl RobustnessTable {
    /// Builds a table from log-domain scores (each ≤ 0).
    pub fn from_log_scores(
        log_scores: Vec<f64>,
        reference_set: Vec<u32>,
        pair_count: usize,
    ) -> Result<Self> {
        if let Some(bad) = log_scores.iter().find(|v| !(**v <= 0.0)) {
            return Err(PmalError::Validation(format!(
                "log robustness {bad} outside (-inf, 0]"
            )));
        }
        let scores = log_scores
            .iter()
            .map(|&l| l.exp().max(f64::MIN_POSITIVE))
            .collect();
        Ok(RobustnessTable {
            scores,
            log_scores,
            reference_set,
            pair_count,
        })
    }

    /// Builds a table from scores in (0, 1].
    pub fn from_scores(
        scores: Vec<f64>,
        reference_set: Vec<u32>,
        pair_count: usize,
    ) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(PmalError::Validation(format!(
                "robustness {bad} outside (0, 1]"
            )));
        }
        Ok(RobustnessTable {
            log_scores: scores.iter().map(|v| v.ln()).collect(),
            scores,
            reference_set,
            pair_count,
        })
    }

    /// `r` per sample, in storage order.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn log_scores(&self) -> &[f64] {
        &self.log_scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// CSV `sample_id,label,r`.
    pub fn to_csv(&self, dataset: &LabeledDataset) -> Result<String> {
        if dataset.len() != self.len() {
            return Err(PmalError::Dimension {
                expected: dataset.len(),
                actual: self.len(),
                context: "robustness table vs dataset",
            });
        }
        let mut out = String::from("sample_id,label,r\n");
        for (i, r) in self.scores.iter().enumerate() {
            writeln!(out, "{},{},{:e}", dataset.ids()[i], dataset.label(i), r).unwrap();
        }
        Ok(out)
    }

    pub fn write_csv(&self, dataset: &LabeledDataset, path: &Path) -> Result<()> {
        let text = self.to_csv(dataset)?;
        std::fs::write(path, text).map_err(|e| PmalError::io(path, e))
    }
}

/// `ln(mean(exp(x)))`, evaluated stably.
fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (s / xs.len() as f64).ln()
}

/// Topology robustness of every sample. Each run's topology is measured with
/// its own metric; for U > 2 the pairwise `r` is averaged over all unordered
/// run pairs.
pub fn robustness(
    bundle: &RunBundle,
    metrics: &[MetricModel],
    reference: &ReferenceSet,
    cfg: RobustnessConfig,
) -> Result<RobustnessTable> {
    let runs = bundle.runs();
    if runs.len() < 2 {
        return Err(PmalError::Alignment(
            "robustness needs at least 2 runs".into(),
        ));
    }
    if metrics.len() != runs.len() {
        return Err(PmalError::Dimension {
            expected: runs.len(),
            actual: metrics.len(),
            context: "one metric per run",
        });
    }
    if reference.is_empty() {
        return Err(PmalError::Validation("reference set is empty".into()));
    }
    let n = bundle.sample_count();
    if let Some(&bad) = reference.indices().iter().find(|&&j| j >= n) {
        return Err(PmalError::UnknownSample(bad as u32));
    }
    for (space, metric) in runs.iter().zip(metrics) {
        if metric.dim() != space.embedding_dim() {
            return Err(PmalError::Dimension {
                expected: space.embedding_dim(),
                actual: metric.dim(),
                context: "metric dimension vs embedding dimension",
            });
        }
    }

    let projected: Vec<Vec<Vec<f64>>> = runs
        .iter()
        .zip(metrics)
        .map(|(s, m)| m.project_rows(s.embeddings()))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..runs.len())
        .flat_map(|u| (u + 1..runs.len()).map(move |v| (u, v)))
        .collect();
    let norm = if cfg.normalize {
        1.0 / (reference.len() as f64).sqrt()
    } else {
        1.0
    };

    let log_scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let topo: Vec<Vec<f64>> = projected
                .iter()
                .map(|p| {
                    reference
                        .indices()
                        .iter()
                        .map(|&j| euclidean(&p[i], &p[j]))
                        .collect()
                })
                .collect();
            let logs: Vec<f64> = pairs
                .iter()
                .map(|&(u, v)| -euclidean(&topo[u], &topo[v]) * norm)
                .collect();
            log_mean_exp(&logs).min(0.0)
        })
        .collect();

    RobustnessTable::from_log_scores(log_scores, reference.ids().to_vec(), pairs.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sample_id: u32,
    /// Storage index in the source dataset.
    pub index: usize,
    pub r: f64,
    pub log_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSets {
    /// `classes[k]` is `C_k` in storage order.
    pub classes: Vec<Vec<Candidate>>,
    pub threshold_used: f64,
}

impl CandidateSets {
    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }
}

/// `C_k = {x ∈ S_k : r(x) ≥ ε · max_{S_k} r}`; the class maximisers always
/// qualify.
pub fn select_candidates(
    table: &RobustnessTable,
    dataset: &LabeledDataset,
    epsilon: f64,
) -> Result<CandidateSets> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(PmalError::Validation(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if table.len() != dataset.len() {
        return Err(PmalError::Dimension {
            expected: dataset.len(),
            actual: table.len(),
            context: "robustness table vs dataset",
        });
    }
    let log_eps = epsilon.ln();
    let mut classes = Vec::with_capacity(dataset.class_count());
    for k in 0..dataset.class_count() {
        let members = dataset.class_indices(k);
        if members.is_empty() {
            return Err(PmalError::EmptyClass(k));
        }
        let max = members
            .iter()
            .map(|&i| table.log_scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let threshold = max + log_eps;
        let chosen = members
            .into_iter()
            .filter(|&i| table.log_scores[i] >= threshold || table.log_scores[i] == max)
            .map(|i| Candidate {
                sample_id: dataset.ids()[i],
                index: i,
                r: table.scores[i],
                log_r: table.log_scores[i],
            })
            .collect();
        classes.push(chosen);
    }
    Ok(CandidateSets {
        classes,
        threshold_used: epsilon,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0 + 1.0;
            for &i in &idx[s..=e] {
                r[i] = avg;
            }
            s = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
