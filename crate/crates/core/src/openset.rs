//! Rejection scores, closed-set accuracy and exact AUROC.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, MlpModel};
use crate::datastore::LabeledDataset;
use crate::error::{PmalError, Result};
use crate::protolearn::{class_distances, DistanceMode, PrototypeEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionRule {
    /// Maximum softmax probability.
    Pr,
    /// Negated distance to the nearest prototype set.
    Dr,
}

impl std::fmt::Display for RejectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectionRule::Pr => "PR",
            RejectionRule::Dr => "DR",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsrScore {
    pub sample_id: u32,
    pub is_known: bool,
    /// Larger means more likely known.
    pub score: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OsrScores {
    pub samples: Vec<OsrScore>,
}

impl OsrScores {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, other: OsrScores) {
        self.samples.extend(other.samples);
    }

    /// Builds a score set from raw known and unknown score lists.
    pub fn from_split(known: &[f64], unknown: &[f64]) -> Self {
        let mk = |s: f64, is_known: bool, i: usize| OsrScore {
            sample_id: i as u32,
            is_known,
            score: s,
            predicted_class: 0,
        };
        let mut samples: Vec<OsrScore> = known
            .iter()
            .enumerate()
            .map(|(i, &s)| mk(s, true, i))
            .collect();
        samples.extend(
            unknown
                .iter()
                .enumerate()
                .map(|(i, &s)| mk(s, false, known.len() + i)),
        );
        OsrScores { samples }
    }
}

/// Score = max softmax probability; prediction = its argmax.
pub fn score_pr(model: &MlpModel, samples: &LabeledDataset, is_known: bool) -> Result<OsrScores> {
    let outs = model.forward_all(samples)?;
    Ok(OsrScores {
        samples: outs
            .into_iter()
            .zip(samples.ids())
            .map(|(o, &id)| {
                let k = argmax(&o.probabilities);
                OsrScore {
                    sample_id: id,
                    is_known,
                    score: o.probabilities[k],
                    predicted_class: k,
                }
            })
            .collect(),
    })
}

/// Score = −min_k d(z, P_k); prediction = nearest prototype set, ties to the
/// smaller class index.
pub fn score_dr(
    model: &MlpModel,
    protos: &PrototypeEmbeddings,
    samples: &LabeledDataset,
    is_known: bool,
    mode: DistanceMode,
) -> Result<OsrScores> {
    let scale_dim = model.embed_dim();
    let scored = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let z = model.embed(samples.feature(i))?;
            let d = class_distances(&z, protos, mode, scale_dim)?;
            let mut best = 0;
            for (k, &dk) in d.iter().enumerate() {
                if dk < d[best] {
                    best = k;
                }
            }
            Ok(OsrScore {
                sample_id: samples.ids()[i],
                is_known,
                score: -d[best],
                predicted_class: best,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OsrScores { samples: scored })
}

fn split_counts(scores: &OsrScores) -> Result<(usize, usize)> {
    let known = scores.samples.iter().filter(|s| s.is_known).count();
    let unknown = scores.len() - known;
    if known == 0 || unknown == 0 {
        return Err(PmalError::Validation(
            "AUROC needs at least one known and one unknown sample".into(),
        ));
    }
    if scores.samples.iter().any(|s| !s.score.is_finite()) {
        return Err(PmalError::Validation("non-finite rejection score".into()));
    }
    Ok((known, unknown))
}

/// Probability that a random known sample outscores a random unknown one,
/// ties counted half. Uses mid-ranks, O(n log n).
pub fn auroc(scores: &OsrScores) -> Result<f64> {
    let (n_known, n_unknown) = split_counts(scores)?;
    let mut order: Vec<&OsrScore> = scores.samples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    // twice the rank sum keeps mid-ranks integral
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && order[end + 1].score == order[start].score {
            end += 1;
        }
        let mid2 = (start + 1 + end + 1) as u128;
        let known_in_group = order[start..=end].iter().filter(|s| s.is_known).count() as u128;
        rank_sum2 += mid2 * known_in_group;
        start = end + 1;
    }
    let nk = n_known as u128;
    let u2 = rank_sum2 - nk * (nk + 1);
    Ok(u2 as f64 / (2.0 * n_known as f64 * n_unknown as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC with one point per distinct threshold, from (0,0) at +∞ to (1,1).
pub fn roc_points(scores: &OsrScores) -> Result<Vec<RocPoint>> {
    let (n_known, n_unknown) = split_counts(scores)?;
    let mut order: Vec<&OsrScore> = scores.samples.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].is_known {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_unknown as f64,
            tpr: tp as f64 / n_known as f64,
            threshold: t,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC point list.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsrReport {
    pub rule: RejectionRule,
    pub closed_set_accuracy: f64,
    pub auroc: f64,
    pub roc_points: Vec<RocPoint>,
    pub known_count: usize,
    pub unknown_count: usize,
}

impl OsrReport {
    pub fn to_text(&self) -> String {
        format!(
            "rule = {}\nknown_samples = {}\nunknown_samples = {}\naccuracy = {:.6}\nauroc = {:.6}\n",
            self.rule, self.known_count, self.unknown_count, self.closed_set_accuracy, self.auroc
        )
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc_points {
            writeln!(out, "{:e},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        out
    }

    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.roc_csv()).map_err(|e| PmalError::io(path, e))
    }
}

/// Scores known and unknown test sets under `rule`, reporting closed-set
/// accuracy on the knowns and AUROC on their union.
pub fn evaluate(
    model: &MlpModel,
    protos: Option<&PrototypeEmbeddings>,
    known: &LabeledDataset,
    unknown: &LabeledDataset,
    rule: RejectionRule,
    mode: DistanceMode,
) -> Result<OsrReport> {
    if known.is_empty() || unknown.is_empty() {
        return Err(PmalError::Validation(
            "known and unknown test sets must be non-empty".into(),
        ));
    }
    let score = |ds: &LabeledDataset, is_known: bool| match rule {
        RejectionRule::Pr => score_pr(model, ds, is_known),
        RejectionRule::Dr => {
            let p = protos.ok_or_else(|| {
                PmalError::Validation("distance rejection needs prototype embeddings".into())
            })?;
            score_dr(model, p, ds, is_known, mode)
        }
    };
    let mut scores = score(known, true)?;
    let correct = scores
        .samples
        .iter()
        .zip(known.labels())
        .filter(|(s, &l)| s.predicted_class == l as usize)
        .count();
    scores.extend(score(unknown, false)?);
    Ok(OsrReport {
        rule,
        closed_set_accuracy: correct as f64 / known.len() as f64,
        auroc: auroc(&scores)?,
        roc_points: roc_points(&scores)?,
        known_count: known.len(),
        unknown_count: unknown.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = OsrScores::from_split(&[0.9, 0.8], &[0.3, 0.1]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn all_tied_is_chance() {
        let s = OsrScores::from_split(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn mixed_pairs() {
        // pairs: (0.9 > 0.5) = 1, (0.2 > 0.5) = 0
        let s = OsrScores::from_split(&[0.9, 0.2], &[0.5]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_fatal() {
        assert!(auroc(&OsrScores::from_split(&[0.1, 0.2], &[])).is_err());
        assert!(auroc(&OsrScores::from_split(&[], &[0.1])).is_err());
    }

    #[test]
    fn roc_endpoints_and_area() {
        let s = OsrScores::from_split(&[0.9, 0.4, 0.4, 0.7], &[0.4, 0.1, 0.8]);
        let pts = roc_points(&s).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        assert!((trapezoid_area(&pts) - auroc(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_text_is_key_value() {
        let r = OsrReport {
            rule: RejectionRule::Dr,
            closed_set_accuracy: 1.0,
            auroc: 0.75,
            roc_points: vec![],
            known_count: 3,
            unknown_count: 4,
        };
        let t = r.to_text();
        assert!(t.contains("rule = DR\n"));
        assert!(t.contains("auroc = 0.750000\n"));
    }
}
