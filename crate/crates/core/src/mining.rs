//! Diversity filtering of candidate prototypes.
//!
//! For each class, every candidate is scored by its distance `E` to the
//! nearest candidate of strictly higher robustness (candidates with no such
//! neighbour keep `E = max(D_k)`), and the `T` candidates with the largest
//! `E` become the class prototypes. Local robustness maxima that sit far from
//! anything more robust therefore win, which spreads prototypes over the
//! modes of the class.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::datastore::{EmbeddingSpace, LabeledDataset, Matrix};
use crate::error::{PmalError, Result};
use crate::metric::{pairwise_distances, MetricModel};
use crate::uncertainty::{Candidate, CandidateSets};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub sample_id: u32,
    pub r: f64,
    /// 1-based selection rank within the class.
    pub rank: usize,
    pub e_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBook {
    /// `classes[k]` is `P_k` in selection order.
    pub classes: Vec<Vec<Prototype>>,
    pub prototype_count: usize,
}

impl PrototypeBook {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn ids(&self, class: usize) -> Vec<u32> {
        self.classes[class].iter().map(|p| p.sample_id).collect()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// CSV `class,rank,sample_id,r,e_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,rank,sample_id,r,e_value\n");
        for (k, protos) in self.classes.iter().enumerate() {
            for p in protos {
                writeln!(
                    out,
                    "{k},{},{},{:e},{:e}",
                    p.rank, p.sample_id, p.r, p.e_value
                )
                .unwrap();
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PmalError::io(path, e))
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<PrototypeBook> {
        let err = |line: usize, reason: String| PmalError::Csv {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "class,rank,sample_id,r,e_value" => {}
            _ => {
                return Err(err(
                    1,
                    "missing header class,rank,sample_id,r,e_value".into(),
                ))
            }
        }
        let mut classes: Vec<Vec<Prototype>> = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(err(no + 1, format!("expected 5 fields, got {}", f.len())));
            }
            let parse_err = |what: &str| err(no + 1, format!("bad {what}"));
            let class: usize = f[0].parse().map_err(|_| parse_err("class"))?;
            let rank: usize = f[1].parse().map_err(|_| parse_err("rank"))?;
            let sample_id: u32 = f[2].parse().map_err(|_| parse_err("sample_id"))?;
            let r: f64 = f[3].parse().map_err(|_| parse_err("r"))?;
            let e_value: f64 = f[4].parse().map_err(|_| parse_err("e_value"))?;
            if classes.len() <= class {
                classes.resize(class + 1, Vec::new());
            }
            if rank != classes[class].len() + 1 {
                return Err(err(
                    no + 1,
                    format!("rank {rank} out of sequence for class {class}"),
                ));
            }
            if classes[class].iter().any(|p| p.sample_id == sample_id) {
                return Err(err(no + 1, format!("duplicate sample {sample_id}")));
            }
            classes[class].push(Prototype {
                sample_id,
                r,
                rank,
                e_value,
            });
        }
        if let Some(k) = classes.iter().position(Vec::is_empty) {
            return Err(err(0, format!("class {k} has no prototypes")));
        }
        let prototype_count = classes.iter().map(Vec::len).max().unwrap_or(0);
        Ok(PrototypeBook {
            classes,
            prototype_count,
        })
    }

    pub fn read_csv(path: &Path) -> Result<PrototypeBook> {
        let text = std::fs::read_to_string(path).map_err(|e| PmalError::io(path, e))?;
        Self::from_csv(&text, path)
    }

    /// Checks every prototype id exists in `dataset` with the right label.
    pub fn validate_against(&self, dataset: &LabeledDataset) -> Result<()> {
        if self.class_count() != dataset.class_count() {
            return Err(PmalError::Validation(format!(
                "book has {} classes, dataset {}",
                self.class_count(),
                dataset.class_count()
            )));
        }
        for (k, protos) in self.classes.iter().enumerate() {
            for p in protos {
                let i = dataset.index_of(p.sample_id)?;
                if dataset.label(i) != k {
                    return Err(PmalError::Validation(format!(
                        "prototype {} is filed under class {k} but labelled {}",
                        p.sample_id,
                        dataset.label(i)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Selection order: larger `E`, then larger robustness, then smaller id.
fn selection_order(e: (f64, f64, u32), f: (f64, f64, u32)) -> Ordering {
    f.0.total_cmp(&e.0)
        .then(f.1.total_cmp(&e.1))
        .then(e.2.cmp(&f.2))
}

/// Per-class filtering on a precomputed distance matrix. `log_r` carries the
/// robustness in the log domain so that strict comparisons survive underflow.
pub fn filter_class(
    candidates: &[Candidate],
    distances: &Matrix,
    prototypes: usize,
) -> Vec<Prototype> {
    let n = candidates.len();
    let max_d = distances.as_slice().iter().cloned().fold(0.0, f64::max);
    let mut e = vec![max_d; n];
    for i in 0..n {
        let mut best: Option<f64> = None;
        for j in 0..n {
            if candidates[j].log_r > candidates[i].log_r {
                let d = distances[(i, j)];
                if best.map_or(true, |b| d < b) {
                    best = Some(d);
                }
            }
        }
        if let Some(d) = best {
            e[i] = d;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        selection_order(
            (e[a], candidates[a].log_r, candidates[a].sample_id),
            (e[b], candidates[b].log_r, candidates[b].sample_id),
        )
    });
    order
        .into_iter()
        .take(prototypes.min(n))
        .enumerate()
        .map(|(rank, i)| Prototype {
            sample_id: candidates[i].sample_id,
            r: candidates[i].r,
            rank: rank + 1,
            e_value: e[i],
        })
        .collect()
}

/// Mines `min(T, |C_k|)` prototypes per class; distances are measured in
/// `space` under `metric`.
pub fn filter_diverse(
    candidates: &CandidateSets,
    space: &EmbeddingSpace,
    metric: &MetricModel,
    prototypes: usize,
) -> Result<PrototypeBook> {
    if prototypes == 0 {
        return Err(PmalError::Validation(
            "prototype count T must be ≥ 1".into(),
        ));
    }
    let mut classes = Vec::with_capacity(candidates.classes.len());
    for (k, cands) in candidates.classes.iter().enumerate() {
        if cands.is_empty() {
            return Err(PmalError::EmptyClass(k));
        }
        if cands.len() < prototypes {
            log::warn!(
                "class {k}: only {} candidates for T = {prototypes}; taking all",
                cands.len()
            );
        }
        let indices: Vec<usize> = cands.iter().map(|c| c.index).collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= space.len()) {
            return Err(PmalError::UnknownSample(bad as u32));
        }
        let z = space.embeddings().select_rows(&indices);
        let d = pairwise_distances(metric, &z, &z)?;
        classes.push(filter_class(cands, &d, prototypes));
    }
    Ok(PrototypeBook {
        classes,
        prototype_count: prototypes,
    })
}

/// Literal greedy iteration: seed with the most robust candidate, then keep
/// appending the remaining candidate whose distance to its nearest
/// strictly-more-robust candidate is largest.
pub fn greedy_oracle(
    ids: &[u32],
    distances: &Matrix,
    r_scores: &[f64],
    prototypes: usize,
) -> Vec<u32> {
    let n = ids.len();
    let mut chosen: Vec<usize> = Vec::new();
    if n == 0 {
        return Vec::new();
    }
    let mut first = 0;
    for i in 1..n {
        if r_scores[i] > r_scores[first] || (r_scores[i] == r_scores[first] && ids[i] < ids[first])
        {
            first = i;
        }
    }
    chosen.push(first);
    while chosen.len() < prototypes.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let gap = (0..n)
                .filter(|&j| r_scores[j] > r_scores[i])
                .map(|j| distances[(i, j)])
                .fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((b, bgap)) => {
                    gap > bgap
                        || (gap == bgap
                            && (r_scores[i] > r_scores[b]
                                || (r_scores[i] == r_scores[b] && ids[i] < ids[b])))
                }
            };
            if better {
                best = Some((i, gap));
            }
        }
        chosen.push(best.expect("remaining candidate").0);
    }
    chosen.into_iter().map(|i| ids[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::euclidean;

    fn cands(rs: &[f64]) -> Vec<Candidate> {
        rs.iter()
            .enumerate()
            .map(|(i, &r)| Candidate {
                sample_id: i as u32,
                index: i,
                r,
                log_r: r.ln(),
            })
            .collect()
    }

    fn line_distances(points: &[f64]) -> Matrix {
        let rows: Vec<Vec<f64>> = points
            .iter()
            .map(|&a| points.iter().map(|&b| (a - b).abs()).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn hand_executed_line_example() {
        // positions 0, 1, 10 with r 1.0, 0.9, 0.8
        let d = line_distances(&[0.0, 1.0, 10.0]);
        let picked = filter_class(&cands(&[1.0, 0.9, 0.8]), &d, 2);
        assert_eq!(
            picked.iter().map(|p| p.sample_id).collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert_eq!(picked[0].e_value, 10.0);
        // nearest more-robust neighbour of position 10 is position 1
        assert_eq!(picked[1].e_value, 9.0);
        let all = filter_class(&cands(&[1.0, 0.9, 0.8]), &d, 5);
        assert_eq!(
            all.iter().map(|p| p.sample_id).collect::<Vec<_>>(),
            vec![0, 2, 1]
        );
        assert_eq!(all[2].e_value, 1.0);
        assert_eq!(
            greedy_oracle(&[0, 1, 2], &d, &[1.0, 0.9, 0.8], 2),
            vec![0, 2]
        );
    }

    #[test]
    fn single_candidate() {
        let picked = filter_class(&cands(&[0.4]), &Matrix::zeros(1, 1), 10);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].rank, 1);
    }

    #[test]
    fn equidistant_candidates_follow_robustness() {
        let n = 5;
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[(i, j)] = 1.0;
                }
            }
        }
        let rs = [0.3, 0.9, 0.5, 0.7, 0.1];
        let order: Vec<u32> = filter_class(&cands(&rs), &d, 5)
            .iter()
            .map(|p| p.sample_id)
            .collect();
        assert_eq!(order, vec![1, 3, 2, 0, 4]);
        assert_eq!(greedy_oracle(&[0, 1, 2, 3, 4], &d, &rs, 5), order);
    }

    #[test]
    fn two_far_clusters_get_one_prototype_each() {
        let pts = [
            [0.0, 0.0],
            [0.3, 0.1],
            [0.1, 0.4],
            [20.0, 20.0],
            [20.2, 19.9],
        ];
        let rs = [0.95, 0.9, 0.99, 0.5, 0.6];
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| euclidean(a, b)).collect())
            .collect();
        let d = Matrix::from_rows(&rows).unwrap();
        let picked: Vec<u32> = filter_class(&cands(&rs), &d, 2)
            .iter()
            .map(|p| p.sample_id)
            .collect();
        // exhaustive oracle: the 2-subset maximising the minimum pairwise distance
        let mut best = (0.0, (0, 0));
        for i in 0..5 {
            for j in i + 1..5 {
                if d[(i, j)] > best.0 {
                    best = (d[(i, j)], (i, j));
                }
            }
        }
        let cluster = |i: u32| pts[i as usize][0] > 10.0;
        assert_ne!(cluster(picked[0]), cluster(picked[1]));
        assert_ne!(cluster(best.1 .0 as u32), cluster(best.1 .1 as u32));
    }

    #[test]
    fn ties_at_the_top_break_by_id() {
        let d = line_distances(&[0.0, 5.0, 1.0]);
        let picked = filter_class(&cands(&[1.0, 1.0, 0.5]), &d, 3);
        assert_eq!(
            picked.iter().map(|p| p.sample_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(picked[0].e_value, 5.0);
        assert_eq!(picked[1].e_value, 5.0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let book = PrototypeBook {
            classes: vec![
                vec![
                    Prototype {
                        sample_id: 3,
                        r: 1.0,
                        rank: 1,
                        e_value: 2.5,
                    },
                    Prototype {
                        sample_id: 8,
                        r: 0.75,
                        rank: 2,
                        e_value: 1.25,
                    },
                ],
                vec![Prototype {
                    sample_id: 1,
                    r: 0.5,
                    rank: 1,
                    e_value: 0.0,
                }],
            ],
            prototype_count: 2,
        };
        let csv = book.to_csv();
        assert!(csv.starts_with("class,rank,sample_id,r,e_value\n0,1,3,"));
        let back = PrototypeBook::from_csv(&csv, Path::new("book.csv")).unwrap();
        assert_eq!(back, book);
        let broken = csv.replace("0,2,8", "0,3,8");
        assert!(PrototypeBook::from_csv(&broken, Path::new("book.csv")).is_err());
        assert!(PrototypeBook::from_csv("nope\n", Path::new("book.csv")).is_err());
    }
}
