//! Mahalanobis semi-metric induced by a softmax head: `M = A·Aᵀ` where the
//! columns of `A` are the class weight vectors minus their mean.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::datastore::{EmbeddingSpace, Matrix};
use crate::error::{PmalError, Result};

const SYMMETRY_TOL: f64 = 1e-6;
const PSD_TOL: f64 = 1e-6;
const RADICAND_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct MetricModel {
    metric_matrix: Matrix,
    /// r×D with `M = Lᵀ·L`; rows are `sqrt(λ)·vᵀ` for the positive eigenpairs.
    factor: Matrix,
    pub run_id: u32,
}

impl MetricModel {
    /// Wraps an explicit metric matrix after checking symmetry and
    /// positive semi-definiteness.
    pub fn from_matrix(metric_matrix: Matrix, run_id: u32) -> Result<Self> {
        let (r, c) = metric_matrix.shape();
        if r != c {
            return Err(PmalError::Dimension {
                expected: r,
                actual: c,
                context: "metric matrix must be square",
            });
        }
        for i in 0..r {
            for j in 0..i {
                let (a, b) = (metric_matrix[(i, j)], metric_matrix[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(PmalError::Validation(format!(
                        "metric matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let dm = DMatrix::from_row_slice(r, r, metric_matrix.as_slice());
        let sym = (&dm + dm.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
            if min < -PSD_TOL * scale {
                return Err(PmalError::Validation(format!(
                    "metric matrix is not positive semi-definite (eigenvalue {min})"
                )));
            }
        }
        let mut rows = Vec::new();
        for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > 0.0 {
                let s = lambda.sqrt();
                rows.push(eig.eigenvectors.column(idx).iter().map(|v| s * v).collect());
            }
        }
        let factor = if rows.is_empty() {
            Matrix::zeros(0, r)
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(MetricModel {
            metric_matrix,
            factor,
            run_id,
        })
    }

    pub fn identity(dim: usize) -> Self {
        MetricModel::from_matrix(Matrix::identity(dim), 0).expect("identity is PSD")
    }

    pub fn matrix(&self) -> &Matrix {
        &self.metric_matrix
    }

    pub fn dim(&self) -> usize {
        self.metric_matrix.rows()
    }

    /// Numerical rank of the factorization.
    pub fn rank(&self) -> usize {
        let scale = self.factor.row_iter().map(norm).fold(0.0, f64::max);
        self.factor
            .row_iter()
            .filter(|r| norm(r) > 1e-6 * scale.max(f64::MIN_POSITIVE))
            .count()
    }

    pub fn is_degenerate(&self) -> bool {
        self.metric_matrix.as_slice().iter().all(|&v| v == 0.0)
    }

    /// `L·v`, so that `d(a, b) = ‖L·a − L·b‖`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.factor
            .row_iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn project_rows(&self, m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows())
            .into_par_iter()
            .map(|i| self.project(m.row(i)))
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds `M = A·Aᵀ (+ ridge·I)` from the head of `space`.
pub fn build_metric_with_ridge(space: &EmbeddingSpace, ridge: f64) -> Result<MetricModel> {
    let w = space.head_weights();
    let (d, k) = w.shape();
    if k < 2 {
        return Err(PmalError::Validation(format!(
            "metric needs at least 2 classes, head has {k}"
        )));
    }
    if ridge < 0.0 {
        return Err(PmalError::Validation("ridge must be non-negative".into()));
    }
    let mut a = w.clone();
    for r in 0..d {
        let row = a.row_mut(r);
        let mean = row.iter().sum::<f64>() / k as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += ridge;
    }
    let metric = MetricModel::from_matrix(m, space.run_id)?;
    if metric.is_degenerate() {
        log::warn!(
            "run {}: all class weight vectors are equal; metric is identically zero",
            space.run_id
        );
    }
    Ok(metric)
}

pub fn build_metric(space: &EmbeddingSpace) -> Result<MetricModel> {
    build_metric_with_ridge(space, 0.0)
}

/// `sqrt((a−b)ᵀ·M·(a−b))`, evaluated directly on the quadratic form.
pub fn mahalanobis(metric: &MetricModel, a: &[f64], b: &[f64]) -> Result<f64> {
    let d = metric.dim();
    if a.len() != d || b.len() != d {
        return Err(PmalError::Dimension {
            expected: d,
            actual: a.len().max(b.len()),
            context: "mahalanobis operand",
        });
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = metric.matrix();
    let mut q = 0.0;
    for i in 0..d {
        let row = m.row(i);
        let mi: f64 = row.iter().zip(&diff).map(|(x, y)| x * y).sum();
        q += diff[i] * mi;
    }
    if q < 0.0 {
        let scale = diff.iter().map(|x| x * x).sum::<f64>()
            * m.as_slice().iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if q < -RADICAND_TOL * scale.max(1.0) {
            return Err(PmalError::Numerical(format!("negative radicand {q}")));
        }
        return Ok(0.0);
    }
    Ok(q.sqrt())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distances between every row of `rows` and every row of `cols`, via the
/// factorization `M = Lᵀ·L`.
pub fn pairwise_distances(metric: &MetricModel, rows: &Matrix, cols: &Matrix) -> Result<Matrix> {
    let d = metric.dim();
    if rows.cols() != d || cols.cols() != d {
        return Err(PmalError::Dimension {
            expected: d,
            actual: if rows.cols() != d {
                rows.cols()
            } else {
                cols.cols()
            },
            context: "pairwise distance operands",
        });
    }
    let pr = metric.project_rows(rows);
    let pc = metric.project_rows(cols);
    Ok(projected_distances(&pr, &pc))
}

/// Euclidean distance matrix between already-projected point sets.
pub fn projected_distances(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Matrix {
    let data: Vec<f64> = rows
        .par_iter()
        .flat_map_iter(|a| cols.iter().map(move |b| euclidean(a, b)))
        .collect();
    Matrix::from_vec(rows.len(), cols.len(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space_with_head(w: Matrix) -> EmbeddingSpace {
        let (d, k) = w.shape();
        EmbeddingSpace::new(0, Matrix::zeros(1, d), w, vec![0.0; k], 0).unwrap()
    }

    #[test]
    fn two_class_closed_form() {
        let v = [0.6, -0.8, 2.0];
        let w = Matrix::from_rows(&v.iter().map(|&x| vec![x, -x]).collect::<Vec<_>>()).unwrap();
        let m = build_metric(&space_with_head(w)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.matrix()[(i, j)] - 2.0 * v[i] * v[j]).abs() < 1e-12);
            }
        }
        assert_eq!(m.rank(), 1);
    }

    #[test]
    fn equal_weights_give_zero_metric() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let m = build_metric(&space_with_head(w)).unwrap();
        assert!(m.is_degenerate());
        assert_eq!(m.rank(), 0);
        assert_eq!(mahalanobis(&m, &[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&m, &rows, &rows).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_is_bounded_by_classes_minus_one() {
        let w = Matrix::from_rows(&[
            vec![0.3, -1.2, 0.7],
            vec![1.1, 0.4, -0.5],
            vec![-0.9, 0.2, 0.8],
            vec![0.05, 1.5, -0.3],
        ])
        .unwrap();
        let m = build_metric(&space_with_head(w)).unwrap();
        assert!(m.rank() <= 2);
    }

    #[test]
    fn identity_metric_is_euclidean() {
        let m = MetricModel::identity(3);
        let (a, b) = ([1.0, 2.0, 3.0], [-1.0, 0.5, 7.0]);
        assert!((mahalanobis(&m, &a, &b).unwrap() - euclidean(&a, &b)).abs() < 1e-12);
        assert_eq!(mahalanobis(&m, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn null_direction_of_rank_one_metric() {
        let v = [0.6, 0.8];
        let w = Matrix::from_rows(&[
            vec![v[0] / 2f64.sqrt(), -v[0] / 2f64.sqrt()],
            vec![v[1] / 2f64.sqrt(), -v[1] / 2f64.sqrt()],
        ])
        .unwrap();
        // A = (w1 - w̄, w2 - w̄) = (v, -v)/sqrt(2) so M = v·vᵀ
        let m = build_metric(&space_with_head(w)).unwrap();
        let a = [1.0, 1.0];
        let b = [1.0 + 0.8, 1.0 - 0.6];
        assert!(mahalanobis(&m, &a, &b).unwrap() < 1e-7);
    }

    #[test]
    fn ridge_makes_metric_full_rank() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let m = build_metric_with_ridge(&space_with_head(w.clone()), 0.5).unwrap();
        assert_eq!(m.rank(), 2);
        assert!(build_metric_with_ridge(&space_with_head(w), -1.0).is_err());
    }

    #[test]
    fn small_pairwise_matches_elementwise() {
        let w = Matrix::from_rows(&[vec![0.5, -0.2, 0.1], vec![0.3, 0.9, -1.0]]).unwrap();
        let m = build_metric(&space_with_head(w)).unwrap();
        let rows = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let cols = Matrix::from_rows(&[vec![1.0, 1.0], vec![-3.0, 0.25]]).unwrap();
        let d = pairwise_distances(&m, &rows, &cols).unwrap();
        assert_eq!(d.shape(), (3, 2));
        for i in 0..3 {
            for j in 0..2 {
                let e = mahalanobis(&m, rows.row(i), cols.row(j)).unwrap();
                assert!((d[(i, j)] - e).abs() < 1e-6);
            }
        }
        let sq = pairwise_distances(&m, &rows, &rows).unwrap();
        for i in 0..3 {
            assert!(sq[(i, i)].abs() < 1e-12);
            for j in 0..3 {
                assert!((sq[(i, j)] - sq[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_psd_and_asymmetric_matrices_are_rejected() {
        let neg = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(MetricModel::from_matrix(neg, 0).is_err());
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(MetricModel::from_matrix(asym, 0).is_err());
    }
}
