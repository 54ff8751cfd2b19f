//! Synthetic ground truth: Gaussian classes with per-sample noise scales,
//! optional multi-modal classes, unknown classes, and an analytic stand-in
//! for a pair of independently trained embedding models.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datastore::{align_runs, EmbeddingSpace, LabeledDataset, Matrix, RunBundle};
use crate::error::{PmalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub class_mean_radius: f64,
    pub base_noise: f64,
    pub degraded_noise: f64,
    pub degraded_fraction: f64,
    pub modes_per_class: usize,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            known_classes: 10,
            unknown_classes: 5,
            feature_dim: 16,
            samples_per_class: 200,
            class_mean_radius: 4.0,
            base_noise: 0.2,
            degraded_noise: 1.0,
            degraded_fraction: 0.3,
            modes_per_class: 1,
            rng_seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(PmalError::Validation(format!("{name}: {msg}")));
        if self.known_classes == 0 {
            return field("known_classes", "must be positive");
        }
        if self.unknown_classes == 0 {
            return field("unknown_classes", "must be positive");
        }
        if self.feature_dim == 0 {
            return field("feature_dim", "must be positive");
        }
        if self.samples_per_class == 0 {
            return field("samples_per_class", "must be positive");
        }
        if self.modes_per_class == 0 {
            return field("modes_per_class", "must be at least 1");
        }
        if !(self.class_mean_radius > 0.0) {
            return field("class_mean_radius", "must be positive");
        }
        if !(self.base_noise > 0.0) {
            return field("base_noise", "must be positive");
        }
        if !(self.degraded_noise >= self.base_noise) || !self.degraded_noise.is_finite() {
            return field("degraded_noise", "must be finite and at least base_noise");
        }
        if !(0.0..=1.0).contains(&self.degraded_fraction) {
            return field("degraded_fraction", "must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub sample_id: u32,
    pub label: usize,
    pub mode: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Known-class samples, aligned with the known dataset's storage order.
    pub samples: Vec<TruthRow>,
    /// Unknown-class samples, aligned with the unknown dataset.
    pub unknown_samples: Vec<TruthRow>,
    /// `mode_means[k][m]` for the known classes.
    pub mode_means: Vec<Vec<Vec<f64>>>,
    pub unknown_mode_means: Vec<Vec<Vec<f64>>>,
}

impl SynthTruth {
    /// Mean of a known class's mode means.
    pub fn class_center(&self, k: usize) -> Vec<f64> {
        let modes = &self.mode_means[k];
        let mut c = vec![0.0; modes[0].len()];
        for m in modes {
            for (ci, mi) in c.iter_mut().zip(m) {
                *ci += mi / modes.len() as f64;
            }
        }
        c
    }

    pub fn noiseless(&self, index: usize) -> &[f64] {
        let t = &self.samples[index];
        &self.mode_means[t.label][t.mode]
    }

    fn csv_rows(rows: &[TruthRow]) -> String {
        let mut out = String::from("sample_id,label,mode,sigma\n");
        for t in rows {
            writeln!(out, "{},{},{},{}", t.sample_id, t.label, t.mode, t.sigma).unwrap();
        }
        out
    }

    /// CSV `sample_id,label,mode,sigma` for the known samples.
    pub fn to_csv(&self) -> String {
        Self::csv_rows(&self.samples)
    }

    pub fn unknown_csv(&self) -> String {
        Self::csv_rows(&self.unknown_samples)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PmalError::io(path, e))
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            scale * {
                let g: f64 = StandardNormal.sample(rng);
                g
            }
        })
        .collect::<Vec<f64>>()
}

/// Uniform point on the radius-`r` sphere.
fn on_sphere(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x * radius / n).collect();
        }
    }
}

struct Block {
    features: Vec<Vec<f64>>,
    labels: Vec<u32>,
    truth: Vec<TruthRow>,
}

fn draw_block(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    means: &[Vec<Vec<f64>>],
    first_id: u32,
) -> Block {
    let n = spec.samples_per_class;
    let degraded = (spec.degraded_fraction * n as f64).round() as usize;
    let mut block = Block {
        features: Vec::new(),
        labels: Vec::new(),
        truth: Vec::new(),
    };
    for (k, modes) in means.iter().enumerate() {
        let mut is_degraded = vec![false; n];
        for i in sample(rng, n, degraded) {
            is_degraded[i] = true;
        }
        for (i, &bad) in is_degraded.iter().enumerate() {
            let mode = i % modes.len();
            let sigma = if bad {
                spec.degraded_noise
            } else {
                spec.base_noise
            };
            let noise = gaussian_vec(rng, spec.feature_dim, sigma);
            let x = modes[mode].iter().zip(&noise).map(|(m, e)| m + e).collect();
            block.truth.push(TruthRow {
                sample_id: first_id + block.features.len() as u32,
                label: k,
                mode,
                sigma,
            });
            block.features.push(x);
            block.labels.push(k as u32);
        }
    }
    block
}

/// Draws the known and unknown datasets. Each class gets
/// `round(q · samples_per_class)` degraded samples at the larger noise scale;
/// samples cycle through the class's modes.
pub fn generate(spec: &SynthSpec) -> Result<(LabeledDataset, LabeledDataset, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut draw_means = |classes: usize| -> Vec<Vec<Vec<f64>>> {
        (0..classes)
            .map(|_| {
                (0..spec.modes_per_class)
                    .map(|_| on_sphere(&mut rng, spec.feature_dim, spec.class_mean_radius))
                    .collect()
            })
            .collect()
    };
    let known_means = draw_means(spec.known_classes);
    let unknown_means = draw_means(spec.unknown_classes);

    let known = draw_block(&mut rng, spec, &known_means, 0);
    let unknown = draw_block(&mut rng, spec, &unknown_means, known.features.len() as u32);

    let to_dataset = |b: &Block, classes: usize| -> Result<LabeledDataset> {
        LabeledDataset::new(
            b.truth.iter().map(|t| t.sample_id).collect(),
            Matrix::from_rows(&b.features)?,
            b.labels.clone(),
            classes,
        )
    };
    let known_ds = to_dataset(&known, spec.known_classes)?;
    let unknown_ds = to_dataset(&unknown, spec.unknown_classes)?;
    Ok((
        known_ds,
        unknown_ds,
        SynthTruth {
            samples: known.truth,
            unknown_samples: unknown.truth,
            mode_means: known_means,
            unknown_mode_means: unknown_means,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunPairOptions {
    /// Reuse one noise draw for every run (negative control).
    pub shared_noise: bool,
}

const MAX_CONDITION: f64 = 1e3;

/// Random well-conditioned square map and its inverse.
fn random_map(rng: &mut ChaCha8Rng, dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let q = DMatrix::from_fn(dim, dim, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            g
        });
        let sv = q.clone().svd(false, false).singular_values;
        let (max, min) = (sv.max(), sv.min());
        if min <= 0.0 || max / min > MAX_CONDITION {
            continue;
        }
        if let Some(inv) = q.clone().try_inverse() {
            return (q, inv);
        }
    }
}

/// Two embedding spaces `Z^u = X^u·Q_u` over the same samples, with heads
/// `W^u = Q_u⁻¹·C` (columns of `C` are the class centres) so that logits and
/// head-induced distances are identical across runs for noiseless inputs.
/// Each run redraws every sample's noise at its recorded scale.
pub fn analytic_run_pair(
    dataset: &LabeledDataset,
    truth: &SynthTruth,
    seed: u64,
    options: RunPairOptions,
) -> Result<RunBundle> {
    analytic_runs(dataset, truth, seed, 2, options)
}

/// As [`analytic_run_pair`] with `runs` spaces.
pub fn analytic_runs(
    dataset: &LabeledDataset,
    truth: &SynthTruth,
    seed: u64,
    runs: usize,
    options: RunPairOptions,
) -> Result<RunBundle> {
    if truth.samples.len() != dataset.len()
        || truth
            .samples
            .iter()
            .zip(dataset.ids())
            .any(|(t, &id)| t.sample_id != id)
    {
        return Err(PmalError::Validation("truth does not match dataset".into()));
    }
    let f = dataset.feature_dim();
    let k = dataset.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = DMatrix::from_fn(f, k, |r, c| truth.class_center(c)[r]);

    let mut spaces = Vec::with_capacity(runs);
    for u in 0..runs {
        let (q, q_inv) = random_map(&mut rng, f);
        let head = &q_inv * &centers;
        let rows: Vec<f64> = (0..dataset.len())
            .flat_map(|i| {
                let x: Vec<f64> = if options.shared_noise {
                    dataset.feature(i).to_vec()
                } else {
                    let sigma = truth.samples[i].sigma;
                    truth
                        .noiseless(i)
                        .iter()
                        .map(|m| {
                            m + sigma * {
                                let g: f64 = StandardNormal.sample(&mut rng);
                                g
                            }
                        })
                        .collect()
                };
                let xr = DMatrix::from_row_slice(1, f, &x);
                (xr * &q).iter().cloned().collect::<Vec<_>>()
            })
            .collect();
        let head_rows: Vec<f64> = (0..f)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .map(|(r, c)| head[(r, c)])
            .collect();
        spaces.push(EmbeddingSpace::new(
            u as u32 + 1,
            Matrix::from_vec(dataset.len(), f, rows)?,
            Matrix::from_vec(f, k, head_rows)?,
            vec![0.0; k],
            dataset.checksum(),
        )?);
    }
    align_runs(spaces)
}
