#![allow(dead_code)]

use pmal::backbone::{loss_and_gradients, EmbeddingLoss, MlpModel};
use pmal::protolearn::{
    class_distances, point_to_set_distance, DistanceMode, ProtoLossConfig, PrototypeEmbeddings,
    PrototypeLoss,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Preactivations, hinge arguments and rival gaps closer than this to a
/// switching point make a finite difference straddle a kink.
pub const KINK_GUARD: f64 = 1e-3;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn one_minus_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

pub struct GradInstance {
    pub model: MlpModel,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub loss: PrototypeLoss,
}

fn hidden_preactivations(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let w = &model.params.hidden_weights;
    (0..w.cols())
        .map(|j| model.params.hidden_bias[j] + (0..w.rows()).map(|f| x[f] * w[(f, j)]).sum::<f64>())
        .collect()
}

/// True when every non-smooth switch of the combined loss is at least
/// `KINK_GUARD` away for every sample of the instance.
fn clear_of_kinks(inst: &GradInstance) -> bool {
    let cfg = &inst.loss.cfg;
    let d = inst.model.embed_dim();
    for (x, &y) in inst.inputs.iter().zip(&inst.labels) {
        if hidden_preactivations(&inst.model, x)
            .iter()
            .any(|a| a.abs() < KINK_GUARD)
        {
            return false;
        }
        let z = inst.model.embed(x).unwrap();
        if cfg.distance_mode == DistanceMode::Nearest {
            for set in &inst.loss.protos.classes {
                let mut ds: Vec<f64> = set.iter().map(|p| one_minus_cos(&z, p)).collect();
                ds.sort_by(f64::total_cmp);
                if ds.len() > 1 && ds[1] - ds[0] < KINK_GUARD {
                    return false;
                }
            }
        }
        let dist = class_distances(&z, &inst.loss.protos, cfg.distance_mode, d).unwrap();
        let mut rivals: Vec<f64> = dist
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != y)
            .map(|(_, &v)| v)
            .collect();
        rivals.sort_by(f64::total_cmp);
        if rivals.len() > 1 && rivals[1] - rivals[0] < KINK_GUARD {
            return false;
        }
        if (dist[y] - rivals[0] + cfg.margin).abs() < KINK_GUARD {
            return false;
        }
    }
    true
}

/// A small random model, batch and constant prototype set whose combined
/// loss is smooth around the current parameters. Redraws until it is.
pub fn grad_instance(seed: u64, mode: DistanceMode) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (f, h, d, k) = (
            rng.gen_range(2..6),
            rng.gen_range(3..8),
            rng.gen_range(2..5),
            rng.gen_range(2..5),
        );
        let mut model = MlpModel::new([f, h, d], k, rng.gen());
        let n_params = model.params.len();
        for i in 0..n_params {
            let v = model.params.get(i) + rng.gen_range(-0.3..0.3);
            model.params.set(i, v);
        }
        let batch = rng.gen_range(2..7);
        let inputs: Vec<Vec<f64>> = (0..batch).map(|_| rand_vec(&mut rng, f, 2.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..k)).collect();
        let protos = PrototypeEmbeddings {
            classes: (0..k)
                .map(|_| {
                    let t = rng.gen_range(1..4);
                    (0..t).map(|_| rand_vec(&mut rng, d, 1.5)).collect()
                })
                .collect(),
            model_version: 0,
        };
        let cfg = ProtoLossConfig {
            distance_mode: mode,
            weight: rng.gen_range(0.5..2.0),
            ..Default::default()
        };
        let inst = GradInstance {
            model,
            inputs,
            labels,
            loss: PrototypeLoss { protos, cfg },
        };
        let zero_norm = inst
            .inputs
            .iter()
            .any(|x| inst.model.embed(x).unwrap().iter().all(|v| v.abs() < 1e-6));
        if !zero_norm && clear_of_kinks(&inst) {
            return inst;
        }
    }
}

fn total_loss(model: &MlpModel, inst: &GradInstance) -> f64 {
    let batch: Vec<(&[f64], usize)> = inst
        .inputs
        .iter()
        .map(|x| x.as_slice())
        .zip(inst.labels.iter().copied())
        .collect();
    loss_and_gradients(model, &batch, Some(&inst.loss as &dyn EmbeddingLoss))
        .unwrap()
        .0
        .total
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter. Relative error uses a scale floor of
/// 1e-4 so parameters with vanishing gradient compare absolutely.
pub fn max_gradient_error(inst: &GradInstance) -> f64 {
    let batch: Vec<(&[f64], usize)> = inst
        .inputs
        .iter()
        .map(|x| x.as_slice())
        .zip(inst.labels.iter().copied())
        .collect();
    let (_, grads) =
        loss_and_gradients(&inst.model, &batch, Some(&inst.loss as &dyn EmbeddingLoss)).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = inst.model.clone();
    for i in 0..inst.model.params.len() {
        let base = inst.model.params.get(i);
        probe.params.set(i, base + FD_STEP);
        let up = total_loss(&probe, inst);
        probe.params.set(i, base - FD_STEP);
        let down = total_loss(&probe, inst);
        probe.params.set(i, base);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.get(i);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

/// Hinge value computed independently from the distance function.
pub fn hinge_oracle(
    z: &[f64],
    label: usize,
    protos: &PrototypeEmbeddings,
    cfg: &ProtoLossConfig,
) -> f64 {
    let d: Vec<f64> = protos
        .classes
        .iter()
        .map(|p| point_to_set_distance(z, p, cfg.distance_mode, z.len()).unwrap())
        .collect();
    let rival = d
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    (d[label] - rival + cfg.margin).max(0.0)
}
