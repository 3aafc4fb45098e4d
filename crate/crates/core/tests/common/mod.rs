#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otafl::data::{assign_weights, ClientRecord, Dataset};
use otafl::model::{forward_loss, grad, ModelParams};
use otafl::runner::ExperimentConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dataset(r: &mut impl Rng, n: usize, feat: usize, classes: usize) -> Dataset {
    let features = (0..n * feat).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new(feat, features, labels).unwrap()
}

pub fn random_model(r: &mut impl Rng, shapes: &[(usize, usize)], bias: bool, scale: f64) -> ModelParams {
    let d: usize = shapes.iter().map(|&(a, b)| a * b + if bias { b } else { 0 }).sum();
    let values = (0..d).map(|_| r.random_range(-scale..scale)).collect();
    ModelParams::from_values(values, shapes, bias).unwrap()
}

pub fn random_clients(r: &mut impl Rng, k: usize, feat: usize, classes: usize, cap: f64) -> Vec<ClientRecord> {
    let mut clients: Vec<ClientRecord> = (0..k)
        .map(|id| {
            let n = r.random_range(8..40);
            (id, random_dataset(r, n, feat, classes))
        })
        .map(|(id, data)| ClientRecord {
            id,
            data,
            weight: 0.0,
            power_cap: cap,
            kappa: None,
        })
        .collect();
    assign_weights(&mut clients);
    clients
}

pub const FD_FLOOR: f64 = 1e-4;

/// Largest coordinate-wise relative error of the analytic gradient against
/// central differences with step `h`.
///
/// The denominator is floored at `FD_FLOOR`: the difference quotient itself
/// carries rounding noise of about `ε_mach·|f|/h ≈ 1e-11`, so coordinates
/// smaller than the floor are judged on an absolute 1e-10 scale instead.
pub fn max_fd_rel_error(m: &ModelParams, batch: &Dataset, mu: f64, anchor: &ModelParams, h: f64) -> f64 {
    let g = grad(m, batch, mu, anchor).unwrap();
    let objective = |w: &ModelParams| {
        let prox: f64 = w
            .values()
            .iter()
            .zip(anchor.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        forward_loss(w, batch).unwrap() + 0.5 * mu * prox
    };
    let mut worst: f64 = 0.0;
    for j in 0..m.dim() {
        let mut plus = m.clone();
        plus.values_mut()[j] += h;
        let mut minus = m.clone();
        minus.values_mut()[j] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let denom = g[j].abs().max(fd.abs()).max(FD_FLOOR);
        worst = worst.max((g[j] - fd).abs() / denom);
    }
    worst
}

/// Small, fast experiment for end-to-end checks.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.clients = 6;
    cfg.rounds = 6;
    cfg.model.feat_dim = 12;
    cfg.model.hidden = 8;
    cfg.data.classes = 4;
    cfg.data.shards_per_client = 2;
    cfg.data.source = otafl::runner::DataSource::Synthetic { n_min: 30, n_max: 60 };
    cfg.hyper.local_epochs = 2;
    cfg.hyper.batch_size = 8;
    cfg.bound.enabled = false;
    cfg
}
