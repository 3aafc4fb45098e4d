//! Fully-connected classifier with `tanh` hidden units and softmax
//! cross-entropy, written out by hand: forward pass, backpropagation,
//! momentum SGD on the plain or proximal local objective, and update clipping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ClientRecord, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.05;

/// Flat parameter vector plus the layer shapes needed to interpret it.
///
/// Layer `l` with shape `(rows, cols)` maps `rows` inputs to `cols` outputs.
/// Its weights are stored row-major (`W[i][j]` at `i * cols + j`), followed
/// by `cols` bias entries when biases are enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    bias: bool,
}

fn check_shapes(shapes: &[(usize, usize)]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::InvalidShape("no layers".into()));
    }
    for (l, &(r, c)) in shapes.iter().enumerate() {
        if r == 0 || c == 0 {
            return Err(Error::InvalidShape(format!("layer {l} has shape ({r}, {c})")));
        }
    }
    for w in shapes.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(Error::InvalidShape(format!(
                "layer output {} does not feed layer input {}",
                w[0].1, w[1].0
            )));
        }
    }
    Ok(())
}

fn param_count(shapes: &[(usize, usize)], bias: bool) -> usize {
    shapes
        .iter()
        .map(|&(r, c)| r * c + if bias { c } else { 0 })
        .sum()
}

impl ModelParams {
    /// Weights only, uniform in `[-0.05, 0.05]`.
    pub fn init(shapes: &[(usize, usize)], seed: u64) -> Result<Self> {
        Self::init_inner(shapes, seed, false)
    }

    /// Weights uniform in `[-0.05, 0.05]`, biases zero.
    pub fn init_with_bias(shapes: &[(usize, usize)], seed: u64) -> Result<Self> {
        Self::init_inner(shapes, seed, true)
    }

    fn init_inner(shapes: &[(usize, usize)], seed: u64, bias: bool) -> Result<Self> {
        check_shapes(shapes)?;
        let mut rng = stream(seed, Domain::ModelInit, 0, 0);
        let mut values = Vec::with_capacity(param_count(shapes, bias));
        for &(r, c) in shapes {
            values.extend((0..r * c).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)));
            if bias {
                values.extend(std::iter::repeat_n(0.0, c));
            }
        }
        Ok(Self {
            values,
            shapes: shapes.to_vec(),
            bias,
        })
    }

    pub fn from_values(values: Vec<f64>, shapes: &[(usize, usize)], bias: bool) -> Result<Self> {
        check_shapes(shapes)?;
        let d = param_count(shapes, bias);
        if values.len() != d {
            return Err(Error::InvalidShape(format!(
                "{} values for a model of dimension {d}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            shapes: shapes.to_vec(),
            bias,
        })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(values, &self.shapes, self.bias)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.shapes.len() - 1].1
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn same_layout(&self, other: &ModelParams) -> bool {
        self.shapes == other.shapes && self.bias == other.bias
    }
}

pub fn init_model(shapes: &[(usize, usize)], seed: u64) -> Result<ModelParams> {
    ModelParams::init(shapes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Upcycled,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::Upcycled => "upcycled",
        }
    }

    pub fn uses_proximal_term(self) -> bool {
        !matches!(self, Algorithm::FedAvg)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "upcycled" | "upcycled-fl" | "upcycled_fl" => Ok(Algorithm::Upcycled),
            other => Err(Error::InvalidConfig(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Local solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHyper {
    pub lr: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Proximal weight μ.
    pub mu: f64,
    /// L2 bound τ on the transmitted update.
    pub tau: f64,
}

impl Default for LocalHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.5,
            local_epochs: 20,
            batch_size: 32,
            mu: 0.1,
            tau: 1.0,
        }
    }
}

impl LocalHyper {
    pub fn validate(&self, algorithm: Algorithm) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("local epochs and batch size must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("clip bound τ = {} must be positive", self.tau)));
        }
        match algorithm {
            Algorithm::FedAvg if self.mu != 0.0 => Err(Error::InvalidConfig(
                "FedAvg has no proximal term; set mu = 0".into(),
            )),
            Algorithm::FedProx | Algorithm::Upcycled if !(self.mu > 0.0 && self.mu.is_finite()) => {
                Err(Error::InvalidConfig(format!(
                    "{} needs a positive proximal weight, got {}",
                    algorithm.name(),
                    self.mu
                )))
            }
            _ => Ok(()),
        }
    }
}

fn check_batch(m: &ModelParams, batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch.feat_dim() != m.input_dim() {
        return Err(Error::InvalidInput(format!(
            "batch has {} features, model expects {}",
            batch.feat_dim(),
            m.input_dim()
        )));
    }
    let classes = m.num_classes();
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Offsets of (weights, bias) for each layer inside the flat vector.
fn layer_offsets(m: &ModelParams) -> Vec<(usize, usize)> {
    let mut off = 0;
    m.shapes
        .iter()
        .map(|&(r, c)| {
            let w = off;
            off += r * c;
            let b = off;
            if m.bias {
                off += c;
            }
            (w, b)
        })
        .collect()
}

/// Mean cross-entropy over the batch and, when `grad` is given, its
/// gradient accumulated into `grad` (which is overwritten).
fn loss_and_grad(m: &ModelParams, batch: &Dataset, mut grad: Option<&mut [f64]>) -> f64 {
    let offsets = layer_offsets(m);
    let n_layers = m.shapes.len();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }

    // acts[0] is the input; acts[l + 1] is the output of layer l
    // (post-tanh for hidden layers, raw logits for the last one).
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(Vec::new());
    for &(_, c) in &m.shapes {
        acts.push(vec![0.0; c]);
    }
    let mut deltas: Vec<Vec<f64>> = m.shapes.iter().map(|&(_, c)| vec![0.0; c]).collect();

    let mut total = 0.0;
    for s in 0..n {
        acts[0].clear();
        acts[0].extend_from_slice(batch.row(s));

        for l in 0..n_layers {
            let (rows, cols) = m.shapes[l];
            let (wo, bo) = offsets[l];
            let (prev, rest) = acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            if m.bias {
                out.copy_from_slice(&m.values[bo..bo + cols]);
            } else {
                out.iter_mut().for_each(|v| *v = 0.0);
            }
            for i in 0..rows {
                let xi = input[i];
                if xi == 0.0 {
                    continue;
                }
                let w = &m.values[wo + i * cols..wo + (i + 1) * cols];
                for (o, &wij) in out.iter_mut().zip(w) {
                    *o += xi * wij;
                }
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }

        let logits = &acts[n_layers];
        let y = batch.label(s);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - logits[y];

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };

        // d(loss)/d(logits) = softmax - onehot
        let last = n_layers - 1;
        for (k, d) in deltas[last].iter_mut().enumerate() {
            *d = ((logits[k] - log_z).exp() - if k == y { 1.0 } else { 0.0 }) * inv_n;
        }
        for l in (0..n_layers).rev() {
            let (rows, cols) = m.shapes[l];
            let (wo, bo) = offsets[l];
            let input = &acts[l];
            {
                let delta = &deltas[l];
                for i in 0..rows {
                    let xi = input[i];
                    let gw = &mut g[wo + i * cols..wo + (i + 1) * cols];
                    for (gv, &dj) in gw.iter_mut().zip(delta) {
                        *gv += xi * dj;
                    }
                }
                if m.bias {
                    for (gv, &dj) in g[bo..bo + cols].iter_mut().zip(delta) {
                        *gv += dj;
                    }
                }
            }
            if l > 0 {
                let (lower, upper) = deltas.split_at_mut(l);
                let delta = &upper[0];
                let prev_delta = &mut lower[l - 1];
                for i in 0..rows {
                    let w = &m.values[wo + i * cols..wo + (i + 1) * cols];
                    let back: f64 = w.iter().zip(delta).map(|(a, b)| a * b).sum();
                    // input[i] = tanh(z); d tanh = 1 - tanh²
                    prev_delta[i] = back * (1.0 - input[i] * input[i]);
                }
            }
        }
    }
    total * inv_n
}

/// Mean cross-entropy of `m` on `batch`.
pub fn forward_loss(m: &ModelParams, batch: &Dataset) -> Result<f64> {
    check_batch(m, batch)?;
    Ok(loss_and_grad(m, batch, None))
}

/// Gradient of the mean cross-entropy plus `mu · (m - anchor)`.
pub fn grad(m: &ModelParams, batch: &Dataset, mu: f64, anchor: &ModelParams) -> Result<Vec<f64>> {
    check_batch(m, batch)?;
    if !m.same_layout(anchor) {
        return Err(Error::InvalidInput("anchor layout differs from model".into()));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidInput(format!("proximal weight {mu} is negative")));
    }
    let mut g = vec![0.0; m.dim()];
    loss_and_grad(m, batch, Some(&mut g));
    if mu != 0.0 {
        for ((gv, &w), &a) in g.iter_mut().zip(&m.values).zip(&anchor.values) {
            *gv += mu * (w - a);
        }
    }
    Ok(g)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(m: &ModelParams, data: &Dataset) -> Result<f64> {
    check_batch(m, data)?;
    let offsets = layer_offsets(m);
    let n_layers = m.shapes.len();
    let mut correct = 0usize;
    let mut cur = Vec::new();
    let mut next = Vec::new();
    for s in 0..data.len() {
        cur.clear();
        cur.extend_from_slice(data.row(s));
        for l in 0..n_layers {
            let (rows, cols) = m.shapes[l];
            let (wo, bo) = offsets[l];
            next.clear();
            if m.bias {
                next.extend_from_slice(&m.values[bo..bo + cols]);
            } else {
                next.resize(cols, 0.0);
            }
            for i in 0..rows {
                let w = &m.values[wo + i * cols..wo + (i + 1) * cols];
                for (o, &wij) in next.iter_mut().zip(w) {
                    *o += cur[i] * wij;
                }
            }
            if l + 1 < n_layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let pred = cur
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &z)| if z > best.1 { (k, z) } else { best })
            .0;
        if pred == data.label(s) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Run the client's local training from `global`.
///
/// `local_epochs` passes of minibatch momentum SGD over the client's data.
/// For FedProx and Upcycled-FL the proximal term `μ/2 ‖w − global‖²` is
/// applied in closed form after each gradient step,
/// `w ← (w − η v + η μ · global) / (1 + η μ)`, which keeps the iteration
/// stable for any μ. The minibatch order comes from the stream keyed by
/// `(seed, client id, round)`.
pub fn local_solve(
    global: &ModelParams,
    client: &ClientRecord,
    hyper: &LocalHyper,
    algorithm: Algorithm,
    seed: u64,
    round: u64,
) -> Result<ModelParams> {
    if client.data.is_empty() {
        return Err(Error::InvalidInput(format!("client {} has no data", client.id)));
    }
    check_batch(global, &client.data)?;
    if hyper.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mu = if algorithm.uses_proximal_term() { hyper.mu } else { 0.0 };
    let shrink = 1.0 / (1.0 + hyper.lr * mu);
    let pull = hyper.lr * mu;

    let mut w = global.clone();
    let mut velocity = vec![0.0; w.dim()];
    let mut g = vec![0.0; w.dim()];
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    let mut rng = stream(seed, Domain::LocalSgd, client.id as u64, round);

    for _ in 0..hyper.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = client.data.subset(chunk);
            loss_and_grad(&w, &batch, Some(&mut g));
            for ((wv, v), &gv) in w.values.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *v = hyper.momentum * *v + gv;
                *wv -= hyper.lr * *v;
            }
            if mu != 0.0 {
                for (wv, &a) in w.values.iter_mut().zip(&global.values) {
                    *wv = (*wv + pull * a) * shrink;
                }
            }
        }
    }
    if !w.is_finite() {
        return Err(Error::Invariant(format!(
            "local training on client {} diverged",
            client.id
        )));
    }
    Ok(w)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale `delta` onto the L2 ball of radius `tau` if it lies outside.
///
/// The scale factor is nudged down until the recomputed norm is `≤ tau`, so
/// clipping an already-clipped vector returns it unchanged.
pub fn clip_update(delta: &[f64], tau: f64) -> Vec<f64> {
    let norm = l2_norm(delta);
    if norm <= tau {
        return delta.to_vec();
    }
    let mut scale = tau / norm;
    loop {
        let out: Vec<f64> = delta.iter().map(|x| x * scale).collect();
        if l2_norm(&out) <= tau {
            return out;
        }
        scale = f64::from_bits(scale.to_bits() - 1);
    }
}

/// `w_local − w_global`, coordinate-wise.
pub fn model_delta(local: &ModelParams, global: &ModelParams) -> Vec<f64> {
    local
        .values
        .iter()
        .zip(&global.values)
        .map(|(a, b)| a - b)
        .collect()
}
