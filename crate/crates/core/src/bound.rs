//! Numeric evaluation of the non-convex convergence bound for Upcycled-FL
//! over a noisy, jammed channel:
//!
//! ```text
//! min_m E‖∇f(w̄^{2m−1})‖² ≤ (f(w̄⁰) − f*)/(M C1) + C6/C1 + 1/(M C1) Σ_m (C2ᵐ + C3ᵐ + C4ᵐ + C5ᵐ)
//! ```
//!
//! The bound is descriptive only. The runner reports it next to the
//! empirical curves and never feeds it back into training.

use rand::Rng;
use serde::Serialize;

use crate::data::ClientRecord;
use crate::error::{Error, Result};
use crate::fl_protocol::LambdaSchedule;
use crate::model::{grad, l2_norm, ModelParams};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    /// Smoothness `L`.
    pub l: f64,
    /// Dissimilarity `B`.
    pub b: f64,
    /// Strong convexity `ρ` of the proximal local objective.
    pub rho: f64,
    /// Iterate-gap bound `q`.
    pub q: f64,
    /// Gradient-norm bound `G`.
    pub g: f64,
    /// Per-client `κ_i`.
    pub kappa: Vec<f64>,
    pub mu: f64,
    pub lambda: LambdaSchedule,
    pub tau: f64,
    pub d: usize,
    pub sigma_c: f64,
}

/// Channel-side inputs for one transmitting round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTerms {
    pub slack: Vec<f64>,
    pub alpha_u: f64,
    pub h_cj: f64,
    pub alpha_cj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub c1: f64,
    /// `C6` averaged over rounds (it depends on `α_u`, which may vary).
    pub c6: f64,
    /// `Σ_m (C2ᵐ + C3ᵐ + C4ᵐ + C5ᵐ)`.
    pub round_sum: f64,
    pub rounds: usize,
    /// `None` when `C1 ≤ 0` and the bound does not apply.
    pub value: Option<f64>,
}

fn check(name: &str, v: f64, allow_zero: bool) -> Result<()> {
    let ok = v.is_finite() && if allow_zero { v >= 0.0 } else { v > 0.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("bound constant {name} = {v}")))
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        check("L", self.l, false)?;
        check("B", self.b, true)?;
        check("rho", self.rho, false)?;
        check("q", self.q, true)?;
        check("G", self.g, true)?;
        check("mu", self.mu, false)?;
        check("tau", self.tau, false)?;
        check("sigma_c", self.sigma_c, true)?;
        for &k in &self.kappa {
            check("kappa", k, true)?;
        }
        if self.d == 0 {
            return Err(Error::InvalidInput("bound dimension d = 0".into()));
        }
        Ok(())
    }

    /// `1/(2μ) − LB/(μρ²)`.
    pub fn c1(&self) -> f64 {
        1.0 / (2.0 * self.mu) - self.l * self.b / (self.mu * self.rho * self.rho)
    }

    /// `L σ_c² d / (2 α_u²)`.
    pub fn c6(&self, alpha_u: f64) -> f64 {
        self.l * self.sigma_c * self.sigma_c * self.d as f64 / (2.0 * alpha_u * alpha_u)
    }
}

/// All six constants at transmission `m`. `C1` may be nonpositive; callers
/// decide what to do with that.
pub fn eval_constants(
    c: &BoundConstants,
    m: usize,
    round: &RoundTerms,
    weights: &[f64],
) -> Result<Constants> {
    c.validate()?;
    let k = round.slack.len();
    if weights.len() != k || c.kappa.len() != k {
        return Err(Error::InvalidInput(format!(
            "{k} slack factors, {} weights, {} κ values",
            weights.len(),
            c.kappa.len()
        )));
    }
    if let Some(s) = round.slack.iter().find(|&&s| !(s >= 1.0 && s.is_finite())) {
        return Err(Error::InvalidInput(format!("slack factor {s} below 1")));
    }
    check("alpha_u", round.alpha_u, false)?;
    check("h_cj", round.h_cj, true)?;
    check("alpha_cj", round.alpha_cj, true)?;

    let (l, b, rho, mu, q, g) = (c.l, c.b, c.rho, c.mu, c.q, c.g);
    let ratio = mu / (mu + c.lambda.lambda(m));
    let c2 = ratio * (1.0 + 2.0 * l * b * (l + rho) / (mu * rho * rho)) * q * g;
    let c3 = ratio * ratio * l * (1.0 + (l + rho).powi(2) / (mu * rho * rho)) * q * q;
    let c4 = round
        .slack
        .iter()
        .zip(weights)
        .zip(&c.kappa)
        .map(|((&s, &p), &kappa)| {
            let ts = c.tau * s;
            let coef = (2.0 * mu * (ts - 1.0).powi(2) + (2.0 * l - mu) * mu) / (2.0 * mu * mu * ts * ts);
            p * coef * (kappa + g).powi(2)
        })
        .sum();
    let jam = round.h_cj * round.alpha_cj / round.alpha_u;
    let c5 = l * c.d as f64 / 2.0 * jam * jam;
    Ok(Constants {
        c1: c.c1(),
        c2,
        c3,
        c4,
        c5,
        c6: c.c6(round.alpha_u),
    })
}

/// Right-hand side of the bound over `rounds.len()` transmissions.
pub fn eval_bound(
    c: &BoundConstants,
    f0_minus_fstar: f64,
    rounds: &[RoundTerms],
    weights: &[f64],
) -> Result<BoundReport> {
    if rounds.is_empty() {
        return Err(Error::InvalidInput("bound needs at least one round".into()));
    }
    if !f0_minus_fstar.is_finite() {
        return Err(Error::InvalidInput(format!("f0 − f* = {f0_minus_fstar}")));
    }
    let mut round_sum = 0.0;
    let mut c6_sum = 0.0;
    let mut c1 = c.c1();
    for (idx, r) in rounds.iter().enumerate() {
        let k = eval_constants(c, idx + 1, r, weights)?;
        round_sum += k.c2 + k.c3 + k.c4 + k.c5;
        c6_sum += k.c6;
        c1 = k.c1;
    }
    let m = rounds.len() as f64;
    let c6 = c6_sum / m;
    let value = (c1 > 0.0).then(|| f0_minus_fstar / (m * c1) + c6 / c1 + round_sum / (m * c1));
    Ok(BoundReport {
        c1,
        c6,
        round_sum,
        rounds: rounds.len(),
        value,
    })
}

/// Running empirical estimates of `L`, `B`, `q`, `G` and `κ_i` along the
/// global iterate trace. Heuristic: the true constants are suprema over
/// all models, these are maxima over the models actually visited.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalConstants {
    pub l: f64,
    pub b: f64,
    pub q: f64,
    pub g: f64,
    pub kappa: Vec<f64>,
    probes: u64,
}

/// Relative size of the random perturbation used to probe smoothness.
const PROBE_SCALE: f64 = 1e-3;

fn full_grad(m: &ModelParams, client: &ClientRecord) -> Result<Vec<f64>> {
    grad(m, &client.data, 0.0, m)
}

impl EmpiricalConstants {
    pub fn new(clients: usize) -> Self {
        Self {
            l: 0.0,
            b: 0.0,
            q: 0.0,
            g: 0.0,
            kappa: vec![0.0; clients],
            probes: 0,
        }
    }

    /// Full-batch local and global gradients at `w`; updates `B`, `G` and
    /// `κ_i`, and probes `L` against a random nearby point.
    pub fn observe(&mut self, w: &ModelParams, clients: &[ClientRecord], seed: u64) -> Result<()> {
        if clients.len() != self.kappa.len() {
            return Err(Error::InvalidInput("client count changed".into()));
        }
        let local: Vec<Vec<f64>> = clients.iter().map(|c| full_grad(w, c)).collect::<Result<_>>()?;
        let global = weighted_sum(&local, clients);
        let gnorm = l2_norm(&global);
        self.g = self.g.max(gnorm);

        let mut second_moment = 0.0;
        for ((gi, c), kappa) in local.iter().zip(clients).zip(&mut self.kappa) {
            let n = l2_norm(gi);
            second_moment += c.weight * n * n;
            let gap: Vec<f64> = gi.iter().zip(&global).map(|(a, b)| a - b).collect();
            *kappa = kappa.max(l2_norm(&gap));
        }
        if gnorm > 0.0 {
            self.b = self.b.max(second_moment.sqrt() / gnorm);
        }

        let mut rng = stream(seed, Domain::Probe, self.probes, 0);
        self.probes += 1;
        let scale = PROBE_SCALE * l2_norm(w.values()).max(1.0) / (w.dim() as f64).sqrt();
        let shifted: Vec<f64> = w
            .values()
            .iter()
            .map(|v| v + scale * rng.random_range(-1.0..1.0))
            .collect();
        let w2 = w.with_values(shifted)?;
        let dw: Vec<f64> = w2.values().iter().zip(w.values()).map(|(a, b)| a - b).collect();
        let dist = l2_norm(&dw);
        if dist > 0.0 {
            for (gi, c) in local.iter().zip(clients) {
                let g2 = full_grad(&w2, c)?;
                let diff: Vec<f64> = g2.iter().zip(gi).map(|(a, b)| a - b).collect();
                self.l = self.l.max(l2_norm(&diff) / dist);
            }
        }
        Ok(())
    }

    /// Record `‖w̄^{2m−1} − w̄^{2m−2}‖`.
    pub fn observe_gap(&mut self, after: &ModelParams, before: &ModelParams) {
        let gap: Vec<f64> = after.values().iter().zip(before.values()).map(|(a, b)| a - b).collect();
        self.q = self.q.max(l2_norm(&gap));
    }
}

fn weighted_sum(local: &[Vec<f64>], clients: &[ClientRecord]) -> Vec<f64> {
    let mut out = vec![0.0; local.first().map_or(0, Vec::len)];
    for (gi, c) in local.iter().zip(clients) {
        for (o, v) in out.iter_mut().zip(gi) {
            *o += c.weight * v;
        }
    }
    out
}

/// Largest `κ_i` over clients at a single model.
pub fn max_dissimilarity(w: &ModelParams, clients: &[ClientRecord]) -> Result<f64> {
    let mut est = EmpiricalConstants::new(clients.len());
    est.observe(w, clients, 0)?;
    Ok(est.kappa.iter().copied().fold(0.0, f64::max))
}
