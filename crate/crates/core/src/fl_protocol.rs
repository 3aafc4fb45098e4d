//! Server update rules and the per-iteration round driver.
//!
//! FedAvg and FedProx transmit on every global iteration. Upcycled-FL runs
//! `2M` iterations: odd ones train locally and transmit, even ones
//! extrapolate on the server with
//! `w̄^{2m} = w̄^{2m−1} + μ/(μ+λ_m) · (w̄^{2m−1} − w̄^{2m−2})`
//! and touch no client data.

use rayon::prelude::*;

use crate::channel::{draw_channels, ota_components, ChannelDraw};
use crate::data::{total_samples, ClientRecord};
use crate::error::{Error, Result};
use crate::model::{clip_update, local_solve, model_delta, LocalHyper, ModelParams};
use crate::power_control::{
    build_transmit_signal, client_pc_factor, compute_s, design_jammer, dynamic_alpha_u,
    jammer_signal,
};
use crate::privacy::{EffectiveNoise, PrivacyLedger};

pub use crate::model::Algorithm;

/// Piecewise-constant `m ↦ λ_m`, given as `(first m, λ)` breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    breakpoints: Vec<(usize, f64)>,
}

impl LambdaSchedule {
    pub fn new(mut breakpoints: Vec<(usize, f64)>) -> Result<Self> {
        breakpoints.sort_by_key(|&(m, _)| m);
        match breakpoints.first() {
            Some(&(1, _)) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "λ schedule must start with a breakpoint at m = 1".into(),
                ))
            }
        }
        if breakpoints.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidConfig("duplicate λ breakpoint".into()));
        }
        if let Some(&(m, l)) = breakpoints.iter().find(|&&(_, l)| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("λ at m = {m} is {l}, must be positive")));
        }
        Ok(Self { breakpoints })
    }

    pub fn constant(lambda: f64) -> Result<Self> {
        Self::new(vec![(1, lambda)])
    }

    pub fn breakpoints(&self) -> &[(usize, f64)] {
        &self.breakpoints
    }

    /// λ for transmission index `m ≥ 1`.
    pub fn lambda(&self, m: usize) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|&&(start, _)| start <= m)
            .last()
            .map(|&(_, l)| l)
            .unwrap_or(self.breakpoints[0].1)
    }
}

impl Default for LambdaSchedule {
    /// 0.15 for m ∈ [1, 25], 0.4 for [26, 50], 0.9 for [51, 75], 1.9 after.
    fn default() -> Self {
        Self {
            breakpoints: vec![(1, 0.15), (26, 0.4), (51, 0.9), (76, 1.9)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSchedule {
    pub algorithm: Algorithm,
    /// Number of transmitting rounds `M`.
    pub rounds: usize,
    pub lambda: LambdaSchedule,
}

impl GlobalSchedule {
    pub fn total_iterations(&self) -> usize {
        match self.algorithm {
            Algorithm::Upcycled => 2 * self.rounds,
            _ => self.rounds,
        }
    }

    /// Whether global iteration `iteration` (1-based) uses the uplink.
    pub fn transmits(&self, iteration: usize) -> bool {
        match self.algorithm {
            Algorithm::Upcycled => iteration % 2 == 1,
            _ => true,
        }
    }

    /// The `m` of iteration `iteration`: the transmission index for
    /// transmitting iterations and the index of the preceding transmission
    /// for Upcycled even iterations.
    pub fn round_index(&self, iteration: usize) -> usize {
        match self.algorithm {
            Algorithm::Upcycled => iteration.div_ceil(2),
            _ => iteration,
        }
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what}: length {} vs {}", a.len(), b.len())))
    }
}

/// `w_prev + effective_sum + jammer_term + channel_noise_term`.
pub fn odd_global_update(
    w_prev: &ModelParams,
    effective_sum: &[f64],
    jammer_term: &[f64],
    channel_noise_term: &[f64],
) -> Result<ModelParams> {
    let w = w_prev.values();
    same_len(w, effective_sum, "aggregated update")?;
    same_len(w, jammer_term, "jammer term")?;
    same_len(w, channel_noise_term, "noise term")?;
    let values = w
        .iter()
        .zip(effective_sum)
        .zip(jammer_term)
        .zip(channel_noise_term)
        .map(|(((w, s), j), z)| w + s + j + z)
        .collect();
    w_prev.with_values(values)
}

/// `w_odd + μ/(μ+λ) · (w_odd − w_prev_even)`.
pub fn even_global_update(
    w_odd: &ModelParams,
    w_prev_even: &ModelParams,
    mu: f64,
    lambda: f64,
) -> Result<ModelParams> {
    same_len(w_odd.values(), w_prev_even.values(), "extrapolation")?;
    if mu < 0.0 || lambda < 0.0 || mu + lambda == 0.0 || !(mu + lambda).is_finite() {
        return Err(Error::InvalidInput(format!("μ = {mu}, λ = {lambda}")));
    }
    let c = mu / (mu + lambda);
    let values = w_odd
        .values()
        .iter()
        .zip(w_prev_even.values())
        .map(|(&a, &b)| a + c * (a - b))
        .collect();
    w_odd.with_values(values)
}

/// Whether the server multiplies the received update by the public clip
/// bound τ, undoing the `1/τ` in every client's power-control factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerRescale {
    None,
    TauOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaUMode {
    /// Re-chosen each round so the tightest client has `s_i = 1`.
    Dynamic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JammerPolicy {
    Off,
    /// Per-round minimal factor for the ε target, times `margin`.
    Auto { eps_target: f64, margin: f64 },
    /// Constant jammer factor every transmitting round.
    Forced { alpha_cj: f64 },
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub schedule: GlobalSchedule,
    pub hyper: LocalHyper,
    pub sigma_c: f64,
    pub alpha_u_mode: AlphaUMode,
    pub server_rescale: ServerRescale,
    pub jammer: JammerPolicy,
    pub delta: f64,
    pub seed: u64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate(self.schedule.algorithm)?;
        if self.schedule.rounds == 0 {
            return Err(Error::InvalidConfig("need at least one transmitting round".into()));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_c.is_finite()) {
            return Err(Error::InvalidConfig(format!("σ_c = {} is invalid", self.sigma_c)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("δ = {} not in (0, 1)", self.delta)));
        }
        if let AlphaUMode::Fixed(a) = self.alpha_u_mode {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("fixed α_u = {a} must be positive")));
            }
        }
        match self.jammer {
            JammerPolicy::Auto { eps_target, margin } => {
                if !(eps_target > 0.0 && eps_target.is_finite()) {
                    return Err(Error::InvalidConfig(format!("ε target {eps_target} must be positive")));
                }
                if !(margin >= 1.0 && margin.is_finite()) {
                    return Err(Error::InvalidConfig(format!("jammer margin {margin} must be ≥ 1")));
                }
            }
            JammerPolicy::Forced { alpha_cj } if !(alpha_cj >= 0.0 && alpha_cj.is_finite()) => {
                return Err(Error::InvalidConfig(format!("jammer factor {alpha_cj} is invalid")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// What happened in one global iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub iteration: usize,
    pub transmitted: bool,
    pub alpha_u: f64,
    pub alpha_cj: f64,
    /// Effective noise variance charged to the ledger (0 when nothing was sent).
    pub sigma_sq: f64,
    /// Jammer share of `sigma_sq`.
    pub jammer_var: f64,
    pub slack: Vec<f64>,
    pub avg_tx_power: f64,
    /// `max_i ‖x_i‖² / P_i`.
    pub max_power_ratio: f64,
    pub channel: Option<ChannelDraw>,
}

/// Server and client state across global iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: ProtocolConfig,
    clients: Vec<ClientRecord>,
    global: ModelParams,
    /// Last model broadcast to the clients (`w̄^{2m−2}` for Upcycled-FL).
    anchor: ModelParams,
    ledger: PrivacyLedger,
    iteration: usize,
    draws_consumed: usize,
    /// Set once a round went out with zero effective noise.
    unbounded: bool,
}

impl Trainer {
    pub fn new(cfg: ProtocolConfig, clients: Vec<ClientRecord>, init: ModelParams) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::InvalidConfig("no clients".into()));
        }
        for c in &clients {
            if c.data.is_empty() {
                return Err(Error::InvalidConfig(format!("client {} has no data", c.id)));
            }
            if !(c.power_cap > 0.0 && c.weight > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "client {} has weight {} and power cap {}",
                    c.id, c.weight, c.power_cap
                )));
            }
        }
        let ledger = PrivacyLedger::new(cfg.delta, total_samples(&clients), clients.len())?;
        Ok(Self {
            cfg,
            clients,
            anchor: init.clone(),
            global: init,
            ledger,
            iteration: 0,
            draws_consumed: 0,
            unbounded: false,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientRecord] {
        &self.clients
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn draws_consumed(&self) -> usize {
        self.draws_consumed
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.schedule.total_iterations()
    }

    /// Client-independent ε so far (infinite after a noiseless release).
    pub fn eps_bound(&self) -> f64 {
        if self.unbounded {
            f64::INFINITY
        } else {
            self.ledger.epsilon_upper_bound()
        }
    }

    pub fn eps_max_client(&self) -> f64 {
        if self.unbounded {
            f64::INFINITY
        } else {
            self.ledger.epsilon_max_client()
        }
    }

    /// Execute global iteration `iteration`; iterations must be run in
    /// order starting from 1.
    pub fn run_round(&mut self, iteration: usize) -> Result<RoundReport> {
        if iteration != self.iteration + 1 {
            return Err(Error::InvalidInput(format!(
                "expected iteration {}, got {iteration}",
                self.iteration + 1
            )));
        }
        if iteration > self.cfg.schedule.total_iterations() {
            return Err(Error::InvalidInput(format!("iteration {iteration} past the schedule")));
        }
        let report = if self.cfg.schedule.transmits(iteration) {
            self.transmit(iteration)?
        } else {
            self.extrapolate(iteration)?
        };
        if !self.global.is_finite() {
            return Err(Error::Invariant(format!("global model not finite at iteration {iteration}")));
        }
        self.iteration = iteration;
        Ok(report)
    }

    fn extrapolate(&mut self, iteration: usize) -> Result<RoundReport> {
        let m = self.cfg.schedule.round_index(iteration);
        let lambda = self.cfg.schedule.lambda.lambda(m);
        let next = even_global_update(&self.global, &self.anchor, self.cfg.hyper.mu, lambda)?;
        self.global = next.clone();
        self.anchor = next;
        Ok(RoundReport {
            iteration,
            transmitted: false,
            alpha_u: 0.0,
            alpha_cj: 0.0,
            sigma_sq: 0.0,
            jammer_var: 0.0,
            slack: Vec::new(),
            avg_tx_power: 0.0,
            max_power_ratio: 0.0,
            channel: None,
        })
    }

    fn transmit(&mut self, iteration: usize) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let tau = cfg.hyper.tau;
        let tx = self.draws_consumed as u64 + 1;
        let draw = draw_channels(self.clients.len(), tx, cfg.seed, cfg.sigma_c)?;

        let anchor = &self.anchor;
        let deltas: Vec<Vec<f64>> = self
            .clients
            .par_iter()
            .map(|c| {
                let local = local_solve(anchor, c, &cfg.hyper, cfg.schedule.algorithm, cfg.seed, tx)?;
                Ok(clip_update(&model_delta(&local, anchor), tau))
            })
            .collect::<Result<_>>()?;

        let weights: Vec<f64> = self.clients.iter().map(|c| c.weight).collect();
        let caps: Vec<f64> = self.clients.iter().map(|c| c.power_cap).collect();
        let alpha_u = match cfg.alpha_u_mode {
            AlphaUMode::Dynamic => dynamic_alpha_u(&draw.gains, &weights, &caps)?,
            AlphaUMode::Fixed(a) => a,
        };

        let mut slack = Vec::with_capacity(self.clients.len());
        let mut signals = Vec::with_capacity(self.clients.len());
        let mut total_power = 0.0;
        let mut max_ratio: f64 = 0.0;
        for (i, delta) in deltas.iter().enumerate() {
            let h = draw.gains[i];
            let s = compute_s(alpha_u, weights[i], h, caps[i])?;
            let alpha_i = client_pc_factor(alpha_u, weights[i], h, tau, s)?;
            let x = build_transmit_signal(alpha_i, delta);
            let energy: f64 = x.iter().map(|v| v * v).sum();
            if !crate::channel::check_power(&x, caps[i]) {
                return Err(Error::Invariant(format!(
                    "client {i} exceeds its power cap at iteration {iteration}: {energy} > {}",
                    caps[i]
                )));
            }
            total_power += energy;
            max_ratio = max_ratio.max(energy / caps[i]);
            slack.push(s);
            signals.push(x);
        }

        let alpha_cj = match cfg.jammer {
            JammerPolicy::Off => 0.0,
            JammerPolicy::Forced { alpha_cj } => alpha_cj,
            JammerPolicy::Auto { eps_target, margin } => {
                margin
                    * design_jammer(
                        eps_target,
                        cfg.delta,
                        cfg.schedule.rounds,
                        self.ledger.data_size(),
                        alpha_u,
                        draw.jammer_gain,
                        cfg.sigma_c,
                    )?
            }
        };
        let dim = self.anchor.dim();
        let jam = (alpha_cj > 0.0).then(|| jammer_signal(alpha_cj, dim, cfg.seed, tx));
        let recv = ota_components(&signals, &draw, jam.as_deref(), cfg.seed)?;

        let scale = match cfg.server_rescale {
            ServerRescale::None => 1.0 / alpha_u,
            ServerRescale::TauOnly => tau / alpha_u,
        };
        let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
        let next = odd_global_update(
            &self.anchor,
            &scaled(&recv.signal),
            &scaled(&recv.jammer),
            &scaled(&recv.noise),
        )?;

        let noise = EffectiveNoise::new(alpha_cj, draw.jammer_gain, cfg.sigma_c, alpha_u);
        if noise.sigma_sq > 0.0 {
            self.ledger.record_round(noise, &slack)?;
        } else {
            self.unbounded = true;
        }

        self.draws_consumed += 1;
        self.global = next;
        if cfg.schedule.algorithm != Algorithm::Upcycled {
            self.anchor = self.global.clone();
        }

        Ok(RoundReport {
            iteration,
            transmitted: true,
            alpha_u,
            alpha_cj,
            sigma_sq: noise.sigma_sq,
            jammer_var: EffectiveNoise::jammer_part(alpha_cj, draw.jammer_gain, alpha_u),
            slack,
            avg_tx_power: total_power / self.clients.len() as f64,
            max_power_ratio: max_ratio,
            channel: Some(draw),
        })
    }
}
