//! Moments-accountant ledger for Gaussian-noise over-the-air aggregation.
//!
//! Each transmitting round `m` releases the aggregate with effective
//! Gaussian noise of variance `σ_m²`, and client `i` enters it with weight
//! shrunk by its power slack `s_{i,m} ≥ 1`. Composing the log-moment bounds
//! and substituting the optimal moment order gives, for client `i`,
//!
//! ```text
//! ε_i = 2·sqrt(S_i / (2|D|²) · ln(1/δ)) + S_i / (2|D|²),   S_i = Σ_m 1 / (s_{i,m}² σ_m²)
//! ```
//!
//! and the client-independent bound is the same expression with
//! `S̄ = Σ_m 1/σ_m²` (valid because every `s_{i,m} ≥ 1`).
//!
//! Rounds that do not touch client data (the server-side extrapolation
//! steps of Upcycled-FL) are never recorded and cost nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total effective noise variance per coordinate at the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveNoise {
    pub sigma_sq: f64,
}

impl EffectiveNoise {
    /// `(α_CJ |h_CJ| / α_u)² + σ_c² / α_u²`.
    pub fn new(alpha_cj: f64, jammer_gain: f64, sigma_c: f64, alpha_u: f64) -> Self {
        let jam = alpha_cj * jammer_gain / alpha_u;
        Self {
            sigma_sq: jam * jam + sigma_c * sigma_c / (alpha_u * alpha_u),
        }
    }

    /// The part contributed by the jammer alone.
    pub fn jammer_part(alpha_cj: f64, jammer_gain: f64, alpha_u: f64) -> f64 {
        let jam = alpha_cj * jammer_gain / alpha_u;
        jam * jam
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    delta: f64,
    data_size: usize,
    /// `S_i` per client.
    client_sums: Vec<f64>,
    /// `S̄`.
    bound_sum: f64,
    rounds_counted: usize,
}

/// `ln(1/δ)`.
fn log_inv_delta(delta: f64) -> f64 {
    -delta.ln()
}

/// `ε = 2·sqrt(x·ln(1/δ)) + x` with `x = sum / (2|D|²)`.
pub fn epsilon_from_sum(sum: f64, data_size: usize, delta: f64) -> f64 {
    let n = data_size as f64;
    let x = sum / (2.0 * n * n);
    2.0 * (x * log_inv_delta(delta)).sqrt() + x
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("δ = {delta} not in (0, 1)")))
    }
}

impl PrivacyLedger {
    pub fn new(delta: f64, data_size: usize, clients: usize) -> Result<Self> {
        check_delta(delta)?;
        if data_size == 0 {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        Ok(Self {
            delta,
            data_size,
            client_sums: vec![0.0; clients],
            bound_sum: 0.0,
            rounds_counted: 0,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn data_size(&self) -> usize {
        self.data_size
    }

    pub fn clients(&self) -> usize {
        self.client_sums.len()
    }

    pub fn rounds_counted(&self) -> usize {
        self.rounds_counted
    }

    pub fn client_sum(&self, client: usize) -> f64 {
        self.client_sums[client]
    }

    pub fn bound_sum(&self) -> f64 {
        self.bound_sum
    }

    /// Account for one transmitting round.
    pub fn record_round(&mut self, noise: EffectiveNoise, s_by_client: &[f64]) -> Result<()> {
        if noise.sigma_sq == 0.0 {
            return Err(Error::DegeneratePrivacy);
        }
        if !(noise.sigma_sq > 0.0 && noise.sigma_sq.is_finite()) {
            return Err(Error::InvalidInput(format!("noise variance {}", noise.sigma_sq)));
        }
        if s_by_client.len() != self.client_sums.len() {
            return Err(Error::InvalidInput(format!(
                "{} slack factors for {} clients",
                s_by_client.len(),
                self.client_sums.len()
            )));
        }
        if let Some(bad) = s_by_client.iter().find(|&&s| !(s >= 1.0)) {
            return Err(Error::InvalidInput(format!("slack factor {bad} below 1")));
        }
        let inv = 1.0 / noise.sigma_sq;
        for (sum, &s) in self.client_sums.iter_mut().zip(s_by_client) {
            *sum += inv / (s * s);
        }
        self.bound_sum += inv;
        self.rounds_counted += 1;
        Ok(())
    }

    /// ε for one client, using its own slack history.
    pub fn epsilon_for_client(&self, client: usize) -> f64 {
        epsilon_from_sum(self.client_sums[client], self.data_size, self.delta)
    }

    /// Largest per-client ε.
    pub fn epsilon_max_client(&self) -> f64 {
        (0..self.client_sums.len())
            .map(|i| self.epsilon_for_client(i))
            .fold(0.0, f64::max)
    }

    /// Client-independent ε bound (all slack factors taken as 1).
    pub fn epsilon_upper_bound(&self) -> f64 {
        epsilon_from_sum(self.bound_sum, self.data_size, self.delta)
    }
}

/// Root of `a² + 2 ln(1/δ) a − ε ln(1/δ) = 0`:
/// `a = −ln(1/δ) + sqrt(ln(1/δ)² + ε ln(1/δ))`.
///
/// Written in the cancellation-free form `ε L / (L + sqrt(L² + ε L))`.
pub fn compute_a(eps: f64, delta: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("ε = {eps} must be positive")));
    }
    check_delta(delta)?;
    let l = log_inv_delta(delta);
    Ok(eps * l / (l + (l * l + eps * l).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(s: f64) -> EffectiveNoise {
        EffectiveNoise { sigma_sq: s }
    }

    #[test]
    fn record_increments() {
        let mut l = PrivacyLedger::new(1e-5, 100, 2).unwrap();
        l.record_round(noise(0.05), &[1.0, 2.0]).unwrap();
        assert!((l.client_sum(0) - 20.0).abs() < 1e-12);
        assert!((l.client_sum(1) - 5.0).abs() < 1e-12);
        assert!((l.bound_sum() - 20.0).abs() < 1e-12);
        assert_eq!(l.rounds_counted(), 1);
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let mut l = PrivacyLedger::new(1e-5, 100, 1).unwrap();
        assert!(matches!(l.record_round(noise(0.0), &[1.0]), Err(Error::DegeneratePrivacy)));
    }

    #[test]
    fn slack_below_one_rejected() {
        let mut l = PrivacyLedger::new(1e-5, 100, 1).unwrap();
        assert!(l.record_round(noise(1.0), &[0.5]).is_err());
    }

    #[test]
    fn empty_ledger_is_free() {
        let l = PrivacyLedger::new(1e-5, 100, 3).unwrap();
        assert_eq!(l.epsilon_for_client(0), 0.0);
        assert_eq!(l.epsilon_upper_bound(), 0.0);
    }

    #[test]
    fn worked_epsilon() {
        // S = 1000, |D| = 100, δ = 1e-5; high-precision value 1.5674271293851463.
        let mut l = PrivacyLedger::new(1e-5, 100, 1).unwrap();
        for _ in 0..10 {
            l.record_round(noise(0.01), &[1.0]).unwrap();
        }
        assert!((l.epsilon_for_client(0) - 1.567_427_129_385_146_4).abs() < 1e-9);
        assert_eq!(l.epsilon_for_client(0), l.epsilon_upper_bound());
    }

    #[test]
    fn doubling_data_size_scaling() {
        let delta = 1e-5;
        let s = 1234.5;
        let l = -f64::ln(delta);
        let parts = |n: usize| {
            let x = s / (2.0 * (n * n) as f64);
            (2.0 * (x * l).sqrt(), x)
        };
        let (sq1, add1) = parts(100);
        let (sq2, add2) = parts(200);
        assert!((add1 / add2 - 4.0).abs() < 1e-12);
        assert!((sq1 / sq2 - 2.0).abs() < 1e-12);
        assert!((epsilon_from_sum(s, 200, delta) - (sq2 + add2)).abs() < 1e-15);
    }

    #[test]
    fn a_examples() {
        assert!((compute_a(4.4, 0.01).unwrap() - 1.834_576_801_298_07).abs() < 1e-12);
        assert!(compute_a(1e-12, 0.01).unwrap() < 1e-12);
        assert!(compute_a(0.0, 0.01).is_err());
        assert!(compute_a(1.0, 1.0).is_err());
    }
}
