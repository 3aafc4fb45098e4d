//! Decentralized power control and cooperative-jammer design.
//!
//! Client `i` scales its clipped update by
//! `α_i = α_u p_i / (|h_i| τ s_i)`, so that after the channel and the
//! server's `1/α_u` the update arrives with weight `p_i / (τ s_i)`,
//! independent of the fading. The slack `s_i ≥ 1` is the smallest value that
//! keeps `‖x_i‖² ≤ P_i` for any update of norm at most `τ`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::privacy::compute_a;
use crate::rng::{stream, Domain};

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} = {v} must be positive")))
    }
}

/// `max(1, α_u p_i / (|h_i| sqrt(P_i)))`.
pub fn compute_s(alpha_u: f64, p_i: f64, h_mag: f64, power_cap: f64) -> Result<f64> {
    positive("alpha_u", alpha_u)?;
    positive("p_i", p_i)?;
    positive("|h_i|", h_mag)?;
    positive("P_i", power_cap)?;
    Ok((alpha_u * p_i / (h_mag * power_cap.sqrt())).max(1.0))
}

/// `α_i = α_u p_i / (|h_i| τ s_i)`.
pub fn client_pc_factor(alpha_u: f64, p_i: f64, h_mag: f64, tau: f64, s_i: f64) -> Result<f64> {
    positive("alpha_u", alpha_u)?;
    positive("p_i", p_i)?;
    positive("|h_i|", h_mag)?;
    positive("tau", tau)?;
    if !(s_i >= 1.0 && s_i.is_finite()) {
        return Err(Error::InvalidInput(format!("s_i = {s_i} must be at least 1")));
    }
    Ok(alpha_u * p_i / (h_mag * tau * s_i))
}

/// `x_i = α_i Δ_i`.
pub fn build_transmit_signal(alpha_i: f64, delta_clipped: &[f64]) -> Vec<f64> {
    delta_clipped.iter().map(|v| alpha_i * v).collect()
}

/// Server factor chosen so the tightest client runs at exactly `s_i = 1`:
/// `α_u = min_i |h_i| sqrt(P_i) / p_i`.
pub fn dynamic_alpha_u(gains: &[f64], weights: &[f64], power_caps: &[f64]) -> Result<f64> {
    if gains.is_empty() || gains.len() != weights.len() || gains.len() != power_caps.len() {
        return Err(Error::InvalidInput("gain/weight/power lists differ in length".into()));
    }
    let mut best = f64::INFINITY;
    for ((&h, &p), &cap) in gains.iter().zip(weights).zip(power_caps) {
        positive("|h_i|", h)?;
        positive("p_i", p)?;
        positive("P_i", cap)?;
        best = best.min(h * cap.sqrt() / p);
    }
    Ok(best)
}

/// Effective noise variance the accountant needs per round to reach ε over
/// `rounds` transmissions: `rounds · ln(1/δ) / (2 |D|² a²)`.
pub fn required_noise_variance(
    eps_target: f64,
    delta: f64,
    rounds: usize,
    data_size: usize,
) -> Result<f64> {
    let a = compute_a(eps_target, delta)?;
    Ok(variance_for_a(rounds, data_size, a, delta))
}

fn variance_for_a(rounds: usize, data_size: usize, a: f64, delta: f64) -> f64 {
    let n = data_size as f64;
    rounds as f64 / (2.0 * n * n * a * a) * (-delta.ln())
}

/// True when channel noise alone is not enough:
/// `M ln(1/δ) / (2 |D|² a²) > σ_c² / α_u²`.
pub fn jammer_needed(
    rounds: usize,
    data_size: usize,
    a: f64,
    delta: f64,
    sigma_c: f64,
    alpha_u: f64,
) -> Result<bool> {
    if a == 0.0 {
        return Err(Error::InvalidInput("a = 0 (ε must be positive)".into()));
    }
    positive("a", a)?;
    positive("alpha_u", alpha_u)?;
    if data_size == 0 {
        return Err(Error::InvalidInput("|D| must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("δ = {delta} not in (0, 1)")));
    }
    if rounds == 0 {
        return Ok(false);
    }
    Ok(variance_for_a(rounds, data_size, a, delta) > sigma_c * sigma_c / (alpha_u * alpha_u))
}

/// Smallest jammer factor meeting `(ε, δ)` with equality:
/// `α_CJ = (α_u / |h_CJ|) sqrt(M ln(1/δ) / (2|D|² a²) − σ_c²/α_u²)`,
/// or 0 when the channel noise already suffices.
pub fn design_jammer(
    eps_target: f64,
    delta: f64,
    rounds: usize,
    data_size: usize,
    alpha_u: f64,
    h_cj: f64,
    sigma_c: f64,
) -> Result<f64> {
    let a = compute_a(eps_target, delta)?;
    positive("alpha_u", alpha_u)?;
    positive("|h_CJ|", h_cj)?;
    if !(sigma_c >= 0.0) {
        return Err(Error::InvalidInput(format!("σ_c = {sigma_c} is negative")));
    }
    if !jammer_needed(rounds, data_size, a, delta, sigma_c, alpha_u)? {
        return Ok(0.0);
    }
    let radicand = variance_for_a(rounds, data_size, a, delta) - sigma_c * sigma_c / (alpha_u * alpha_u);
    Ok(alpha_u / h_cj * radicand.sqrt())
}

/// Jammer transmission `α_CJ · n`, `n ~ N(0, I_d)` from the `(seed, round)`
/// jammer stream.
pub fn jammer_signal(alpha_cj: f64, dim: usize, seed: u64, round: u64) -> Vec<f64> {
    let mut rng = stream(seed, Domain::Jammer, round, 0);
    (0..dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            alpha_cj * n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s_examples() {
        assert_eq!(compute_s(10.0, 0.1, 0.5, 4.0).unwrap(), 1.0);
        assert!((compute_s(100.0, 0.2, 0.5, 4.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(compute_s(0.0, 0.1, 0.5, 4.0).is_err());
        assert!(compute_s(1.0, 0.1, -0.5, 4.0).is_err());
    }

    #[test]
    fn s_keeps_power_inside_cap() {
        let (alpha_u, p, h, cap, tau) = (100.0, 0.2, 0.5, 4.0, 0.3);
        let s = compute_s(alpha_u, p, h, cap).unwrap();
        let a = client_pc_factor(alpha_u, p, h, tau, s).unwrap();
        // worst case: an update of norm exactly τ
        let delta = [tau * 0.6, tau * 0.8];
        let x = build_transmit_signal(a, &delta);
        assert!(crate::channel::check_power(&x, cap));
    }

    #[test]
    fn pc_factor_examples() {
        assert_eq!(client_pc_factor(1.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        // 10 · 0.02 / (0.8 · 0.5 · 1) = 1/2 exactly in rationals
        assert!((client_pc_factor(10.0, 0.02, 0.8, 0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(client_pc_factor(1.0, 1.0, 1.0, 1.0, 0.9).is_err());
    }

    #[test]
    fn effective_gain_cancels_fading() {
        for &h in &[0.01, 0.3, 1.0, 2.7] {
            let a = client_pc_factor(3.0, 0.25, h, 0.5, 2.0).unwrap();
            assert!((h * a / 3.0 - 0.25 / (0.5 * 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn transmit_signal_scaling() {
        assert_eq!(build_transmit_signal(2.0, &[0.1, -0.1]), vec![0.2, -0.2]);
        assert_eq!(build_transmit_signal(2.0, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn jammer_needed_examples() {
        let a = compute_a(1.0, 1e-5).unwrap();
        assert!(jammer_needed(10, 100, a, 1e-5, 0.1, 1.0).unwrap());
        assert!(!jammer_needed(10, 100, a, 1e-5, 0.1, 1e-3).unwrap());
        assert!(!jammer_needed(0, 100, a, 1e-5, 0.1, 1.0).unwrap());
        assert!(jammer_needed(10, 100, 0.0, 1e-5, 0.1, 1.0).is_err());
    }

    #[test]
    fn design_examples() {
        // Frozen from a 40-digit evaluation of the closed form.
        let acj = design_jammer(1.0, 1e-5, 10, 100, 1.0, 1.0, 0.1).unwrap();
        assert!((acj - 0.118_386_827_648_901_4).abs() < 1e-12);
        assert_eq!(design_jammer(1.0, 1e-5, 10, 100, 1e-3, 1.0, 0.1).unwrap(), 0.0);
        assert!(design_jammer(-1.0, 1e-5, 10, 100, 1.0, 1.0, 0.1).is_err());
        assert!(design_jammer(1.0, 0.0, 10, 100, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn dynamic_alpha_u_binds_one_client() {
        let gains = [0.5, 1.0, 2.0];
        let weights = [0.2, 0.3, 0.5];
        let caps = [4.0, 4.0, 9.0];
        let au = dynamic_alpha_u(&gains, &weights, &caps).unwrap();
        let s: Vec<f64> = (0..3)
            .map(|i| compute_s(au, weights[i], gains[i], caps[i]).unwrap())
            .collect();
        assert!(s.iter().all(|&v| v == 1.0));
        let tight = (0..3)
            .map(|i| au * weights[i] / (gains[i] * caps[i].sqrt()))
            .fold(0.0, f64::max);
        assert!((tight - 1.0).abs() < 1e-15);
    }
}
