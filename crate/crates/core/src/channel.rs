//! Uplink channel: block Rayleigh fading, AWGN and analog superposition.
//!
//! With perfect CSI each transmitter pre-rotates by its channel phase, so
//! the only thing that survives at the receiver is the magnitude `|h|`.
//! Everything here is therefore real-valued.

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Relative slack on the power check to absorb rounding.
pub const POWER_SLACK: f64 = 1e-9;

/// One round's channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    /// `|h_i|` per client.
    pub gains: Vec<f64>,
    /// `|h_CJ|`.
    pub jammer_gain: f64,
    /// AWGN standard deviation per coordinate.
    pub sigma_c: f64,
    pub round: u64,
}

/// Magnitude of a `CN(0, 1)` sample: `sqrt(u² + v²)` with `u, v ~ N(0, 1/2)`.
fn rayleigh<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = StandardNormal.sample(rng);
        let v: f64 = StandardNormal.sample(rng);
        let h = ((u * u + v * v) * 0.5).sqrt();
        if h > 0.0 {
            return h;
        }
    }
}

/// Draw `K` client gains and the jammer gain for `round`.
///
/// The stream depends only on `(seed, round)`, so the draw for a given
/// transmission does not depend on how many draws came before it.
pub fn draw_channels(k: usize, round: u64, seed: u64, sigma_c: f64) -> Result<ChannelDraw> {
    if k == 0 {
        return Err(Error::InvalidInput("need at least one client".into()));
    }
    if !(sigma_c >= 0.0 && sigma_c.is_finite()) {
        return Err(Error::InvalidInput(format!("noise std {sigma_c} must be nonnegative")));
    }
    let mut rng = stream(seed, Domain::Fading, round, 0);
    let gains = (0..k).map(|_| rayleigh(&mut rng)).collect();
    let jammer_gain = rayleigh(&mut rng);
    Ok(ChannelDraw {
        gains,
        jammer_gain,
        sigma_c,
        round,
    })
}

/// The three parts of a received vector, kept apart so the server can
/// account for each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    /// `Σ_i |h_i| x_i`
    pub signal: Vec<f64>,
    /// `|h_CJ| x_CJ` (zeros when the jammer is silent)
    pub jammer: Vec<f64>,
    /// AWGN `z`
    pub noise: Vec<f64>,
}

impl Received {
    /// `y = signal + jammer + noise`.
    pub fn total(&self) -> Vec<f64> {
        self.signal
            .iter()
            .zip(&self.jammer)
            .zip(&self.noise)
            .map(|((s, j), z)| s + j + z)
            .collect()
    }
}

/// Superpose the transmissions and add the channel noise, component-wise.
///
/// The AWGN comes from the `(noise_seed, round)` noise stream.
pub fn ota_components(
    signals: &[Vec<f64>],
    draw: &ChannelDraw,
    jammer_signal: Option<&[f64]>,
    noise_seed: u64,
) -> Result<Received> {
    let d = signals
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no transmitted signals".into()))?;
    if signals.len() != draw.gains.len() {
        return Err(Error::InvalidInput(format!(
            "{} signals for {} channel gains",
            signals.len(),
            draw.gains.len()
        )));
    }
    if signals.iter().any(|s| s.len() != d) || jammer_signal.is_some_and(|j| j.len() != d) {
        return Err(Error::InvalidInput("signal lengths differ".into()));
    }

    let mut signal = vec![0.0; d];
    for (x, &h) in signals.iter().zip(&draw.gains) {
        for (acc, &v) in signal.iter_mut().zip(x) {
            *acc += h * v;
        }
    }
    let jammer = match jammer_signal {
        Some(j) => j.iter().map(|v| draw.jammer_gain * v).collect(),
        None => vec![0.0; d],
    };
    let noise = if draw.sigma_c > 0.0 {
        let normal = Normal::new(0.0, draw.sigma_c)
            .map_err(|e| Error::InvalidInput(format!("noise distribution: {e}")))?;
        let mut rng = stream(noise_seed, Domain::Noise, draw.round, 0);
        (0..d).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; d]
    };
    Ok(Received {
        signal,
        jammer,
        noise,
    })
}

/// Received vector `y = Σ_i |h_i| x_i + |h_CJ| x_CJ + z`.
pub fn ota_aggregate(
    signals: &[Vec<f64>],
    draw: &ChannelDraw,
    jammer_signal: Option<&[f64]>,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    Ok(ota_components(signals, draw, jammer_signal, noise_seed)?.total())
}

/// `‖x‖² ≤ P`, up to a relative slack of 1e-9.
pub fn check_power(x: &[f64], power_cap: f64) -> bool {
    let energy: f64 = x.iter().map(|v| v * v).sum();
    energy <= power_cap * (1.0 + POWER_SLACK)
}

/// SNR in dB to a linear power ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Per-client power cap for a target SNR, `P = SNR · d · σ_c²`.
pub fn power_cap_for_snr(snr_db: f64, dim: usize, sigma_c: f64) -> f64 {
    db_to_linear(snr_db) * dim as f64 * sigma_c * sigma_c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(gains: Vec<f64>, sigma_c: f64) -> ChannelDraw {
        ChannelDraw {
            gains,
            jammer_gain: 1.0,
            sigma_c,
            round: 0,
        }
    }

    #[test]
    fn identity_channel() {
        let y = ota_aggregate(&[vec![1.0, 2.0]], &draw(vec![1.0], 0.0), None, 0).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn two_clients_superpose() {
        let y = ota_aggregate(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &draw(vec![0.5, 2.0], 0.0),
            None,
            0,
        )
        .unwrap();
        assert_eq!(y, vec![0.5, 2.0]);
    }

    #[test]
    fn jammer_adds_scaled_signal() {
        let mut d = draw(vec![1.0], 0.0);
        d.jammer_gain = 0.5;
        let y = ota_aggregate(&[vec![1.0, 1.0]], &d, Some(&[2.0, -2.0]), 0).unwrap();
        assert_eq!(y, vec![2.0, 0.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let d = draw(vec![1.0, 1.0], 0.0);
        assert!(ota_aggregate(&[vec![1.0], vec![1.0, 2.0]], &d, None, 0).is_err());
        assert!(ota_aggregate(&[vec![1.0]], &d, None, 0).is_err());
        let d1 = draw(vec![1.0], 0.0);
        assert!(ota_aggregate(&[vec![1.0]], &d1, Some(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn power_check_boundary() {
        assert!(check_power(&[1.0, 1.0], 2.0));
        assert!(!check_power(&[2.0, 0.0], 2.0));
    }

    #[test]
    fn draws_are_deterministic_and_positive() {
        let a = draw_channels(50, 3, 9, 1.0).unwrap();
        let b = draw_channels(50, 3, 9, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.gains.iter().all(|&h| h > 0.0) && a.jammer_gain > 0.0);
        assert_ne!(a, draw_channels(50, 4, 9, 1.0).unwrap());
    }

    #[test]
    fn snr_power_cap() {
        assert!((power_cap_for_snr(10.0, 100, 0.5) - 250.0).abs() < 1e-9);
        assert!((db_to_linear(1.0) - 1.258_925_411_794_167_2).abs() < 1e-15);
    }
}
