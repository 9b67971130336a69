// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic signals: a speech-like source and a few noise colours.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const TARGET_RMS: f64 = 0.1;

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= TARGET_RMS / rms);
    }
}

fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|(fc, bw)| (-0.5 * ((f - fc) / bw).powi(2)).exp())
        .sum::<f64>()
        + 0.02
}

/// Syllable-rate voiced and unvoiced bursts separated by short pauses.
///
/// Voiced bursts are harmonic series on a drifting pitch shaped by three
/// formant bumps; unvoiced bursts are high-passed noise. Output RMS is 0.1.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let nyquist_cap = (0.45 * fs).min(4000.0);
    let mut out = vec![0.0; len];
    let mut pos = (rng.random_range(0.02..0.1) * fs) as usize;
    while pos < len {
        let dur = (rng.random_range(0.12..0.30) * fs) as usize;
        let end = (pos + dur).min(len);
        let amp = rng.random_range(0.3..1.0);
        let n = end - pos;
        let envelope = |i: usize| (PI * i as f64 / n.max(1) as f64).sin().powf(0.6);
        if rng.random_bool(0.8) {
            let f0_start: f64 = rng.random_range(90.0..220.0);
            let f0_end = f0_start * rng.random_range(0.8..1.25);
            let formants = [
                (rng.random_range(300.0..800.0), 90.0),
                (rng.random_range(900.0..2200.0), 140.0),
                (rng.random_range(2400.0..3000.0), 200.0),
            ];
            let mut phase = 0.0;
            let n_harm = (nyquist_cap / f0_start.min(f0_end)) as usize;
            let gains: Vec<f64> = (1..=n_harm)
                .map(|h| {
                    formant_gain(h as f64 * (f0_start + f0_end) / 2.0, &formants)
                        / (h as f64).sqrt()
                })
                .collect();
            for i in 0..n {
                let f0 = f0_start + (f0_end - f0_start) * i as f64 / n as f64;
                phase += 2.0 * PI * f0 / fs;
                let mut v = 0.0;
                for (h, g) in gains.iter().enumerate() {
                    let fh = f0 * (h + 1) as f64;
                    if fh < nyquist_cap {
                        v += g * (phase * (h + 1) as f64).sin();
                    }
                }
                out[pos + i] += amp * envelope(i) * v;
            }
        } else {
            let mut prev = 0.0;
            for i in 0..n {
                let w: f64 = StandardNormal.sample(&mut rng);
                out[pos + i] += amp * 0.5 * envelope(i) * (w - prev);
                prev = w;
            }
        }
        pos = end + (rng.random_range(0.03..0.15) * fs) as usize;
    }
    normalize_rms(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "babble" => Ok(Self::Babble),
            other => Err(format!(
                "unknown noise kind `{other}` (white, pink, babble)"
            )),
        }
    }
}

/// Stationary noise at RMS 0.1.
pub fn noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::Pink => {
            // Kellet's economy filter bank.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for k in 0..6 {
                let talker = speech_like(len, sample_rate, seed.wrapping_mul(31).wrapping_add(k));
                acc.iter_mut().zip(talker).for_each(|(a, t)| *a += t);
            }
            acc
        }
    };
    normalize_rms(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let a = speech_like(16_000, 16_000, 3);
        assert_eq!(a, speech_like(16_000, 16_000, 3));
        assert_ne!(a, speech_like(16_000, 16_000, 4));
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - TARGET_RMS).abs() < 1e-12);
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble] {
            let n = noise(kind, 8_000, 16_000, 1);
            assert_eq!(n, noise(kind, 8_000, 16_000, 1));
            assert!(n.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn speech_has_pauses() {
        let a = speech_like(32_000, 16_000, 5);
        let frame_energy: Vec<f64> = a
            .chunks(160)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        let max = frame_energy.iter().cloned().fold(0.0, f64::max);
        let quiet = frame_energy.iter().filter(|e| **e < max * 1e-3).count();
        assert!(quiet > 5, "expected gaps between bursts");
    }

    #[test]
    fn pink_noise_tilts_down() {
        let n = noise(NoiseKind::Pink, 1 << 15, 16_000, 2);
        // Lag-one autocorrelation is near zero for white noise, high for pink.
        let r1: f64 =
            n.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / n.iter().map(|v| v * v).sum::<f64>();
        assert!(r1 > 0.5);
    }
}
