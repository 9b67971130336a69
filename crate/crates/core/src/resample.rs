// SPDX-License-Identifier: Apache-2.0

//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc filter.

use std::f64::consts::PI;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Anti-aliasing filter for an `up / down` conversion (60 dB rejection,
/// transition width a tenth of the cutoff), normalized to unit DC gain.
pub fn design_filter(up: u64, down: u64) -> Vec<f64> {
    let g = gcd(up, down);
    let (p, q) = (up / g, down / g);
    let rejection_db = 60.0;
    let cutoff = 1.0 / (2.0 * p.max(q) as f64);
    let roll_off = cutoff / 10.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * half + 1) as f64;
    let i0_beta = bessel_i0(beta);
    let mut h: Vec<f64> = (-half..=half)
        .enumerate()
        .map(|(n, t)| {
            let r = 2.0 * n as f64 / (m - 1.0) - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            kaiser * 2.0 * p as f64 * cutoff * sinc(2.0 * cutoff * t as f64)
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Resamples by the rational factor `up / down` with a zero-phase FIR.
///
/// Output length is `ceil(len * up / down)`; output sample `m` sits at input
/// time `m * down / up`.
pub fn resample_poly(x: &[f64], up: u64, down: u64, taps: &[f64]) -> Vec<f64> {
    let g = gcd(up, down);
    let (p, q) = ((up / g) as usize, (down / g) as usize);
    if p == 1 && q == 1 {
        return x.to_vec();
    }
    let n_out = (x.len() * p).div_ceil(q);
    let half = (taps.len() - 1) / 2;
    let gain = p as f64;
    (0..n_out)
        .map(|m| {
            // Upsampled-domain position of the filter center.
            let center = m * q + half;
            // Input samples n contribute when 0 <= center - n*p < taps.len().
            let n_hi = (center / p).min(x.len().saturating_sub(1));
            let n_lo = if center + 1 > taps.len() {
                (center + 1 - taps.len()).div_ceil(p)
            } else {
                0
            };
            let mut acc = 0.0;
            if n_lo <= n_hi {
                for (n, xv) in x.iter().enumerate().take(n_hi + 1).skip(n_lo) {
                    acc += xv * taps[center - n * p];
                }
            }
            acc * gain
        })
        .collect()
}

/// Resamples between integer rates with the default filter design.
pub fn resample(x: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate {
        return x.to_vec();
    }
    let taps = design_filter(to_rate as u64, from_rate as u64);
    resample_poly(x, to_rate as u64, from_rate as u64, &taps)
}
