// SPDX-License-Identifier: Apache-2.0

//! Shared inputs for the benchmarks.

use vbse_core::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use vbse_core::signals::{noise, speech_like, NoiseKind};

/// Speech-like signal plus white noise at roughly 5 dB SNR.
pub fn noisy_utterance(seconds: f64, seed: u64) -> (Waveform, Waveform) {
    let len = (seconds * DEFAULT_SAMPLE_RATE as f64) as usize;
    let clean = speech_like(len, DEFAULT_SAMPLE_RATE, seed);
    let n = noise(NoiseKind::White, len, DEFAULT_SAMPLE_RATE, seed + 1);
    let noisy = clean.iter().zip(&n).map(|(s, v)| s + 0.56 * v).collect();
    (
        Waveform::new(clean, DEFAULT_SAMPLE_RATE).expect("finite"),
        Waveform::new(noisy, DEFAULT_SAMPLE_RATE).expect("finite"),
    )
}
