// SPDX-License-Identifier: Apache-2.0

//! Objective quality measures: segmental SNR, STOI and SI-SNR improvement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::losses::si_snr;
use crate::resample::resample;

pub const SSNR_FRAME_SECS: f64 = 0.032;
pub const SSNR_FLOOR_DB: f64 = -10.0;
pub const SSNR_CEIL_DB: f64 = 35.0;
pub const SSNR_ACTIVITY_RANGE_DB: f64 = 40.0;

fn check_equal(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::InvalidInput(format!(
            "rate mismatch: reference {} Hz vs estimate {} Hz",
            reference.sample_rate(),
            estimate.sample_rate()
        )));
    }
    Ok(())
}

/// Segmental SNR over non-overlapping 32 ms frames.
///
/// Per-frame values are clipped to [-10, 35] dB and averaged over frames
/// whose reference energy lies within 40 dB of the loudest frame.
pub fn ssnr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_equal(reference, estimate)?;
    let frame = (SSNR_FRAME_SECS * reference.sample_rate() as f64).round() as usize;
    let (r, e) = (reference.samples(), estimate.samples());
    let stats: Vec<(f64, f64)> = r
        .chunks_exact(frame)
        .zip(e.chunks_exact(frame))
        .map(|(rf, ef)| {
            let sig: f64 = rf.iter().map(|v| v * v).sum();
            let err: f64 = rf.iter().zip(ef).map(|(a, b)| (a - b) * (a - b)).sum();
            (sig, err)
        })
        .collect();
    let max_energy = stats.iter().map(|s| s.0).fold(0.0, f64::max);
    if max_energy <= 0.0 {
        return Err(Error::Degenerate("no active reference frames".into()));
    }
    let threshold = max_energy * 10f64.powf(-SSNR_ACTIVITY_RANGE_DB / 10.0);
    let active: Vec<f64> = stats
        .iter()
        .filter(|(sig, _)| *sig > threshold)
        .map(|(sig, err)| {
            let db = if *err == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (sig / err).log10()
            };
            db.clamp(SSNR_FLOOR_DB, SSNR_CEIL_DB)
        })
        .collect();
    Ok(active.iter().sum::<f64>() / active.len() as f64)
}

const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Hann window without the zero end points.
fn stoi_window() -> Vec<f64> {
    let n = STOI_FRAME as f64;
    (0..STOI_FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 1.0) / (n + 1.0)).cos())
        .collect()
}

/// One-third-octave band edges as `[lo, hi)` FFT bin ranges.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = STOI_FFT / 2 + 1;
    let freq = |k: usize| k as f64 * STOI_RATE as f64 / STOI_FFT as f64;
    let nearest = |target: f64| {
        let mut best = 0;
        for k in 1..bins {
            if (freq(k) - target).powi(2) < (freq(best) - target).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Frame starts used by the analysis (the final full frame is excluded).
fn frame_starts(len: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(STOI_FRAME)).step_by(hop)
}

/// Drops frames more than 40 dB below the loudest reference frame and
/// overlap-adds the remaining windowed frames.
fn remove_silent_frames(x: &[f64], y: &[f64], window: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let starts: Vec<usize> = frame_starts(x.len(), hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = x[s..s + STOI_FRAME]
                .iter()
                .zip(window)
                .map(|(v, w)| (v * w).powi(2))
                .sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, e)| max - STOI_DYN_RANGE_DB - **e < 0.0)
        .map(|(s, _)| *s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * hop + STOI_FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..STOI_FRAME {
            xs[j * hop + i] += window[i] * x[s + i];
            ys[j * hop + i] += window[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// Band envelopes, `bands x frames`.
fn band_envelopes(x: &[f64], window: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(STOI_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_FFT];
    let mut env = vec![Vec::new(); bands.len()];
    for s in frame_starts(x.len(), STOI_FRAME / 2) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i].re = window[i] * x[s + i];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b].push(p.sqrt());
        }
    }
    env
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `estimate` against `reference`.
pub fn stoi(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_equal(reference, estimate)?;
    let rate = reference.sample_rate();
    let x = resample(reference.samples(), rate, STOI_RATE);
    let y = resample(estimate.samples(), rate, STOI_RATE);
    let window = stoi_window();
    let (x, y) = remove_silent_frames(&x, &y, &window);
    let bands = third_octave_bands();
    let xe = band_envelopes(&x, &window, &bands);
    let ye = band_envelopes(&y, &window, &bands);
    let frames = xe[0].len();
    if frames < STOI_SEGMENT {
        return Err(Error::InsufficientSignal(format!(
            "{frames} active frames after silence removal, need at least {STOI_SEGMENT}"
        )));
    }
    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let n_seg = frames - STOI_SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..n_seg {
        for b in 0..STOI_BANDS {
            let xs = &xe[b][m..m + STOI_SEGMENT];
            let ys = &ye[b][m..m + STOI_SEGMENT];
            let alpha = norm(xs) / (norm(ys) + f64::EPSILON);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(yv, xv)| (yv * alpha).min(xv * clip))
                .collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / STOI_SEGMENT as f64;
                v.iter_mut().for_each(|a| *a -= mean);
                let n = norm(v) + f64::EPSILON;
                v.iter_mut().for_each(|a| *a /= n);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (n_seg * STOI_BANDS) as f64)
}

/// One utterance to score: clean reference, unprocessed mixture, enhanced output.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub reference: Waveform,
    pub noisy: Waveform,
    pub estimate: Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_snr_db: f64,
    pub si_snr_improvement_db: f64,
    pub ssnr_db: f64,
    pub stoi: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub si_snr_db: f64,
    pub si_snr_improvement_db: f64,
    pub ssnr_db: f64,
    pub stoi: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub failures: Vec<Failure>,
    pub means: Option<MetricMeans>,
    pub count: usize,
}

fn score(item: &EvalItem) -> Result<UtteranceMetrics> {
    let si = si_snr(&item.reference, &item.estimate)?;
    let base = si_snr(&item.reference, &item.noisy)?;
    Ok(UtteranceMetrics {
        id: item.id.clone(),
        si_snr_db: si,
        si_snr_improvement_db: si - base,
        ssnr_db: ssnr(&item.reference, &item.estimate)?,
        stoi: stoi(&item.reference, &item.estimate)?,
        pesq: None,
    })
}

/// Scores every item; failures are recorded and excluded from the means.
///
/// `pesq` optionally maps utterance ids to externally computed PESQ scores.
pub fn evaluate_corpus(
    items: &[EvalItem],
    pesq: Option<&BTreeMap<String, f64>>,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("empty evaluation corpus".into()));
    }
    let results: Vec<Result<UtteranceMetrics>> = items.par_iter().map(score).collect();
    let mut utterances = Vec::new();
    let mut failures = Vec::new();
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(mut u) => {
                u.pesq = pesq.and_then(|m| m.get(&u.id).copied());
                utterances.push(u);
            }
            Err(e) => failures.push(Failure {
                id: item.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let means = (!utterances.is_empty()).then(|| {
        let n = utterances.len() as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| utterances.iter().map(f).sum::<f64>() / n;
        let pesq_scores: Vec<f64> = utterances.iter().filter_map(|u| u.pesq).collect();
        MetricMeans {
            si_snr_db: mean(|u| u.si_snr_db),
            si_snr_improvement_db: mean(|u| u.si_snr_improvement_db),
            ssnr_db: mean(|u| u.ssnr_db),
            stoi: mean(|u| u.stoi),
            pesq: (!pesq_scores.is_empty())
                .then(|| pesq_scores.iter().sum::<f64>() / pesq_scores.len() as f64),
        }
    });
    Ok(MetricsReport {
        count: utterances.len(),
        utterances,
        failures,
        means,
    })
}

/// Reads a JSON object mapping utterance ids to PESQ scores.
pub fn load_pesq_sidecar(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table: SSNR, PESQ (when present), STOI in percent,
    /// then SI-SNR and its improvement.
    pub fn to_table(&self) -> String {
        let with_pesq = self.utterances.iter().any(|u| u.pesq.is_some());
        let mut out = String::new();
        let _ = write!(out, "{:<24} {:>10}", "utterance", "SSNR(dB)");
        if with_pesq {
            let _ = write!(out, " {:>8}", "PESQ");
        }
        let _ = writeln!(
            out,
            " {:>8} {:>11} {:>12}",
            "STOI(%)", "SI-SNR(dB)", "SI-SNRi(dB)"
        );
        let mut row = |id: &str, ssnr: f64, pesq: Option<f64>, stoi: f64, si: f64, sii: f64| {
            let _ = write!(out, "{id:<24} {ssnr:>10.3}");
            if with_pesq {
                match pesq {
                    Some(p) => {
                        let _ = write!(out, " {p:>8.3}");
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            let _ = writeln!(out, " {:>8.2} {si:>11.3} {sii:>12.3}", stoi * 100.0);
        };
        for u in &self.utterances {
            row(
                &u.id,
                u.ssnr_db,
                u.pesq,
                u.stoi,
                u.si_snr_db,
                u.si_snr_improvement_db,
            );
        }
        if let Some(m) = &self.means {
            row(
                "mean",
                m.ssnr_db,
                m.pesq,
                m.stoi,
                m.si_snr_db,
                m.si_snr_improvement_db,
            );
        }
        for f in &self.failures {
            let _ = writeln!(out, "{:<24} failed: {}", f.id, f.error);
        }
        out
    }
}
