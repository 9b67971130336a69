// SPDX-License-Identifier: Apache-2.0

//! Short-time Fourier analysis/synthesis and binaural time-frequency statistics.
//!
//! Analysis is centered: the signal is reflect-padded by `window_len / 2` on
//! both sides so that frame `t` is centered on sample `t * hop`. With a
//! 40000-sample input and the default 400/160/512 configuration this gives
//! a 251 x 257 grid. Synthesis is windowed overlap-add normalized by the
//! summed squared window, which inverts analysis exactly wherever at least
//! one frame covers a sample.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Sum-of-squared-window values below this are treated as uncovered samples.
const NORMALIZER_EPS: f64 = 1e-11;

/// A finite, sampled, single-channel signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean of squared samples.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            hop: 160,
            fft_size: 512,
            centered: true,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        let cfg = Self {
            window_len,
            hop,
            fft_size,
            centered: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.fft_size == 0 {
            return Err(Error::InvalidConfig(
                "window_len, hop and fft_size must be positive".into(),
            ));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::InvalidConfig("fft_size must be even".into()));
        }
        if self.window_len > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "window_len {} exceeds fft_size {}",
                self.window_len, self.fft_size
            )));
        }
        if self.hop > self.window_len {
            return Err(Error::InvalidConfig(format!(
                "hop {} exceeds window_len {}: overlap-add cannot cover every sample",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, source_len: usize) -> usize {
        if self.centered {
            source_len / self.hop + 1
        } else if source_len < self.window_len {
            0
        } else {
            (source_len - self.window_len) / self.hop + 1
        }
    }

    fn pad(&self) -> usize {
        if self.centered {
            self.window_len / 2
        } else {
            0
        }
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// T x F complex grid stored as separate real and imaginary planes (row-major, time-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub config: StftConfig,
    pub source_len: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, source_len: usize, sample_rate: u32) -> Self {
        let n_frames = config.n_frames(source_len);
        let n_bins = config.n_bins();
        Self {
            real: vec![0.0; n_frames * n_bins],
            imag: vec![0.0; n_frames * n_bins],
            n_frames,
            n_bins,
            config,
            source_len,
            sample_rate,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_bins)
    }

    pub fn get(&self, t: usize, f: usize) -> Complex<f64> {
        let i = t * self.n_bins + f;
        Complex::new(self.real[i], self.imag[i])
    }

    pub fn set(&mut self, t: usize, f: usize, value: Complex<f64>) {
        let i = t * self.n_bins + f;
        self.real[i] = value.re;
        self.imag[i] = value.im;
    }

    pub fn power(&self, t: usize, f: usize) -> f64 {
        self.get(t, f).norm_sqr()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "spectrogram shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum; both operands must share shape and configuration.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.real.iter_mut().zip(&other.real) {
            *a += b;
        }
        for (a, b) in out.imag.iter_mut().zip(&other.imag) {
            *a += b;
        }
        Ok(out)
    }

    /// Multiplies every bin by a complex constant.
    pub fn rotated(&self, factor: Complex<f64>) -> Self {
        let mut out = self.clone();
        for i in 0..out.real.len() {
            let z = Complex::new(self.real[i], self.imag[i]) * factor;
            out.real[i] = z.re;
            out.imag[i] = z.im;
        }
        out
    }
}

/// Real T x F grid (row-major, time-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Cached FFT plans and window for one [`StftConfig`].
pub struct StftPlan {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

impl StftPlan {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann_window(cfg.window_len),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Analysis into (real, imag) planes of shape `n_frames(len) x n_bins`.
    pub fn analyze(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        let cfg = &self.cfg;
        let n_frames = cfg.n_frames(x.len());
        if n_frames == 0 {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one window",
                x.len()
            )));
        }
        let bins = cfg.n_bins();
        let pad = cfg.pad() as isize;
        let mut re = vec![0.0; n_frames * bins];
        let mut im = vec![0.0; n_frames * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        for t in 0..n_frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let start = (t * cfg.hop) as isize - pad;
            for (m, w) in self.window.iter().enumerate() {
                let idx = start + m as isize;
                let v = if cfg.centered {
                    x[reflect_index(idx, x.len())]
                } else {
                    x[idx as usize]
                };
                buf[m].re = v * w;
            }
            self.forward.process(&mut buf);
            let row = t * bins;
            for k in 0..bins {
                re[row + k] = buf[k].re;
                im[row + k] = buf[k].im;
            }
        }
        Ok((re, im))
    }

    /// Summed squared window over the padded timeline.
    fn normalizer(&self, n_frames: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let len = (n_frames - 1) * cfg.hop + cfg.window_len;
        let mut norm = vec![0.0; len];
        for t in 0..n_frames {
            for (m, w) in self.window.iter().enumerate() {
                norm[t * cfg.hop + m] += w * w;
            }
        }
        norm
    }

    /// Windowed overlap-add synthesis of `out_len` samples from `n_frames` frames.
    pub fn synthesize(&self, re: &[f64], im: &[f64], n_frames: usize, out_len: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let bins = cfg.n_bins();
        let n = cfg.fft_size;
        let pad = cfg.pad();
        let norm = self.normalizer(n_frames);
        let mut acc = vec![0.0; norm.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for t in 0..n_frames {
            let row = t * bins;
            buf[0] = Complex::new(re[row], 0.0);
            buf[n / 2] = Complex::new(re[row + n / 2], 0.0);
            for k in 1..n / 2 {
                let z = Complex::new(re[row + k], im[row + k]);
                buf[k] = z;
                buf[n - k] = z.conj();
            }
            self.inverse.process(&mut buf);
            let off = t * cfg.hop;
            for (m, w) in self.window.iter().enumerate() {
                acc[off + m] += buf[m].re * scale * w;
            }
        }
        (0..out_len)
            .map(|i| {
                let j = i + pad;
                if j < acc.len() && norm[j] > NORMALIZER_EPS {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Adjoint of [`StftPlan::synthesize`]: maps a gradient on the output
    /// waveform to gradients on the (real, imag) planes.
    pub fn synthesize_adjoint(&self, grad: &[f64], n_frames: usize) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let bins = cfg.n_bins();
        let n = cfg.fft_size;
        let pad = cfg.pad();
        let norm = self.normalizer(n_frames);
        let mut gbuf = vec![0.0; norm.len()];
        for (i, g) in grad.iter().enumerate() {
            let j = i + pad;
            if j < gbuf.len() && norm[j] > NORMALIZER_EPS {
                gbuf[j] = g / norm[j];
            }
        }
        let mut dre = vec![0.0; n_frames * bins];
        let mut dim = vec![0.0; n_frames * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for t in 0..n_frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let off = t * cfg.hop;
            for (m, w) in self.window.iter().enumerate() {
                buf[m].re = gbuf[off + m] * w;
            }
            self.forward.process(&mut buf);
            let row = t * bins;
            for k in 0..bins {
                let edge = k == 0 || k == n / 2;
                let c = if edge { inv_n } else { 2.0 * inv_n };
                dre[row + k] = c * buf[k].re;
                dim[row + k] = if edge { 0.0 } else { c * buf[k].im };
            }
        }
        (dre, dim)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::new(*cfg)?;
    stft_with(&plan, w)
}

pub fn stft_with(plan: &StftPlan, w: &Waveform) -> Result<ComplexSpectrogram> {
    let (real, imag) = plan.analyze(w.samples())?;
    let cfg = *plan.config();
    Ok(ComplexSpectrogram {
        real,
        imag,
        n_frames: cfg.n_frames(w.len()),
        n_bins: cfg.n_bins(),
        config: cfg,
        source_len: w.len(),
        sample_rate: w.sample_rate(),
    })
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let plan = StftPlan::new(s.config)?;
    istft_with(&plan, s)
}

pub fn istft_with(plan: &StftPlan, s: &ComplexSpectrogram) -> Result<Waveform> {
    if plan.config() != &s.config {
        return Err(Error::InvalidConfig(
            "plan configuration differs from spectrogram configuration".into(),
        ));
    }
    if s.n_frames == 0 {
        return Err(Error::InvalidInput("spectrogram has no frames".into()));
    }
    let samples = plan.synthesize(&s.real, &s.imag, s.n_frames, s.source_len);
    Waveform::new(samples, s.sample_rate)
}

pub const DEFAULT_PSD_FLOOR: f64 = 1e-10;

/// Per-bin left/right power ratio with an additive power floor.
pub fn psd_ratio(sl: &ComplexSpectrogram, sr: &ComplexSpectrogram, floor: f64) -> Result<Grid> {
    sl.check_same_shape(sr)?;
    if !(floor > 0.0) {
        return Err(Error::InvalidInput("power floor must be positive".into()));
    }
    let data = sl
        .real
        .iter()
        .zip(&sl.imag)
        .zip(sr.real.iter().zip(&sr.imag))
        .map(|((lr, li), (rr, ri))| (lr * lr + li * li + floor) / (rr * rr + ri * ri + floor))
        .collect();
    Ok(Grid {
        rows: sl.n_frames,
        cols: sl.n_bins,
        data,
    })
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Inter-channel phase difference arg(L * conj(R)) in (-pi, pi].
pub fn ipd(sl: &ComplexSpectrogram, sr: &ComplexSpectrogram) -> Result<Grid> {
    sl.check_same_shape(sr)?;
    let data = (0..sl.real.len())
        .map(|i| {
            let l = Complex::new(sl.real[i], sl.imag[i]);
            let r = Complex::new(sr.real[i], sr.imag[i]);
            let a = (l * r.conj()).arg();
            // atan2 yields [-pi, pi]; fold -pi onto +pi.
            if a <= -PI {
                PI
            } else {
                a
            }
        })
        .collect();
    Ok(Grid {
        rows: sl.n_frames,
        cols: sl.n_bins,
        data,
    })
}

/// Mean |IPD| over bins where both channels exceed `threshold_db` below the
/// strongest bin of the left channel.
pub fn mean_abs_ipd_active(
    sl: &ComplexSpectrogram,
    sr: &ComplexSpectrogram,
    threshold_db: f64,
) -> Result<f64> {
    let phase = ipd(sl, sr)?;
    let peak = (0..sl.real.len())
        .map(|i| sl.real[i].powi(2) + sl.imag[i].powi(2))
        .fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::Degenerate("left channel is silent".into()));
    }
    let gate = peak * 10f64.powf(-threshold_db / 10.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..sl.real.len() {
        let pl = sl.real[i].powi(2) + sl.imag[i].powi(2);
        let pr = sr.real[i].powi(2) + sr.imag[i].powi(2);
        if pl > gate && pr > gate {
            sum += phase.data[i].abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no active bins".into()));
    }
    Ok(sum / count as f64)
}
