// SPDX-License-Identifier: Apache-2.0

//! Level scaling, monaural mixing and binaural rendering of training targets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::resample::resample;
use crate::wav::read_wav;

/// Responses longer than this are convolved through FFT overlap-save.
const DIRECT_CONV_MAX_TAPS: usize = 128;

/// Scales `x` so that its RMS becomes `10^(epsilon_db / 20)`.
pub fn scale_speech(x: &Waveform, epsilon_db: f64) -> Result<Waveform> {
    let sigma = x.rms();
    if sigma == 0.0 {
        return Err(Error::Degenerate("speech has zero energy".into()));
    }
    let nu = 10f64.powf(epsilon_db / 20.0) / sigma;
    Ok(x.scaled(nu))
}

/// Noise gain that places `v` at `snr_db` below `x_hat` in variance.
pub fn noise_gain(v: &Waveform, x_hat: &Waveform, snr_db: f64) -> Result<f64> {
    let pv = v.power();
    let px = x_hat.power();
    if pv == 0.0 {
        return Err(Error::Degenerate("noise has zero energy".into()));
    }
    if px == 0.0 {
        return Err(Error::Degenerate("scaled speech has zero energy".into()));
    }
    Ok((10f64.powf(-snr_db / 10.0) * px / pv).sqrt())
}

pub fn scale_noise(v: &Waveform, x_hat: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(v.scaled(noise_gain(v, x_hat, snr_db)?))
}

/// Largest valid slice offset for [`trim_or_loop_at`].
pub fn max_offset(len: usize, target_len: usize) -> usize {
    len.saturating_sub(target_len)
}

/// Cuts `target_len` samples starting at `offset`, or tiles a short signal.
pub fn trim_or_loop_at(v: &Waveform, target_len: usize, offset: usize) -> Result<Waveform> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot trim an empty waveform".into()));
    }
    let s = v.samples();
    let out: Vec<f64> = if s.len() >= target_len {
        if offset > s.len() - target_len {
            return Err(Error::InvalidInput(format!(
                "offset {offset} exceeds maximum {}",
                s.len() - target_len
            )));
        }
        s[offset..offset + target_len].to_vec()
    } else {
        s.iter().cycle().take(target_len).copied().collect()
    };
    Waveform::new(out, v.sample_rate())
}

/// [`trim_or_loop_at`] with a random slice offset drawn from `rng`.
pub fn trim_or_loop<R: Rng + ?Sized>(
    v: &Waveform,
    target_len: usize,
    rng: &mut R,
) -> Result<Waveform> {
    let offset = rng.random_range(0..=max_offset(v.len(), target_len));
    trim_or_loop_at(v, target_len, offset)
}

pub fn make_monaural_mixture(x_hat: &Waveform, v_hat: &Waveform) -> Result<Waveform> {
    if x_hat.len() != v_hat.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: speech {} vs noise {}",
            x_hat.len(),
            v_hat.len()
        )));
    }
    let y = x_hat
        .samples()
        .iter()
        .zip(v_hat.samples())
        .map(|(a, b)| a + b)
        .collect();
    Waveform::new(y, x_hat.sample_rate())
}

/// Left/right impulse-response pair for one rendering direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Brir {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate: u32,
    pub label: String,
}

impl Brir {
    pub fn new(
        left: Vec<f64>,
        right: Vec<f64>,
        sample_rate: u32,
        label: impl Into<String>,
    ) -> Result<Self> {
        if left.is_empty() || right.is_empty() {
            return Err(Error::InvalidInput(
                "impulse responses must be non-empty".into(),
            ));
        }
        if left.iter().chain(&right).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "impulse responses must be finite".into(),
            ));
        }
        Ok(Self {
            left,
            right,
            sample_rate,
            label: label.into(),
        })
    }

    /// Unit impulse on both ears.
    pub fn identity(sample_rate: u32) -> Self {
        Self {
            left: vec![1.0],
            right: vec![1.0],
            sample_rate,
            label: "identity".into(),
        }
    }

    pub fn is_diotic(&self) -> bool {
        self.left == self.right
    }
}

/// Causal convolution truncated to the length of `x`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if h.len() > DIRECT_CONV_MAX_TAPS {
        convolve_overlap_save(x, h)
    } else {
        convolve_direct(x, h)
    }
}

pub(crate) fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let kmax = h.len().min(n + 1);
        let mut acc = 0.0;
        for k in 0..kmax {
            acc += h[k] * x[n - k];
        }
        *out = acc;
    }
    y
}

fn convolve_overlap_save(x: &[f64], h: &[f64]) -> Vec<f64> {
    let k = h.len();
    let n_fft = (2 * k).next_power_of_two();
    let step = n_fft - k + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let mut hf: Vec<Complex<f64>> = h.iter().map(|v| Complex::new(*v, 0.0)).collect();
    hf.resize(n_fft, Complex::new(0.0, 0.0));
    fwd.process(&mut hf);
    let mut y = vec![0.0; x.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    let mut start = 0usize;
    while start < x.len() {
        // Block covers input [start - (k - 1), start + step).
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start as isize + i as isize - (k as isize - 1);
            let v = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, hv) in buf.iter_mut().zip(&hf) {
            *b *= hv;
        }
        inv.process(&mut buf);
        for i in 0..step {
            let n = start + i;
            if n >= x.len() {
                break;
            }
            y[n] = buf[k - 1 + i].re * scale;
        }
        start += step;
    }
    y
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Antiphasic,
    #[serde(rename = "heterophasic_1")]
    Heterophasic1,
    #[serde(rename = "heterophasic_2")]
    Heterophasic2,
    Homophasic,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Antiphasic,
        ScenarioKind::Heterophasic1,
        ScenarioKind::Heterophasic2,
        ScenarioKind::Homophasic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Antiphasic => "antiphasic",
            ScenarioKind::Heterophasic1 => "heterophasic_1",
            ScenarioKind::Heterophasic2 => "heterophasic_2",
            ScenarioKind::Homophasic => "homophasic",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub speech_brir: Brir,
    pub noise_brir: Brir,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, speech_brir: Brir, noise_brir: Brir) -> Result<Self> {
        if speech_brir.sample_rate != noise_brir.sample_rate {
            return Err(Error::InvalidInput(
                "speech and noise BRIR rates differ".into(),
            ));
        }
        if kind == ScenarioKind::Homophasic && !(speech_brir.is_diotic() && noise_brir.is_diotic())
        {
            return Err(Error::InvalidInput(
                "homophasic scenario requires identical left/right responses".into(),
            ));
        }
        Ok(Self {
            kind,
            speech_brir,
            noise_brir,
        })
    }
}

/// Renders `(y_L, y_R)` = speech and noise each convolved with their ear responses.
pub fn render_binaural(
    x_hat: &Waveform,
    v_hat: &Waveform,
    scenario: &ScenarioSpec,
) -> Result<(Waveform, Waveform)> {
    if x_hat.len() != v_hat.len() {
        return Err(Error::InvalidInput(
            "speech and noise lengths differ".into(),
        ));
    }
    let rate = x_hat.sample_rate();
    if v_hat.sample_rate() != rate
        || scenario.speech_brir.sample_rate != rate
        || scenario.noise_brir.sample_rate != rate
    {
        return Err(Error::InvalidInput(format!(
            "sample-rate mismatch: signals at {rate} Hz, BRIRs at {}/{} Hz",
            scenario.speech_brir.sample_rate, scenario.noise_brir.sample_rate
        )));
    }
    let ear = |hx: &[f64], hv: &[f64]| -> Result<Waveform> {
        let a = convolve_truncated(x_hat.samples(), hx);
        let b = convolve_truncated(v_hat.samples(), hv);
        Waveform::new(a.iter().zip(&b).map(|(p, q)| p + q).collect(), rate)
    };
    Ok((
        ear(&scenario.speech_brir.left, &scenario.noise_brir.left)?,
        ear(&scenario.speech_brir.right, &scenario.noise_brir.right)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBrirParams {
    /// Degrees; positive places the source on the right.
    pub azimuth: f64,
    pub head_radius: f64,
    pub sound_speed: f64,
    pub ild_db_at_90: f64,
    pub phase_invert_right: bool,
    pub sample_rate: u32,
}

impl Default for SyntheticBrirParams {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            head_radius: 0.0875,
            sound_speed: 343.0,
            ild_db_at_90: 6.0,
            phase_invert_right: false,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SyntheticBrirParams {
    pub fn at(azimuth: f64) -> Self {
        Self {
            azimuth,
            ..Self::default()
        }
    }

    /// Woodworth interaural time difference in seconds.
    pub fn itd_seconds(&self) -> f64 {
        let theta = self.azimuth.abs().to_radians();
        self.head_radius / self.sound_speed * (theta + theta.sin())
    }
}

const FRAC_DELAY_HALF_WIDTH: f64 = 16.0;
const SYNTH_BRIR_TAPS: usize = 64;

fn fractional_delay(delay: f64, gain: f64, taps: usize) -> Vec<f64> {
    let mut h = vec![0.0; taps];
    if delay.fract() == 0.0 {
        h[delay as usize] = gain;
        return h;
    }
    for (n, v) in h.iter_mut().enumerate() {
        let u = n as f64 - delay;
        if u.abs() < FRAC_DELAY_HALF_WIDTH {
            let window = 0.5 * (1.0 + (PI * u / FRAC_DELAY_HALF_WIDTH).cos());
            *v = gain * window * (PI * u).sin() / (PI * u);
        }
    }
    h
}

/// Spherical-head stand-in for a measured BRIR: Woodworth ITD as a
/// windowed-sinc fractional delay on the far ear plus an ILD tilt.
pub fn synth_brir(p: &SyntheticBrirParams) -> Result<Brir> {
    if !(-90.0..=90.0).contains(&p.azimuth) {
        return Err(Error::InvalidInput(format!(
            "azimuth {} outside [-90, 90] degrees",
            p.azimuth
        )));
    }
    if !(p.head_radius > 0.0 && p.sound_speed > 0.0) || p.sample_rate == 0 {
        return Err(Error::InvalidInput(
            "head radius, sound speed and rate must be positive".into(),
        ));
    }
    let delay = p.itd_seconds() * p.sample_rate as f64;
    let ild = p.ild_db_at_90 * p.azimuth.to_radians().sin();
    let gain_left = 10f64.powf(-ild / 40.0);
    let gain_right = 10f64.powf(ild / 40.0);
    let (delay_left, delay_right) = if p.azimuth >= 0.0 {
        (delay, 0.0)
    } else {
        (0.0, delay)
    };
    let left = fractional_delay(delay_left, gain_left, SYNTH_BRIR_TAPS);
    let mut right = fractional_delay(delay_right, gain_right, SYNTH_BRIR_TAPS);
    if p.phase_invert_right {
        right.iter_mut().for_each(|v| *v = -*v);
    }
    Brir::new(
        left,
        right,
        p.sample_rate,
        format!("synthetic az={:+}", p.azimuth),
    )
}

pub type ScenarioSet = BTreeMap<ScenarioKind, ScenarioSpec>;

/// The four presentation scenarios with synthetic responses.
pub fn default_scenarios() -> ScenarioSet {
    let speech = || synth_brir(&SyntheticBrirParams::at(0.0)).expect("valid default");
    let inverted = synth_brir(&SyntheticBrirParams {
        phase_invert_right: true,
        ..SyntheticBrirParams::at(0.0)
    })
    .expect("valid default");
    let right = synth_brir(&SyntheticBrirParams::at(90.0)).expect("valid default");
    let left = synth_brir(&SyntheticBrirParams::at(-90.0)).expect("valid default");
    [
        (ScenarioKind::Antiphasic, speech(), inverted),
        (ScenarioKind::Heterophasic1, speech(), right),
        (ScenarioKind::Heterophasic2, speech(), left),
        (ScenarioKind::Homophasic, speech(), speech()),
    ]
    .into_iter()
    .map(|(kind, s, n)| (kind, ScenarioSpec::new(kind, s, n).expect("valid default")))
    .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBrirSidecar {
    sample_rate: u32,
    #[serde(default)]
    label: String,
}

/// Loads a BRIR from a stereo WAV, or from interleaved little-endian f32
/// pairs with a `.json` sidecar carrying `{sample_rate, label}`.
pub fn load_brir(path: &Path, target_rate: u32) -> Result<Brir> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let (left, right, rate, label) = if is_wav {
        let data = read_wav(path)?;
        if data.channels.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "{path:?}: BRIR WAV must be stereo"
            )));
        }
        let mut ch = data.channels.into_iter();
        let l = ch.next().unwrap_or_default();
        let r = ch.next().unwrap_or_default();
        (l, r, data.sample_rate, path.display().to_string())
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "{path:?}: raw BRIR must hold whole (left, right) f32 pairs"
            )));
        }
        let sidecar = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: RawBrirSidecar = serde_json::from_str(&text)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let l = values.iter().step_by(2).copied().collect();
        let r = values.iter().skip(1).step_by(2).copied().collect();
        (l, r, meta.sample_rate, meta.label)
    };
    let left = resample(&left, rate, target_rate);
    let right = resample(&right, rate, target_rate);
    Brir::new(left, right, target_rate, label)
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes a BRIR in the raw two-column format understood by [`load_brir`].
pub fn save_brir_raw(path: &Path, brir: &Brir) -> Result<()> {
    let n = brir.left.len().max(brir.right.len());
    let mut bytes = Vec::with_capacity(n * 8);
    for i in 0..n {
        let l = brir.left.get(i).copied().unwrap_or(0.0) as f32;
        let r = brir.right.get(i).copied().unwrap_or(0.0) as f32;
        bytes.extend_from_slice(&l.to_le_bytes());
        bytes.extend_from_slice(&r.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let meta = serde_json::json!({ "sample_rate": brir.sample_rate, "label": brir.label });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{ipd, mean_abs_ipd_active, psd_ratio, stft, StftConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            16_000,
        )
        .unwrap()
    }

    fn constant_rms(rms: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| if i % 2 == 0 { rms } else { -rms })
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn scale_speech_examples() {
        let x = constant_rms(0.05, 100);
        let out = scale_speech(&x, -20.0).unwrap();
        assert!((out.samples()[0] / x.samples()[0] - 2.0).abs() < 1e-12);
        assert!((out.rms() - 0.1).abs() < 1e-12);
        let unit = constant_rms(1.0, 10);
        assert_eq!(scale_speech(&unit, 0.0).unwrap(), unit);
        let r = scale_speech(&random_wave(5000, 1), -35.0).unwrap();
        assert!((r.rms() - 10f64.powf(-35.0 / 20.0)).abs() < 1e-9);
        assert!(matches!(
            scale_speech(&Waveform::zeros(10, 16_000), -20.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn scale_noise_examples() {
        let x = constant_rms(0.1, 100);
        let v = constant_rms(0.2, 100);
        assert!((noise_gain(&v, &x, 0.0).unwrap() - 0.5).abs() < 1e-12);
        let one = constant_rms(1.0, 100);
        assert!((noise_gain(&one, &one, 10.0).unwrap() - 10f64.powf(-0.5)).abs() < 1e-12);
        let xr = random_wave(3000, 2);
        let vr = random_wave(3000, 3);
        let scaled = scale_noise(&vr, &xr, -7.0).unwrap();
        let snr = 10.0 * (xr.power() / scaled.power()).log10();
        assert!((snr + 7.0).abs() < 1e-9);
        assert!(scale_noise(&Waveform::zeros(5, 16_000), &xr, 0.0).is_err());
        assert!(scale_noise(&vr, &Waveform::zeros(5, 16_000), 0.0).is_err());
    }

    #[test]
    fn trim_and_loop_contracts() {
        let v = random_wave(50_000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cut = trim_or_loop(&v, 40_000, &mut rng).unwrap();
        assert_eq!(cut.len(), 40_000);
        let first = cut.samples()[0];
        let off = v.samples().iter().position(|s| *s == first).unwrap();
        assert_eq!(cut.samples(), &v.samples()[off..off + 40_000]);

        let same = random_wave(40_000, 5);
        assert_eq!(trim_or_loop_at(&same, 40_000, 0).unwrap(), same);

        let short = random_wave(10_000, 6);
        let tiled = trim_or_loop(&short, 40_000, &mut rng).unwrap();
        for i in 0..40_000 {
            assert_eq!(tiled.samples()[i], short.samples()[i % 10_000]);
        }
        assert!(trim_or_loop_at(&Waveform::zeros(0, 16_000), 10, 0).is_err());
        assert!(trim_or_loop_at(&v, 40_000, 10_001).is_err());
    }

    #[test]
    fn mixture_examples() {
        let x = random_wave(100, 7);
        let v = random_wave(100, 8);
        assert_eq!(
            make_monaural_mixture(&x, &Waveform::zeros(100, 16_000)).unwrap(),
            x
        );
        let y = make_monaural_mixture(&x, &x.scaled(-1.0)).unwrap();
        assert!(y.samples().iter().all(|s| *s == 0.0));
        let y = make_monaural_mixture(&x, &v).unwrap();
        for i in 0..100 {
            assert_eq!(y.samples()[i], x.samples()[i] + v.samples()[i]);
        }
        assert!(make_monaural_mixture(&x, &random_wave(99, 1)).is_err());
    }

    fn scenario_from(hxl: Vec<f64>, hxr: Vec<f64>, hvl: Vec<f64>, hvr: Vec<f64>) -> ScenarioSpec {
        ScenarioSpec {
            kind: ScenarioKind::Heterophasic1,
            speech_brir: Brir::new(hxl, hxr, 16_000, "s").unwrap(),
            noise_brir: Brir::new(hvl, hvr, 16_000, "n").unwrap(),
        }
    }

    #[test]
    fn render_identity_and_shift() {
        let x = random_wave(500, 9);
        let v = random_wave(500, 10);
        let d = vec![1.0];
        let sc = scenario_from(d.clone(), d.clone(), d.clone(), d.clone());
        let (l, r) = render_binaural(&x, &v, &sc).unwrap();
        let y = make_monaural_mixture(&x, &v).unwrap();
        assert_eq!(l, y);
        assert_eq!(r, y);

        let mut shifted = vec![0.0; 6];
        shifted[5] = 1.0;
        let sc = scenario_from(shifted, d.clone(), d.clone(), d);
        let (l, r) = render_binaural(&x, &Waveform::zeros(500, 16_000), &sc).unwrap();
        assert!(l.samples()[..5].iter().all(|s| *s == 0.0));
        assert_eq!(&l.samples()[5..], &x.samples()[..495]);
        assert_eq!(r, x);
    }

    #[test]
    fn render_rejects_rate_mismatch() {
        let x = random_wave(100, 1);
        let mut sc = default_scenarios()[&ScenarioKind::Antiphasic].clone();
        sc.noise_brir.sample_rate = 8_000;
        assert!(matches!(
            render_binaural(&x, &x, &sc),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn overlap_save_matches_direct() {
        let x = random_wave(3000, 11);
        let h = random_wave(300, 12);
        let a = convolve_overlap_save(x.samples(), h.samples());
        let b = convolve_direct(x.samples(), h.samples());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn render_is_linear_in_each_source() {
        let x1 = random_wave(800, 1);
        let x2 = random_wave(800, 2);
        let v = random_wave(800, 3);
        let sc = default_scenarios()[&ScenarioKind::Heterophasic1].clone();
        let zero = Waveform::zeros(800, 16_000);
        let (a, _) = render_binaural(&x1, &zero, &sc).unwrap();
        let (b, _) = render_binaural(&x2, &zero, &sc).unwrap();
        let (c, _) = render_binaural(&zero, &v, &sc).unwrap();
        let sum = make_monaural_mixture(&x1, &x2).unwrap();
        let (all, _) = render_binaural(&sum, &v, &sc).unwrap();
        for i in 0..800 {
            let expect = a.samples()[i] + b.samples()[i] + c.samples()[i];
            assert!((all.samples()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_brir_geometry() {
        let center = synth_brir(&SyntheticBrirParams::default()).unwrap();
        assert_eq!(center.left, center.right);
        assert_eq!(center.left[0], 1.0);

        let p = SyntheticBrirParams::at(90.0);
        let expected_itd = 0.0875 / 343.0 * (PI / 2.0 + 1.0);
        assert!((p.itd_seconds() - expected_itd).abs() < 1e-15);
        assert!((expected_itd * 16_000.0 - 10.5).abs() < 0.05);

        // Cross-correlation lag of left against right with parabolic refinement.
        let b = synth_brir(&p).unwrap();
        let lag_corr =
            |lag: usize| -> f64 { (0..64 - lag).map(|n| b.left[n + lag] * b.right[n]).sum() };
        let best = (0..40)
            .max_by(|&a, &c| lag_corr(a).total_cmp(&lag_corr(c)))
            .unwrap();
        let (ym, y0, yp) = (lag_corr(best - 1), lag_corr(best), lag_corr(best + 1));
        let refined = best as f64 + 0.5 * (ym - yp) / (ym - 2.0 * y0 + yp);
        assert!(
            (refined - expected_itd * 16_000.0).abs() < 0.25,
            "lag {refined}"
        );

        let inverted = synth_brir(&SyntheticBrirParams {
            phase_invert_right: true,
            ..SyntheticBrirParams::default()
        })
        .unwrap();
        assert!(inverted
            .left
            .iter()
            .zip(&inverted.right)
            .all(|(l, r)| *r == -*l));
        assert!(synth_brir(&SyntheticBrirParams::at(91.0)).is_err());
    }

    #[test]
    fn inverted_right_gives_pi_ipd() {
        let sc = default_scenarios()[&ScenarioKind::Antiphasic].clone();
        let v = random_wave(8000, 13);
        let (l, r) = render_binaural(&Waveform::zeros(8000, 16_000), &v, &sc).unwrap();
        let cfg = StftConfig::default();
        let phase = ipd(&stft(&l, &cfg).unwrap(), &stft(&r, &cfg).unwrap()).unwrap();
        assert!(phase.data.iter().all(|a| (a - PI).abs() < 1e-9));
        let m =
            mean_abs_ipd_active(&stft(&l, &cfg).unwrap(), &stft(&r, &cfg).unwrap(), 60.0).unwrap();
        assert!(m > 3.0);
    }

    #[test]
    fn homophasic_has_unit_psd_and_zero_ipd() {
        let sc = default_scenarios()[&ScenarioKind::Homophasic].clone();
        let (l, r) = render_binaural(&random_wave(4000, 1), &random_wave(4000, 2), &sc).unwrap();
        assert_eq!(l, r);
        let cfg = StftConfig::default();
        let (sl, sr) = (stft(&l, &cfg).unwrap(), stft(&r, &cfg).unwrap());
        assert!(psd_ratio(&sl, &sr, 1e-10)
            .unwrap()
            .data
            .iter()
            .all(|v| *v == 1.0));
        assert!(ipd(&sl, &sr).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heterophasic_conditions_mirror() {
        let s = default_scenarios();
        let x = random_wave(2000, 21);
        let v = random_wave(2000, 22);
        let (l1, r1) = render_binaural(&x, &v, &s[&ScenarioKind::Heterophasic1]).unwrap();
        let (l2, r2) = render_binaural(&x, &v, &s[&ScenarioKind::Heterophasic2]).unwrap();
        assert_eq!(l1, r2);
        assert_eq!(r1, l2);
        assert_ne!(l1, r1);
    }

    #[test]
    fn homophasic_spec_requires_diotic() {
        let a = synth_brir(&SyntheticBrirParams::at(30.0)).unwrap();
        let d = Brir::identity(16_000);
        assert!(ScenarioSpec::new(ScenarioKind::Homophasic, d.clone(), a).is_err());
        assert!(ScenarioSpec::new(ScenarioKind::Homophasic, d.clone(), d).is_ok());
    }

    #[test]
    fn raw_brir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("room.f32");
        let b = Brir::new(vec![0.5, 0.25, -0.125], vec![1.0, 0.0, 0.5], 16_000, "room").unwrap();
        save_brir_raw(&path, &b).unwrap();
        let back = load_brir(&path, 16_000).unwrap();
        assert_eq!(back, b);

        let wav_path = dir.path().join("room.wav");
        crate::wav::write_wav(
            &wav_path,
            &[&b.left, &b.right],
            16_000,
            crate::wav::WavFormat::Float32,
        )
        .unwrap();
        let w = load_brir(&wav_path, 16_000).unwrap();
        assert_eq!(w.left, b.left);
        assert_eq!(w.right, b.right);
    }

    #[test]
    fn scenario_names_parse() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.as_str().parse::<ScenarioKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("sideways".parse::<ScenarioKind>().is_err());
    }
}
