// SPDX-License-Identifier: Apache-2.0

//! WAV reading and writing (16-bit PCM and 32-bit float, mono and stereo).

use std::path::Path;

use hound::{SampleFormat, WavSpec};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::resample::resample;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

/// Decoded multichannel audio at its native rate.
#[derive(Debug, Clone)]
pub struct WavData {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::wav(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::InvalidInput(format!("{path:?} has no channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::wav(path, e))?,
        (SampleFormat::Int, bits) if (8..=32).contains(&bits) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::wav(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!(
                "{path:?}: unsupported sample format {fmt:?}/{bits} bits"
            )))
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, v) in frame.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    Ok(WavData {
        channels,
        sample_rate: spec.sample_rate,
    })
}

/// Reads a file as mono (channels averaged) and resamples to `target_rate`.
pub fn read_mono(path: &Path, target_rate: u32) -> Result<Waveform> {
    let data = read_wav(path)?;
    let n_ch = data.channels.len() as f64;
    let frames = data.channels[0].len();
    let mono: Vec<f64> = (0..frames)
        .map(|i| data.channels.iter().map(|c| c[i]).sum::<f64>() / n_ch)
        .collect();
    Waveform::new(resample(&mono, data.sample_rate, target_rate), target_rate)
}

/// Reads a two-channel file and resamples both channels to `target_rate`.
pub fn read_stereo(path: &Path, target_rate: u32) -> Result<(Waveform, Waveform)> {
    let data = read_wav(path)?;
    if data.channels.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "{path:?}: expected 2 channels, found {}",
            data.channels.len()
        )));
    }
    let left = resample(&data.channels[0], data.sample_rate, target_rate);
    let right = resample(&data.channels[1], data.sample_rate, target_rate);
    Ok((
        Waveform::new(left, target_rate)?,
        Waveform::new(right, target_rate)?,
    ))
}

/// Number of frames in a WAV file, read from the header only.
pub fn wav_len(path: &Path) -> Result<(usize, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::wav(path, e))?;
    Ok((reader.duration() as usize, reader.spec().sample_rate))
}

pub fn write_wav(
    path: &Path,
    channels: &[&[f64]],
    sample_rate: u32,
    format: WavFormat,
) -> Result<()> {
    let n_ch = channels.len();
    if n_ch == 0 || channels.iter().any(|c| c.len() != channels[0].len()) {
        return Err(Error::InvalidInput(
            "channels must be non-empty and equal length".into(),
        ));
    }
    let spec = match format {
        WavFormat::Float32 => WavSpec {
            channels: n_ch as u16,
            sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
        WavFormat::Pcm16 => WavSpec {
            channels: n_ch as u16,
            sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::wav(path, e))?;
    for i in 0..channels[0].len() {
        for ch in channels {
            let v = ch[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v as f32),
                WavFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)
                }
            }
            .map_err(|e| Error::wav(path, e))?;
        }
    }
    writer.finalize().map_err(|e| Error::wav(path, e))
}

pub fn write_mono(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    write_wav(path, &[w.samples()], w.sample_rate(), format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1000)
            .map(|i| ((i as f32) * 0.001).sin() as f64)
            .collect();
        write_wav(&path, &[&x], 16_000, WavFormat::Float32).unwrap();
        let back = read_mono(&path, 16_000).unwrap();
        assert_eq!(back.samples(), &x[..]);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        let l: Vec<f64> = (0..500).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        let r: Vec<f64> = l.iter().map(|v| -v).collect();
        write_wav(&path, &[&l, &r], 16_000, WavFormat::Pcm16).unwrap();
        let (bl, br) = read_stereo(&path, 16_000).unwrap();
        for i in 0..500 {
            assert!((bl.samples()[i] - l[i]).abs() <= 0.5 / 32768.0 + 1e-12);
            assert!((br.samples()[i] - r[i]).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        let mono = read_mono(&path, 16_000).unwrap();
        assert!(mono.samples().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn resamples_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let x = vec![0.0; 8000];
        write_wav(&path, &[&x], 8_000, WavFormat::Float32).unwrap();
        let w = read_mono(&path, 16_000).unwrap();
        assert_eq!(w.len(), 16_000);
        assert_eq!(w.sample_rate(), 16_000);
        assert_eq!(wav_len(&path).unwrap(), (8000, 8000));
    }

    #[test]
    fn missing_file_is_wav_error() {
        let err = read_mono(Path::new("/nonexistent/x.wav"), 16_000).unwrap_err();
        assert!(err.is_input_error());
    }
}
