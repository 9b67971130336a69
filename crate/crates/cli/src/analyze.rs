// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use vbse_core::dsp::{
    ipd, mean_abs_ipd_active, psd_ratio, stft, Grid, StftConfig, Waveform, DEFAULT_PSD_FLOOR,
};
use vbse_core::wav::read_wav;
use vbse_core::{Error, Result};

use crate::AnalyzeArgs;

fn read_channel(path: &Path) -> Result<Waveform> {
    let data = read_wav(path)?;
    if data.channels.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "{} has {} channels, expected mono",
            path.display(),
            data.channels.len()
        )));
    }
    let rate = data.sample_rate;
    Waveform::new(data.channels.into_iter().next().unwrap_or_default(), rate)
}

/// `prefix` + `name`, or `prefix/name` when the prefix is a directory.
pub fn output_path(prefix: &Path, name: &str) -> PathBuf {
    let s = prefix.as_os_str().to_string_lossy();
    if prefix.is_dir() || s.ends_with('/') || s.ends_with(std::path::MAIN_SEPARATOR) {
        prefix.join(name)
    } else {
        PathBuf::from(format!("{s}{name}"))
    }
}

fn write_grid(path: &Path, grid: &Grid, bin_hz: f64) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record((0..grid.cols).map(|f| format!("{}", f as f64 * bin_hz)))
        .map_err(io)?;
    for row in grid.data.chunks(grid.cols) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn run(a: &AnalyzeArgs) -> Result<()> {
    let left = read_channel(&a.left)?;
    let right = read_channel(&a.right)?;
    if left.len() != right.len() {
        return Err(Error::InvalidInput(format!(
            "left has {} samples, right has {}",
            left.len(),
            right.len()
        )));
    }
    if left.sample_rate() != right.sample_rate() {
        return Err(Error::InvalidInput(
            "left and right sample rates differ".into(),
        ));
    }
    let cfg = StftConfig::default();
    let sl = stft(&left, &cfg)?;
    let sr = stft(&right, &cfg)?;
    let ratio = psd_ratio(&sl, &sr, DEFAULT_PSD_FLOOR)?;
    let phase = ipd(&sl, &sr)?;
    let bin_hz = left.sample_rate() as f64 / cfg.fft_size as f64;
    if let Some(parent) = output_path(&a.out_prefix, "x")
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
    {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let psd_path = output_path(&a.out_prefix, "psd_ratio.csv");
    let ipd_path = output_path(&a.out_prefix, "ipd.csv");
    write_grid(&psd_path, &ratio, bin_hz)?;
    write_grid(&ipd_path, &phase, bin_hz)?;
    if a.heatmap {
        write_heatmaps(a, &ratio, &phase)?;
    }
    let active = mean_abs_ipd_active(&sl, &sr, a.active_db)?;
    let mean_ratio_db =
        ratio.data.iter().map(|r| 10.0 * r.log10()).sum::<f64>() / ratio.data.len() as f64;
    println!("frames: {}", ratio.rows);
    println!("bins: {}", ratio.cols);
    println!("mean |IPD| over active bins (rad): {active:.6}");
    println!("mean PSD ratio (dB): {mean_ratio_db:.6}");
    eprintln!("wrote {} and {}", psd_path.display(), ipd_path.display());
    Ok(())
}

#[cfg(feature = "heatmap")]
fn write_heatmaps(a: &AnalyzeArgs, ratio: &Grid, phase: &Grid) -> Result<()> {
    crate::heatmap::write_pair(&a.out_prefix, ratio, phase)
}

#[cfg(not(feature = "heatmap"))]
fn write_heatmaps(_: &AnalyzeArgs, _: &Grid, _: &Grid) -> Result<()> {
    Err(Error::InvalidInput(
        "this build has no heatmap support".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_joins_directories_and_appends_otherwise() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(output_path(d.path(), "ipd.csv"), d.path().join("ipd.csv"));
        assert_eq!(
            output_path(Path::new("out/anti_"), "ipd.csv"),
            PathBuf::from("out/anti_ipd.csv")
        );
    }
}
