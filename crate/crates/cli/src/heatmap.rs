// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use image::{Rgb, RgbImage};
use vbse_core::dsp::Grid;
use vbse_core::{Error, Result};

use crate::analyze::output_path;

const RATIO_DB_LIMIT: f64 = 20.0;

/// Blue through white to red for t in [-1, 1].
fn diverging(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(-t), fade(-t), 255])
    }
}

/// Time on x, frequency on y with low bins at the bottom.
fn render(grid: &Grid, value: impl Fn(f64) -> f64) -> RgbImage {
    RgbImage::from_fn(grid.rows as u32, grid.cols as u32, |x, y| {
        let f = grid.cols - 1 - y as usize;
        diverging(value(grid.get(x as usize, f)))
    })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn write_pair(prefix: &Path, ratio: &Grid, phase: &Grid) -> Result<()> {
    let psd = render(ratio, |r| 10.0 * r.log10() / RATIO_DB_LIMIT);
    save(&psd, &output_path(prefix, "psd_ratio.png"))?;
    let ipd = render(phase, |p| p / std::f64::consts::PI);
    save(&ipd, &output_path(prefix, "ipd.png"))
}
