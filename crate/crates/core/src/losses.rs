// SPDX-License-Identifier: Apache-2.0

//! Signal-distortion index, SI-SNR and the weighted multi-task objective.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Relative energy floor for both losses.
pub const FLOOR_REL: f64 = 1e-10;
/// Upper bound on reported SI-SNR.
pub const SI_SNR_CAP_DB: f64 = 60.0;
pub const DEFAULT_GAMMA: f64 = 0.01;

const DB: f64 = 10.0 / LN_10;
const TINY: f64 = 1e-300;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty signal".into()));
    }
    Ok(())
}

fn check_reference(r: &[f64]) -> Result<()> {
    if r.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("reference has zero energy".into()));
    }
    Ok(())
}

/// SDI value and its gradient with respect to `hat`. The error energy is
/// clamped from below at `FLOOR_REL` times the reference energy.
pub(crate) fn sdi_value_grad(r: &[f64], hat: &[f64]) -> (f64, Vec<f64>) {
    let n = r.len() as f64;
    let m = r.iter().map(|v| v * v).sum::<f64>() / n;
    let e = r
        .iter()
        .zip(hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let floor = FLOOR_REL * m;
    if e > floor || e.is_nan() {
        let k = DB * 2.0 / (n * e);
        let grad = hat.iter().zip(r).map(|(h, a)| k * (h - a)).collect();
        (DB * (e / m).ln(), grad)
    } else {
        (DB * (floor / m).ln(), vec![0.0; r.len()])
    }
}

/// Signal-distortion index in dB; lower is better.
pub fn sdi_loss(y_ref: &Waveform, y_hat: &Waveform) -> Result<f64> {
    check_pair(y_ref.samples(), y_hat.samples())?;
    check_reference(y_ref.samples())?;
    Ok(sdi_value_grad(y_ref.samples(), y_hat.samples()).0)
}

/// Per-block `[left, right]` SDI values.
pub fn sm_loss_blocks(
    refs_l: &[Waveform],
    refs_r: &[Waveform],
    hats_l: &[Waveform],
    hats_r: &[Waveform],
) -> Result<Vec<[f64; 2]>> {
    let n = refs_l.len();
    if refs_r.len() != n || hats_l.len() != n || hats_r.len() != n {
        return Err(Error::Contract(format!(
            "block list lengths differ: {} {} {} {}",
            n,
            refs_r.len(),
            hats_l.len(),
            hats_r.len()
        )));
    }
    (0..n)
        .map(|i| {
            Ok([
                sdi_loss(&refs_l[i], &hats_l[i])?,
                sdi_loss(&refs_r[i], &hats_r[i])?,
            ])
        })
        .collect()
}

/// Sum of left and right SDI over all blocks.
pub fn sm_loss(
    refs_l: &[Waveform],
    refs_r: &[Waveform],
    hats_l: &[Waveform],
    hats_r: &[Waveform],
) -> Result<f64> {
    Ok(sm_loss_blocks(refs_l, refs_r, hats_l, hats_r)?
        .iter()
        .map(|b| b[0] + b[1])
        .sum())
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// SI-SNR value and its gradient with respect to `hat`.
pub(crate) fn si_snr_value_grad(r: &[f64], hat: &[f64]) -> (f64, Vec<f64>) {
    let s = zero_mean(r);
    let x = zero_mean(hat);
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let alpha = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let e: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a - alpha * b).collect();
    let delta = FLOOR_REL * xx + TINY;
    let num = alpha * alpha * ss + delta;
    let den = e.iter().map(|v| v * v).sum::<f64>() + delta;
    let value = DB * (num / den).ln();
    if value >= SI_SNR_CAP_DB {
        return (SI_SNR_CAP_DB, vec![0.0; r.len()]);
    }
    let rho = 2.0 * FLOOR_REL;
    let mut g: Vec<f64> = (0..r.len())
        .map(|i| DB * ((2.0 * alpha * s[i] + rho * x[i]) / num - (2.0 * e[i] + rho * x[i]) / den))
        .collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    (value, g)
}

/// Scale-invariant SNR in dB, capped at [`SI_SNR_CAP_DB`].
pub fn si_snr(s_ref: &Waveform, s_hat: &Waveform) -> Result<f64> {
    check_pair(s_ref.samples(), s_hat.samples())?;
    let s = zero_mean(s_ref.samples());
    check_reference(&s)?;
    Ok(si_snr_value_grad(s_ref.samples(), s_hat.samples()).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sm_per_block: Vec<[f64; 2]>,
    pub l_sm: f64,
    pub l_re: f64,
    pub l_total: f64,
    pub gamma: f64,
}

/// Assembles the weighted objective; `step` labels any non-finite fault.
pub fn total_loss(
    l_sm_per_block: &[[f64; 2]],
    si_snr_db: f64,
    gamma: f64,
    step: usize,
) -> Result<LossReport> {
    for (i, b) in l_sm_per_block.iter().enumerate() {
        for (c, v) in b.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::TrainingFault {
                    step,
                    reason: format!(
                        "non-finite stage-1 loss in block {i} ({})",
                        ["left", "right"][c]
                    ),
                });
            }
        }
    }
    if !si_snr_db.is_finite() {
        return Err(Error::TrainingFault {
            step,
            reason: "non-finite reconstruction loss".into(),
        });
    }
    let l_sm: f64 = l_sm_per_block.iter().map(|b| b[0] + b[1]).sum();
    let l_re = -si_snr_db;
    Ok(LossReport {
        l_sm_per_block: l_sm_per_block.to_vec(),
        l_sm,
        l_re,
        l_total: gamma * l_sm + l_re,
        gamma,
    })
}

fn batch_rows<'a>(v: &'a Var, refs: &[&[f64]]) -> Vec<(&'a [f64], usize)> {
    let s = v.shape();
    assert_eq!(s.len(), 2, "loss input must be [batch, samples]");
    assert_eq!(s[0], refs.len(), "loss batch size");
    (0..s[0])
        .map(|i| (&v.data()[i * s[1]..(i + 1) * s[1]], i))
        .collect()
}

fn batch_mean_loss(
    v: &Var,
    refs: &[&[f64]],
    f: impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>),
    sign: f64,
) -> (Var, Vec<f64>) {
    let b = refs.len() as f64;
    let mut total = 0.0;
    let mut values = Vec::with_capacity(refs.len());
    let mut grad = Vec::with_capacity(v.data().len());
    for (row, i) in batch_rows(v, refs) {
        assert_eq!(row.len(), refs[i].len(), "loss reference length");
        let (val, g) = f(refs[i], row);
        values.push(val);
        total += sign * val / b;
        grad.extend(g.iter().map(|x| sign * x / b));
    }
    (v.custom_scalar(total, grad), values)
}

/// Batch-mean SDI of `[B, N]` estimates; also returns per-item values.
pub fn sdi_loss_var(y_hat: &Var, refs: &[&[f64]]) -> (Var, Vec<f64>) {
    batch_mean_loss(y_hat, refs, sdi_value_grad, 1.0)
}

/// Batch-mean negative SI-SNR; also returns per-item SI-SNR values.
pub fn neg_si_snr_var(s_hat: &Var, refs: &[&[f64]]) -> (Var, Vec<f64>) {
    batch_mean_loss(s_hat, refs, si_snr_value_grad, -1.0)
}
