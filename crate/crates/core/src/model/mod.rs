// SPDX-License-Identifier: Apache-2.0

//! The two-stage enhancement network.

pub mod blocks;
pub mod config;
pub mod params;

use std::sync::Arc;

pub use blocks::{Ctx, ModelOutput};
pub use config::{Bottleneck, MbConvMode, ModelConfig};
pub use params::{param_count, BnUpdate, ParameterSet};

use crate::autograd::Var;
use crate::dsp::{StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stacks the STFT RI planes of equal-length signals into `[B, 2, T, F]`.
pub fn analyze_batch(plan: &StftPlan, signals: &[&[f64]]) -> Result<Tensor> {
    let Some(first) = signals.first() else {
        return Err(Error::InvalidInput("empty batch".into()));
    };
    let len = first.len();
    let cfg = plan.config();
    let (t, f) = (cfg.n_frames(len), cfg.n_bins());
    let mut data = Vec::with_capacity(signals.len() * 2 * t * f);
    for s in signals {
        if s.len() != len {
            return Err(Error::InvalidInput(format!(
                "batch lengths differ: {} vs {len}",
                s.len()
            )));
        }
        let (re, im) = plan.analyze(s)?;
        data.extend_from_slice(&re);
        data.extend_from_slice(&im);
    }
    Ok(Tensor::new(vec![signals.len(), 2, t, f], data))
}

/// Enhanced waveform and the per-block binaural predictions.
#[derive(Debug, Clone)]
pub struct Enhanced {
    pub s_pre: Waveform,
    pub y_pre_l: Vec<Waveform>,
    pub y_pre_r: Vec<Waveform>,
}

fn row(v: &Var, i: usize) -> Vec<f64> {
    let n = v.shape()[1];
    v.data()[i * n..(i + 1) * n].to_vec()
}

/// Inference on one mixture with frozen normalization statistics.
pub fn se_terrnet_forward(
    y: &Waveform,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<Enhanced> {
    cfg.validate()?;
    params.check_against(cfg)?;
    let plan = Arc::new(StftPlan::new(cfg.stft)?);
    let y_ri = Var::constant(analyze_batch(&plan, &[y.samples()])?);
    let ctx = Ctx::new(params, cfg, plan, y.len(), false, false);
    let out = blocks::forward(&ctx, &y_ri);
    let rate = y.sample_rate();
    let wave = |v: &Var| Waveform::new(row(v, 0), rate);
    Ok(Enhanced {
        s_pre: wave(&out.s_pre)?,
        y_pre_l: out.y_pre_l.iter().map(wave).collect::<Result<_>>()?,
        y_pre_r: out.y_pre_r.iter().map(wave).collect::<Result<_>>()?,
    })
}
