// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum MbConvMode {
    #[default]
    Multi,
    SingleD1,
    SingleD4,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    #[default]
    Ctfa,
    PlainSelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_ssm_pairs: usize,
    pub n_render_blocks: usize,
    pub base_channels: usize,
    pub mb_kernel: [usize; 2],
    pub mb_dilations: Vec<usize>,
    pub bsd_encoder_channels: [usize; 3],
    pub n_ctfa: usize,
    /// Query/key width of the bottleneck attention and hidden width of its recurrent layer.
    pub ctfa_hidden: usize,
    pub mb_conv_mode: MbConvMode,
    pub bottleneck: Bottleneck,
    pub use_cross_attention: bool,
    pub use_ifm: bool,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_ssm_pairs: 3,
            n_render_blocks: 3,
            base_channels: 16,
            mb_kernel: [3, 3],
            mb_dilations: vec![1, 2, 4],
            bsd_encoder_channels: [32, 64, 128],
            n_ctfa: 2,
            ctfa_hidden: 64,
            mb_conv_mode: MbConvMode::Multi,
            bottleneck: Bottleneck::Ctfa,
            use_cross_attention: true,
            use_ifm: true,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn micro() -> Self {
        Self {
            n_ssm_pairs: 2,
            n_render_blocks: 1,
            base_channels: 4,
            bsd_encoder_channels: [4, 6, 8],
            n_ctfa: 1,
            ctfa_hidden: 4,
            stft: StftConfig {
                window_len: 64,
                hop: 32,
                fft_size: 64,
                centered: true,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_ssm_pairs < 1 {
            return bad("n_ssm_pairs must be at least 1");
        }
        if self.n_render_blocks < 1 {
            return bad("n_render_blocks must be at least 1");
        }
        if self.base_channels < 1
            || self.bsd_encoder_channels.iter().any(|c| *c < 1)
            || self.ctfa_hidden < 1
        {
            return bad("channel counts must be at least 1");
        }
        if self.mb_kernel.iter().any(|k| k % 2 == 0) {
            return bad("mb_kernel sizes must be odd");
        }
        if self.mb_dilations.is_empty() || self.mb_dilations.contains(&0) {
            return bad("mb_dilations must be non-empty and strictly positive");
        }
        self.stft.validate()
    }

    /// Dilations of the convolution branches in every MB-conv block.
    pub fn branch_dilations(&self) -> Vec<usize> {
        match self.mb_conv_mode {
            MbConvMode::Multi => self.mb_dilations.clone(),
            MbConvMode::SingleD1 => vec![1],
            MbConvMode::SingleD4 => vec![4],
        }
    }

    /// The flag combination of one component-ablation case (0 = full model).
    pub fn with_component_case(&self, case: usize) -> Result<Self> {
        let mut c = self.clone();
        match case {
            0 => {}
            1 => c.mb_conv_mode = MbConvMode::SingleD1,
            2 => c.mb_conv_mode = MbConvMode::SingleD4,
            3 => c.bottleneck = Bottleneck::PlainSelfAttention,
            4 => c.use_cross_attention = false,
            5 => c.use_ifm = false,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "component case {case} not in 0..=5"
                )))
            }
        }
        Ok(c)
    }
}
