// SPDX-License-Identifier: Apache-2.0

pub mod autograd;
pub mod binaural;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod signals;
pub mod tensor;
pub mod train_eval;
pub mod wav;

pub use error::{Error, Result};
