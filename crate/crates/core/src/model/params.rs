// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::blocks;
use super::config::ModelConfig;

pub const INIT_SCHEME: &str = "fan_in_normal";
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Ordered list of parameter and buffer shapes for one configuration.
#[derive(Debug, Default)]
pub(crate) struct Registry {
    pub params: Vec<(String, Vec<usize>, Init)>,
    pub buffers: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) {
        self.params.push((name, shape.to_vec(), init));
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], init: Init) {
        self.buffers.push((name, shape.to_vec(), init));
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut reg = Registry::default();
        blocks::declare_model(&mut reg, cfg);
        reg
    }
}

fn materialize(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::FanIn(fan_in) => Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    }
}

/// Learnable tensors plus non-learnable buffers (normalization statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub init_scheme: String,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let reg = Registry::for_config(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in &reg.params {
            let prev = params.insert(name.clone(), materialize(shape, *init, &mut rng));
            assert!(prev.is_none(), "duplicate parameter {name}");
        }
        let buffers = reg
            .buffers
            .iter()
            .map(|(name, shape, init)| (name.clone(), materialize(shape, *init, &mut rng)))
            .collect();
        Ok(Self {
            init_scheme: INIT_SCHEME.to_string(),
            params,
            buffers,
        })
    }

    pub(crate) fn from_parts(
        init_scheme: String,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Self {
        Self {
            init_scheme,
            params,
            buffers,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match what `cfg` declares.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let reg = Registry::for_config(cfg);
        let check = |kind: &str,
                     have: &BTreeMap<String, Tensor>,
                     want: &[(String, Vec<usize>, Init)]|
         -> Result<()> {
            if have.len() != want.len() {
                return Err(Error::Contract(format!(
                    "{kind} count {} does not match configuration ({})",
                    have.len(),
                    want.len()
                )));
            }
            for (name, shape, _) in want {
                match have.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Contract(format!(
                            "{kind} {name} has shape {:?}, configuration needs {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Contract(format!("missing {kind} {name}"))),
                }
            }
            Ok(())
        };
        check("parameter", &self.params, &reg.params)?;
        check("buffer", &self.buffers, &reg.buffers)
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            if let Some(rm) = self.buffers.get_mut(&format!("{}.running_mean", u.name)) {
                for (r, m) in rm.data_mut().iter_mut().zip(&u.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{}.running_var", u.name)) {
                for (r, v) in rv.data_mut().iter_mut().zip(&u.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
    }

    /// Saturates every sigmoid mask to one: the network then passes the
    /// mixture through unchanged.
    pub fn set_identity_masks(&mut self, cfg: &ModelConfig) {
        for name in blocks::mask_output_convs(cfg) {
            if let Some(w) = self.params.get_mut(&format!("{name}.w")) {
                w.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if let Some(b) = self.params.get_mut(&format!("{name}.b")) {
                b.data_mut().iter_mut().for_each(|v| *v = 40.0);
            }
        }
    }
}

/// Batch statistics of one batch-norm layer from a training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Exact learnable-scalar count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Registry::for_config(cfg)
        .params
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}
