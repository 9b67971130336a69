// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParameterSet;

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Applies one bias-corrected update to every parameter with a gradient.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Vec<f64>>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig::micro();
        let mut p = ParameterSet::init(&cfg, 0).unwrap();
        let before = p.clone();
        let name = p.names().next().unwrap().clone();
        let n = p.get(&name).unwrap().numel();
        let mut grads = BTreeMap::new();
        grads.insert(
            name.clone(),
            (0..n)
                .map(|i| if i % 2 == 0 { 3.0 } else { -0.5 })
                .collect(),
        );
        let mut st = AdamState::default();
        st.step(&AdamConfig::default(), 1e-2, &mut p, &grads);
        for (i, (a, b)) in p
            .get(&name)
            .unwrap()
            .data()
            .iter()
            .zip(before.get(&name).unwrap().data())
            .enumerate()
        {
            let expect = if i % 2 == 0 { -1e-2 } else { 1e-2 };
            assert!((a - b - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = ModelConfig::micro();
        let mut p = ParameterSet::init(&cfg, 1).unwrap();
        let name = p.names().next().unwrap().clone();
        let mut st = AdamState::default();
        for _ in 0..2000 {
            let g: Vec<f64> = p
                .get(&name)
                .unwrap()
                .data()
                .iter()
                .map(|w| 2.0 * (w - 0.25))
                .collect();
            let grads = BTreeMap::from([(name.clone(), g)]);
            st.step(&AdamConfig::default(), 1e-2, &mut p, &grads);
        }
        assert!(p
            .get(&name)
            .unwrap()
            .data()
            .iter()
            .all(|w| (w - 0.25).abs() < 1e-3));
    }

    proptest! {
        #[test]
        fn clipping_bounds_the_norm(values in prop::collection::vec(-100.0f64..100.0, 1..40), max in 0.01f64..10.0) {
            let mut grads = BTreeMap::from([("a".to_string(), values.clone())]);
            let before = clip_global_norm(&mut grads, max);
            let after = global_norm(&grads);
            prop_assert!(after <= max + 1e-9);
            if before <= max {
                prop_assert_eq!(&grads["a"], &values);
            }
        }
    }
}
