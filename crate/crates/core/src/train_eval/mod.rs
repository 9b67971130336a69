// SPDX-License-Identifier: Apache-2.0

//! Multi-task training, evaluation and the ablation runner.

pub mod ablation;
pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::dataset::{load_all, Example};
use crate::dsp::StftPlan;
use crate::error::{Error, Result};
use crate::losses::{neg_si_snr_var, sdi_loss_var, total_loss, LossReport, DEFAULT_GAMMA};
use crate::metrics::{evaluate_corpus, EvalItem, MetricsReport};
use crate::model::{analyze_batch, blocks, se_terrnet_forward, Ctx, ModelConfig, ParameterSet};

pub use ablation::{run_ablation, AblationAxis, AblationSpec, AblationTable, VariantResult};
pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, global_norm, AdamConfig, AdamState};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to `min_lr` over `max_steps`.
    Cosine {
        min_lr: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub gamma: f64,
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub schedule: Schedule,
    /// Adds `wall_ms` to log lines; logs are then no longer reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            max_steps: 1000,
            grad_clip_norm: 5.0,
            seed: 0,
            optimizer: AdamConfig::default(),
            gamma: DEFAULT_GAMMA,
            eval_every: 100,
            checkpoint_dir: None,
            schedule: Schedule::Constant,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optimizer needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if let Schedule::Cosine { min_lr } = self.schedule {
            if !(0.0..=self.learning_rate).contains(&min_lr) {
                return bad(format!(
                    "cosine min_lr {min_lr} must lie in [0, learning_rate]"
                ));
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { min_lr } => {
                let frac = (step.saturating_sub(1)) as f64 / self.max_steps.max(1) as f64;
                min_lr
                    + (self.learning_rate - min_lr)
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_sm: f64,
    pub l_re: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

/// Seeded epoch-wise shuffling of example indices.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            perm: (0..n).collect(),
            pos: n,
        };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_done();
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Forward pass, weighted objective and parameter gradients for one batch.
pub struct StepResult {
    pub report: LossReport,
    pub grads: BTreeMap<String, Vec<f64>>,
    pub bn_updates: Vec<crate::model::BnUpdate>,
}

/// Computes the objective and its gradient on a batch of examples.
pub fn loss_and_grads(
    params: &ParameterSet,
    cfg: &ModelConfig,
    plan: &Arc<StftPlan>,
    batch: &[&Example],
    gamma: f64,
    step: usize,
) -> Result<StepResult> {
    let len = batch[0].y.len();
    let ys: Vec<&[f64]> = batch.iter().map(|e| e.y.samples()).collect();
    let y_ri = Var::constant(analyze_batch(plan, &ys)?);
    let ctx = Ctx::new(params, cfg, plan.clone(), len, true, true);
    let out = blocks::forward(&ctx, &y_ri);
    let refs_l: Vec<&[f64]> = batch.iter().map(|e| e.y_l.samples()).collect();
    let refs_r: Vec<&[f64]> = batch.iter().map(|e| e.y_r.samples()).collect();
    let refs_s: Vec<&[f64]> = batch.iter().map(|e| e.s.samples()).collect();
    let mut per_block = Vec::with_capacity(out.y_pre_l.len());
    let mut l_sm: Option<Var> = None;
    for (hl, hr) in out.y_pre_l.iter().zip(&out.y_pre_r) {
        let (a, _) = sdi_loss_var(hl, &refs_l);
        let (b, _) = sdi_loss_var(hr, &refs_r);
        per_block.push([a.item(), b.item()]);
        let pair = a.add(&b);
        l_sm = Some(match l_sm {
            Some(acc) => acc.add(&pair),
            None => pair,
        });
    }
    let (neg_si, _) = neg_si_snr_var(&out.s_pre, &refs_s);
    let report = total_loss(&per_block, -neg_si.item(), gamma, step)?;
    let objective = match l_sm {
        Some(l) => l.scale(gamma).add(&neg_si),
        None => neg_si,
    };
    let g = objective.backward();
    let mut grads = BTreeMap::new();
    for (name, v) in ctx.param_vars() {
        let gv = g.get_or_zero(&v).into_data();
        if let Some(i) = gv.iter().position(|x| !x.is_finite()) {
            return Err(Error::TrainingFault {
                step,
                reason: format!("non-finite gradient in {name}[{i}]"),
            });
        }
        grads.insert(name, gv);
    }
    Ok(StepResult {
        report,
        grads,
        bn_updates: ctx.take_bn_updates(),
    })
}

/// Final state and per-step log of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

fn check_examples(data: &[Example]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidInput("training set is empty".into()))?;
    let len = first.y.len();
    for e in data {
        if [&e.y, &e.y_l, &e.y_r, &e.s].iter().any(|w| w.len() != len) {
            return Err(Error::CorruptDataset {
                id: e.id.clone(),
                reason: format!("waveform lengths differ from the batch length {len}"),
            });
        }
    }
    Ok(len)
}

/// Trains from scratch (or from `resume`), calling `progress` after every step.
///
/// With a checkpoint directory the log is streamed to `train_log.jsonl`,
/// checkpoints land every `eval_every` steps and at the end.
pub fn train_with(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Example],
    resume: Option<Checkpoint>,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    check_examples(data)?;
    let plan = Arc::new(StftPlan::new(model.stft)?);
    let mut ck = match resume {
        Some(ck) => {
            ck.ensure_model(model)?;
            ck
        }
        None => Checkpoint::init(model, cfg.seed)?,
    };
    ck.train = Some(TrainConfig {
        checkpoint_dir: None,
        ..cfg.clone()
    });
    let mut opt = ck.optimizer.take().unwrap_or_default();
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    for _ in 0..ck.step {
        order.next_batch(cfg.batch_size.min(data.len()));
    }
    let mut writer = match &cfg.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let file = if ck.step == 0 {
                File::create(&path)
            } else {
                File::options().append(true).create(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    while ck.step < cfg.max_steps {
        let step = ck.step + 1;
        let idx = order.next_batch(cfg.batch_size.min(data.len()));
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let StepResult {
            report,
            mut grads,
            bn_updates,
        } = loss_and_grads(&ck.params, model, &plan, &batch, cfg.gamma, step)?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        opt.step(&cfg.optimizer, cfg.lr_at(step), &mut ck.params, &grads);
        ck.params.apply_bn_updates(&bn_updates);
        ck.step = step;
        let entry = StepLog {
            step,
            l_sm: report.l_sm,
            l_re: report.l_re,
            l_total: report.l_total,
            grad_norm,
            wall_ms: cfg
                .log_wall_time
                .then(|| start.elapsed().as_millis() as u64),
        };
        if let Some((w, path)) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        progress(&entry);
        log.push(entry);
        if let Some(dir) = &cfg.checkpoint_dir {
            if step % cfg.eval_every == 0 && step < cfg.max_steps {
                ck.optimizer = Some(opt.clone());
                ck.save(&dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }
    }
    ck.optimizer = Some(opt);
    if let Some((w, path)) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        ck.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
    })
}

/// [`train_with`] from scratch without progress reporting.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, data: &[Example]) -> Result<TrainOutcome> {
    train_with(model, cfg, data, None, &mut |_| {})
}

/// Loads a generated dataset directory and trains on it.
pub fn train_on_dir(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset_dir: &Path,
) -> Result<TrainOutcome> {
    train(model, cfg, &load_all(dataset_dir)?)
}

/// Enhances every example and scores it against its clean reference.
pub fn evaluate_examples(
    params: &ParameterSet,
    cfg: &ModelConfig,
    data: &[Example],
    pesq: Option<&BTreeMap<String, f64>>,
) -> Result<MetricsReport> {
    let items = data
        .iter()
        .map(|e| {
            Ok(EvalItem {
                id: e.id.clone(),
                reference: e.s.clone(),
                noisy: e.y.clone(),
                estimate: se_terrnet_forward(&e.y, params, cfg)?.s_pre,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_corpus(&items, pesq)
}

/// Evaluates a checkpoint on a generated dataset.
///
/// When `expected` is given, a checkpoint built for another configuration
/// is rejected with a version error.
pub fn evaluate(
    ck: &Checkpoint,
    dataset_dir: &Path,
    expected: Option<&ModelConfig>,
    pesq: Option<&BTreeMap<String, f64>>,
) -> Result<MetricsReport> {
    if let Some(m) = expected {
        ck.ensure_model(m)?;
    }
    evaluate_examples(&ck.params, &ck.model, &load_all(dataset_dir)?, pesq)
}

#[cfg(test)]
mod tests;
