// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binaural::ScenarioKind;
use crate::dataset::{generate_dataset, load_all, Manifest};
use crate::error::{Error, Result};
use crate::metrics::MetricMeans;
use crate::model::{param_count, ModelConfig};

use super::{evaluate_examples, train_with, StepLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SsmPairs,
    Scenario,
    ComponentCase,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm_pairs" | "n_ssm_pairs" => Ok(Self::SsmPairs),
            "scenario" => Ok(Self::Scenario),
            "component_case" | "components" => Ok(Self::ComponentCase),
            other => Err(Error::InvalidInput(format!(
                "unknown ablation axis `{other}` (ssm_pairs, scenario, component_case)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Variant {
    Pairs(usize),
    Scenario(ScenarioKind),
    Case(usize),
}

impl Variant {
    fn label(&self) -> String {
        match self {
            Variant::Pairs(n) => format!("N={n}"),
            Variant::Scenario(k) => k.to_string(),
            Variant::Case(c) => format!("case {c}"),
        }
    }

    fn slug(&self) -> String {
        match self {
            Variant::Pairs(n) => format!("pairs_{n}"),
            Variant::Scenario(k) => format!("scenario_{k}"),
            Variant::Case(c) => format!("case_{c}"),
        }
    }
}

/// One ablation axis with the shared base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationSpec {
    fn variants(&self) -> Vec<Variant> {
        match self.axis {
            AblationAxis::SsmPairs => (1..=5).map(Variant::Pairs).collect(),
            AblationAxis::Scenario => ScenarioKind::ALL
                .into_iter()
                .map(Variant::Scenario)
                .collect(),
            AblationAxis::ComponentCase => (0..=5).map(Variant::Case).collect(),
        }
    }

    fn model_for(&self, v: &Variant) -> Result<ModelConfig> {
        match v {
            Variant::Pairs(n) => Ok(ModelConfig {
                n_ssm_pairs: *n,
                ..self.model.clone()
            }),
            Variant::Scenario(_) => Ok(self.model.clone()),
            Variant::Case(c) => self.model.with_component_case(*c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub param_count: usize,
    pub final_l_total: Option<f64>,
    pub metrics: Option<MetricMeans>,
    pub eval_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub variants: Vec<VariantResult>,
}

impl AblationTable {
    /// Rows are metrics, columns are variants.
    pub fn to_text(&self) -> String {
        let width = self
            .variants
            .iter()
            .map(|v| v.label.len())
            .max()
            .unwrap_or(0)
            .max(12);
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "metric");
        for v in &self.variants {
            let _ = write!(out, " {:>width$}", v.label);
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, cell: &dyn Fn(&VariantResult) -> String| {
            let _ = write!(out, "{name:<16}");
            for v in &self.variants {
                let _ = write!(out, " {:>width$}", cell(v));
            }
            out.push('\n');
        };
        let metric = |f: fn(&MetricMeans) -> Option<f64>, scale: f64, prec: usize| {
            move |v: &VariantResult| match v.metrics.as_ref().and_then(f) {
                Some(x) => format!("{:.prec$}", x * scale),
                None => "-".to_string(),
            }
        };
        row(&mut out, "params", &|v| v.param_count.to_string());
        row(&mut out, "final l_total", &|v| match v.final_l_total {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        });
        row(
            &mut out,
            "SI-SNRi (dB)",
            &metric(|m| Some(m.si_snr_improvement_db), 1.0, 3),
        );
        row(&mut out, "SSNR (dB)", &metric(|m| Some(m.ssnr_db), 1.0, 3));
        if self
            .variants
            .iter()
            .any(|v| v.metrics.as_ref().is_some_and(|m| m.pesq.is_some()))
        {
            row(&mut out, "PESQ", &metric(|m| m.pesq, 1.0, 3));
        }
        row(&mut out, "STOI (%)", &metric(|m| Some(m.stoi), 100.0, 2));
        out
    }
}

/// Trains and evaluates every variant of one axis under identical seeds.
///
/// Datasets are generated under `work_dir/data`; the scenario axis
/// regenerates only the training targets per scenario.
pub fn run_ablation(
    spec: &AblationSpec,
    train_manifest: &Manifest,
    eval_manifest: &Manifest,
    work_dir: &Path,
    progress: &mut dyn FnMut(&str, &StepLog),
) -> Result<AblationTable> {
    let data_dir = work_dir.join("data");
    let eval_dir = data_dir.join("eval");
    generate_dataset(eval_manifest, &eval_dir)?;
    let eval_data = load_all(&eval_dir)?;
    let shared_train = if spec.axis == AblationAxis::Scenario {
        None
    } else {
        let dir = data_dir.join("train");
        generate_dataset(train_manifest, &dir)?;
        Some(load_all(&dir)?)
    };
    let mut variants = Vec::new();
    for v in spec.variants() {
        let model = spec.model_for(&v)?;
        let train_data = match (&v, &shared_train) {
            (Variant::Scenario(kind), _) => {
                let dir = data_dir.join(format!("train_{kind}"));
                generate_dataset(&train_manifest.with_scenario(*kind)?, &dir)?;
                load_all(&dir)?
            }
            (_, Some(d)) => d.clone(),
            (_, None) => unreachable!("shared training data exists for non-scenario axes"),
        };
        let cfg = TrainConfig {
            checkpoint_dir: Some(work_dir.join(v.slug())),
            ..spec.train.clone()
        };
        let label = v.label();
        let outcome = train_with(&model, &cfg, &train_data, None, &mut |s| {
            progress(&label, s)
        })?;
        let report = evaluate_examples(&outcome.checkpoint.params, &model, &eval_data, None)?;
        variants.push(VariantResult {
            label,
            param_count: param_count(&model),
            final_l_total: outcome.log.last().map(|s| s.l_total),
            metrics: report.means,
            eval_failures: report.failures.len(),
        });
    }
    Ok(AblationTable {
        axis: spec.axis,
        variants,
    })
}
