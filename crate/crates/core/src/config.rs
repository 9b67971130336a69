// SPDX-License-Identifier: Apache-2.0

//! The pipeline configuration document.
//!
//! A single JSON file holds the model (including its STFT), training
//! settings, scenario selection and dataset paths. Unknown keys are
//! rejected and type errors name the offending key. Only paths may be
//! overridden from the environment.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::binaural::ScenarioKind;
use crate::dataset::BrirSource;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train_eval::TrainConfig;

/// Environment variables that replace path fields.
pub const ENV_OVERRIDES: [(&str, PathField); 7] = [
    ("VBSE_TRAIN_MANIFEST", PathField::TrainManifest),
    ("VBSE_EVAL_MANIFEST", PathField::EvalManifest),
    ("VBSE_TRAIN_DIR", PathField::TrainDir),
    ("VBSE_EVAL_DIR", PathField::EvalDir),
    ("VBSE_WORK_DIR", PathField::WorkDir),
    ("VBSE_PESQ_SIDECAR", PathField::PesqSidecar),
    ("VBSE_CHECKPOINT_DIR", PathField::CheckpointDir),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathField {
    TrainManifest,
    EvalManifest,
    TrainDir,
    EvalDir,
    WorkDir,
    PesqSidecar,
    CheckpointDir,
}

/// Which responses render the targets, and an optional scenario that
/// replaces the one recorded in the manifests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub brirs: Option<BrirSource>,
    pub kind: Option<ScenarioKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Generated training set; defaults to `work_dir/train_data`.
    pub train_dir: Option<PathBuf>,
    /// Generated evaluation set; defaults to `work_dir/eval_data`.
    pub eval_dir: Option<PathBuf>,
    pub work_dir: PathBuf,
    /// JSON object mapping utterance ids to externally computed PESQ.
    pub pesq_sidecar: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train_manifest: None,
            eval_manifest: None,
            train_dir: None,
            eval_dir: None,
            work_dir: PathBuf::from("runs"),
            pesq_sidecar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenarios: ScenarioConfig,
    pub data: DataPaths,
}

impl PipelineConfig {
    /// Parses a document; errors carry the dotted path of the bad key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory,
    /// applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        cfg.apply_env(|k| std::env::var_os(k).map(PathBuf::from));
        cfg.validate()?;
        Ok(cfg)
    }

    fn path_mut(&mut self, f: PathField) -> PathSlot<'_> {
        match f {
            PathField::TrainManifest => PathSlot::Opt(&mut self.data.train_manifest),
            PathField::EvalManifest => PathSlot::Opt(&mut self.data.eval_manifest),
            PathField::TrainDir => PathSlot::Opt(&mut self.data.train_dir),
            PathField::EvalDir => PathSlot::Opt(&mut self.data.eval_dir),
            PathField::WorkDir => PathSlot::Req(&mut self.data.work_dir),
            PathField::PesqSidecar => PathSlot::Opt(&mut self.data.pesq_sidecar),
            PathField::CheckpointDir => PathSlot::Opt(&mut self.train.checkpoint_dir),
        }
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for (_, f) in ENV_OVERRIDES {
            match self.path_mut(f) {
                PathSlot::Opt(Some(p)) => fix(p),
                PathSlot::Opt(None) => {}
                PathSlot::Req(p) => fix(p),
            }
        }
        if let Some(BrirSource::Directory { path }) = &mut self.scenarios.brirs {
            fix(path);
        }
    }

    /// Replaces path fields from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<PathBuf>) {
        for (var, f) in ENV_OVERRIDES {
            if let Some(v) = lookup(var) {
                match self.path_mut(f) {
                    PathSlot::Opt(p) => *p = Some(v),
                    PathSlot::Req(p) => *p = v,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data
            .train_dir
            .clone()
            .unwrap_or_else(|| self.data.work_dir.join("train_data"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data
            .eval_dir
            .clone()
            .unwrap_or_else(|| self.data.work_dir.join("eval_data"))
    }

    /// The training settings with `checkpoint_dir` defaulted to
    /// `work_dir/checkpoints`.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if t.checkpoint_dir.is_none() {
            t.checkpoint_dir = Some(self.data.work_dir.join("checkpoints"));
        }
        t
    }

    /// The published JSON schema of this document.
    pub fn schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
    }
}

enum PathSlot<'a> {
    Opt(&'a mut Option<PathBuf>),
    Req(&'a mut PathBuf),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = PipelineConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = PipelineConfig::from_json_str(r#"{"train": {"gamma": "high"}}"#).unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "train.gamma"),
            other => panic!("unexpected {other}"),
        }
        let err = PipelineConfig::from_json_str(r#"{"model": {"stft": {"hop": 10, "bogus": 1}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(err.is_config_error());
    }

    #[test]
    fn paths_resolve_then_env_wins() {
        let mut cfg = PipelineConfig::from_json_str(
            r#"{"data": {"train_manifest": "m.jsonl", "work_dir": "/abs/run"},
                "scenarios": {"brirs": {"kind": "directory", "path": "brirs"}}}"#,
        )
        .unwrap();
        cfg.resolve_relative(Path::new("/etc/vbse"));
        assert_eq!(
            cfg.data.train_manifest.as_deref(),
            Some(Path::new("/etc/vbse/m.jsonl"))
        );
        assert_eq!(cfg.data.work_dir, PathBuf::from("/abs/run"));
        assert_eq!(
            cfg.scenarios.brirs,
            Some(BrirSource::Directory {
                path: "/etc/vbse/brirs".into()
            })
        );
        cfg.apply_env(|k| (k == "VBSE_WORK_DIR").then(|| PathBuf::from("elsewhere")));
        assert_eq!(cfg.data.work_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train_dir(), PathBuf::from("elsewhere/train_data"));
        assert_eq!(
            cfg.effective_train().checkpoint_dir,
            Some(PathBuf::from("elsewhere/checkpoints"))
        );
    }

    #[test]
    fn schema_lists_sections() {
        let s = PipelineConfig::schema();
        let props = s["properties"].as_object().unwrap();
        for k in ["model", "train", "scenarios", "data"] {
            assert!(props.contains_key(k), "{k}");
        }
        assert_eq!(s["additionalProperties"], serde_json::Value::Bool(false));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = PipelineConfig::from_json_str(r#"{"train": {"learning_rate": -1.0}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
