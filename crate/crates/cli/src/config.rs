//! Experiment configuration: one versioned JSON document with a section per
//! stage. Unknown keys are rejected and errors carry the offending key path.
//!
//! Seeds resolve before typed parsing: a section without its own `seed`
//! inherits the document's top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use seglab::attacks::{AttackConfig, AttackKind, Norm, Schedule, DEFAULT_ALPHA, DEFAULT_EPSILON};
use seglab::data::ShapesConfig;
use seglab::training::TrainConfig;
use seglab::Arch;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: ShapesConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackSection>,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::MiniSegNet,
            seed: 0,
        }
    }
}

/// One attack family evaluated at one or more iteration budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    /// Iteration budgets; single-step attacks ignore this and run once.
    #[serde(default = "default_budgets")]
    pub iterations: Vec<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_true")]
    pub random_init: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_budgets() -> Vec<usize> {
    vec![20]
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_schedule() -> Schedule {
    Schedule::Linear
}
fn default_true() -> bool {
    true
}

impl AttackSection {
    /// Budgets actually run: `[1]` for single-step kinds.
    pub fn budgets(&self) -> Vec<usize> {
        if self.kind.is_single_step() {
            vec![1]
        } else {
            self.iterations.clone()
        }
    }

    pub fn attack_config(&self, iterations: usize) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            iterations,
            schedule: self.schedule,
            norm: if self.kind == AttackKind::BimL2 { Norm::L2 } else { Norm::Linf },
            random_init: self.random_init,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default)]
    pub split: Split,
    /// Evaluate only the first `max_images` samples of the split.
    #[serde(default)]
    pub max_images: Option<usize>,
    /// Write per-image attack traces.
    #[serde(default = "default_true")]
    pub traces: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            split: Split::Val,
            max_images: None,
            traces: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        inherit_seeds(&mut doc);
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "at `version`: unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        self.dataset
            .validate()
            .map_err(|e| CliError::Config(format!("at `dataset`: {e}")))?;
        if let Some(train) = &self.train {
            train
                .validate()
                .map_err(|e| CliError::Config(format!("at `train`: {e}")))?;
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if a.budgets().is_empty() {
                return Err(CliError::Config(format!("at `attacks[{i}].iterations`: no budgets given")));
            }
            for t in a.budgets() {
                a.attack_config(t)
                    .validate()
                    .map_err(|e| CliError::Config(format!("at `attacks[{i}]`: {e}")))?;
            }
        }
        if self.evaluation.max_images == Some(0) {
            return Err(CliError::Config("at `evaluation.max_images`: must be positive".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Copies the top-level seed into every section that lacks one.
fn inherit_seeds(doc: &mut Value) {
    let Some(root) = doc.as_object_mut() else { return };
    let seed = root.get("seed").cloned().unwrap_or(Value::from(0u64));
    for key in ["dataset", "model", "train"] {
        if let Some(Value::Object(section)) = root.get_mut(key) {
            section.entry("seed").or_insert_with(|| seed.clone());
        }
    }
    if root.get("model").is_none() {
        root.insert(
            "model".into(),
            serde_json::json!({ "arch": "mini", "seed": seed.clone() }),
        );
    }
    if let Some(Value::Array(attacks)) = root.get_mut("attacks") {
        for a in attacks {
            if let Value::Object(a) = a {
                a.entry("seed").or_insert_with(|| seed.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"version": 1, "seed": 7,
            "dataset": {"size": 32, "classes": 4, "min_shapes": 2, "max_shapes": 4,
                        "noise_std": 0.05, "train": 4, "val": 2},
            "attacks": [{"kind": "segpgd", "iterations": [3, 5]}, {"kind": "fgsm", "seed": 1}]}"#
    }

    #[test]
    fn seeds_inherit_from_top_level() {
        let cfg = ExperimentConfig::from_json_str(minimal()).unwrap();
        assert_eq!(cfg.dataset.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.attacks[0].seed, 7);
        assert_eq!(cfg.attacks[1].seed, 1);
        assert_eq!(cfg.attacks[1].budgets(), vec![1]);
        assert_eq!(cfg.attacks[0].schedule, Schedule::Linear);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_json_str(minimal()).unwrap();
        let again = ExperimentConfig::from_json_str(&cfg.to_value().to_string()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let text = minimal().replace("\"noise_std\"", "\"noise\"");
        let msg = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(msg.contains("dataset"), "{msg}");
        assert!(msg.contains("noise"), "{msg}");
    }

    #[test]
    fn bad_values_rejected() {
        for (from, to) in [
            ("\"version\": 1", "\"version\": 2"),
            ("\"size\": 32", "\"size\": 33"),
            ("[3, 5]", "[]"),
            ("\"kind\": \"segpgd\"", "\"kind\": \"cw\""),
        ] {
            let text = minimal().replace(from, to);
            assert!(matches!(ExperimentConfig::from_json_str(&text), Err(CliError::Config(_))), "{to}");
        }
    }

    fn keys(v: &Value) -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    }

    #[test]
    fn shipped_schema_lists_every_config_key() {
        let schema: Value =
            serde_json::from_str(include_str!("../../../configs/experiment.schema.json")).unwrap();
        let text = minimal().replace(
            r#""attacks""#,
            r#""train": {"iterations": 1, "batch_size": 2, "learning_rate": 0.1, "mode": "standard"}, "attacks""#,
        );
        let cfg = ExperimentConfig::from_json_str(&text).unwrap().to_value();
        let props = &schema["properties"];
        assert_eq!(keys(props), keys(&cfg));
        for section in ["dataset", "model", "train", "evaluation"] {
            assert_eq!(keys(&props[section]["properties"]), keys(&cfg[section]), "{section}");
        }
        assert_eq!(
            keys(&props["train"]["properties"]["attack"]["properties"]),
            keys(&cfg["train"]["attack"])
        );
        assert_eq!(keys(&props["attacks"]["items"]["properties"]), keys(&cfg["attacks"][0]));
    }

    #[test]
    fn shipped_configs_parse() {
        for entry in std::fs::read_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs")).unwrap() {
            let path = entry.unwrap().path();
            if path.file_name().unwrap().to_str().unwrap().ends_with(".schema.json") {
                continue;
            }
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}
