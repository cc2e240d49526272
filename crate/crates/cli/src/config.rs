//! Run configuration: one strict JSON document per experiment.

use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use lax_core::lax::GateVariant;
use lax_core::nets::{ChainSpec, LoraSpec, ModelSpec, NetSpec};
use lax_core::training::{TaskSpec, TrainConfig};

/// Overrides the directory that `output_dir` is resolved against.
pub const OUTPUT_ROOT_ENV: &str = "LAX_KIT_OUTPUT_ROOT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Transformer; exclusive with `chain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Stack of linear slots; exclusive with `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainSpec>,
    /// Freezes `model` and trains adapters instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSpec>,
    /// Required by `train` and `gradcheck`; cost reports need only the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Relative to the current directory, or to `$LAX_KIT_OUTPUT_ROOT`.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted key path, empty at the document root.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn fail<T>(path: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        path: path.to_string(),
        message: message.into(),
    })
}

/// Gate used when a LaX section leaves `gate` out: tensor gates for
/// patch-input pre-training, identity otherwise.
pub fn default_gate(vision: bool, adapters: bool) -> GateVariant {
    if vision && !adapters {
        GateVariant::Tensor
    } else {
        GateVariant::Identity
    }
}

fn fill_default_gate(doc: &mut Value) {
    let adapters = doc.get("lora").is_some();
    let vision = doc.pointer("/model/input/type").and_then(Value::as_str) == Some("patches");
    let gate = serde_json::to_value(default_gate(vision, adapters)).expect("gate serializes");
    if let Some(lax) = doc.pointer_mut("/model/lax").and_then(Value::as_object_mut) {
        lax.entry("gate").or_insert(gate);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc: Value = serde_json::from_str(text).or_else(|e| fail("", format!("invalid JSON: {e}")))?;
        fill_default_gate(&mut doc);
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).or_else(|e| {
            let mut path = e.path().to_string();
            let message = e.into_inner().to_string();
            // serde reports a missing key at its parent; name the key itself
            if let Some(key) = message
                .strip_prefix("missing field `")
                .and_then(|m| m.split('`').next())
            {
                path = if path == "." {
                    key.to_string()
                } else {
                    format!("{path}.{key}")
                };
            }
            fail(&path, message)
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).or_else(|e| fail("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn check(&self) -> Result<(), ConfigError> {
        match (&self.model, &self.chain) {
            (Some(_), Some(_)) => return fail("", "give either \"model\" or \"chain\", not both"),
            (None, None) => return fail("", "missing field `model` (or `chain`)"),
            _ => {}
        }
        if self.lora.is_some() && self.model.is_none() {
            return fail("lora", "adapters need a transformer \"model\"");
        }
        let relative = self
            .output_dir
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !relative {
            return fail("output_dir", "must be a relative path without \"..\"");
        }
        match &self.train {
            Some(t) => t.validate().or_else(|e| fail("train", e.to_string())),
            None => Ok(()),
        }
    }

    /// Task and training sections, which `train` and `gradcheck` need.
    pub fn experiment(&self) -> Result<(&TaskSpec, &TrainConfig), ConfigError> {
        match (&self.task, &self.train) {
            (Some(task), Some(train)) => Ok((task, train)),
            (None, _) => fail("", "missing field `task`"),
            (_, None) => fail("", "missing field `train`"),
        }
    }

    pub fn net_spec(&self) -> NetSpec {
        match (&self.model, &self.chain) {
            (Some(m), _) => NetSpec::Transformer(m.clone()),
            (None, Some(c)) => NetSpec::Chain(c.clone()),
            (None, None) => unreachable!("checked at parse time"),
        }
    }

    /// `output_dir` under `$LAX_KIT_OUTPUT_ROOT`, or the current directory.
    pub fn output_path(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
        root.join(&self.output_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
        "model": {
            "input": {"type": "tokens", "vocab": 8, "max_len": 3},
            "head": {"type": "classify", "classes": 7},
            "depth": 1,
            "block": {"width": 8, "heads": 2, "qkv": {"kind": "svd", "rank": 2},
                      "mlp_up": {"kind": "svd", "rank": 2}, "mlp_down": {"kind": "svd", "rank": 2}},
            "lax": {"enabled": true},
            "seed": 1
        },
        "task": {"task": "modadd", "modulus": 7, "seed": 2},
        "train": {"steps": 3, "lr": 0.01, "batch_size": 4, "seed": 3}
    }"#;

    fn with(edit: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(CONFIG).unwrap();
        edit(&mut v);
        v.to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::parse(CONFIG).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("runs/default"));
        assert_eq!(cfg.model.as_ref().unwrap().lax.gate, GateVariant::Identity);
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_reported_with_its_path() {
        let text = with(|v| {
            v["model"].as_object_mut().unwrap().remove("depth");
        });
        let e = RunConfig::parse(&text).unwrap_err();
        assert_eq!(e.path, "model.depth");
        assert!(e.to_string().starts_with("model.depth: missing field `depth`"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse(&with(|v| v["train"]["lr_decay"] = 1.into())).unwrap_err();
        assert_eq!(e.path, "train.lr_decay");
        let e = RunConfig::parse(&with(|v| v["model"]["block"]["qkv"]["rnak"] = 1.into())).unwrap_err();
        assert_eq!(e.path, "model.block.qkv.rnak");
    }

    #[test]
    fn seed_and_lr_have_no_defaults() {
        for key in ["seed", "lr"] {
            let e = RunConfig::parse(&with(|v| {
                v["train"].as_object_mut().unwrap().remove(key);
            }))
            .unwrap_err();
            assert_eq!(e.path, format!("train.{key}"));
        }
    }

    #[test]
    fn report_only_configs_need_no_experiment() {
        let cfg = RunConfig::parse(&with(|v| {
            let o = v.as_object_mut().unwrap();
            o.remove("task");
            o.remove("train");
        }))
        .unwrap();
        assert_eq!(cfg.experiment().unwrap_err().to_string(), "missing field `task`");
    }

    #[test]
    fn invalid_enum_values_are_rejected() {
        let e = RunConfig::parse(&with(|v| v["model"]["lax"]["gate"] = "cubic".into())).unwrap_err();
        assert_eq!(e.path, "model.lax.gate");
    }

    #[test]
    fn vision_configs_default_to_tensor_gates() {
        let text = with(|v| {
            v["model"]["input"] = serde_json::json!({"type": "patches", "patch_dim": 4, "num_patches": 3});
        });
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.model.unwrap().lax.gate, GateVariant::Tensor);
        assert_eq!(default_gate(true, true), GateVariant::Identity);
    }

    #[test]
    fn output_dir_must_stay_relative() {
        for bad in ["/tmp/x", "../x", "a/../../b"] {
            let e = RunConfig::parse(&with(|v| v["output_dir"] = bad.into())).unwrap_err();
            assert_eq!(e.path, "output_dir", "{bad}");
        }
    }

    #[test]
    fn semantic_train_errors_name_the_section() {
        let e = RunConfig::parse(&with(|v| v["train"]["warmup"] = 10.into())).unwrap_err();
        assert_eq!(e.path, "train");
    }
}
