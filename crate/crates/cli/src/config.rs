//! JSON run configuration and its merge with command-line flags.

use std::path::Path;

use conmh::dataset::SyntheticParams;
use conmh::model::ModelConfig;
use conmh::retrieval::EvalConfig;
use conmh::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::exit::CliError;

/// Everything a command may read from `--config`. Each section is optional.
///
/// `model` is a partial object laid over the named preset, so
/// `{"preset": "desk", "model": {"enc_depth": 3}}` changes a single field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<SyntheticParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Map<String, Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(TrainConfig::desk)
    }

    pub fn eval(&self) -> EvalConfig {
        self.eval.clone().unwrap_or_default()
    }

    pub fn data(&self) -> SyntheticParams {
        self.data.clone().unwrap_or_default()
    }

    /// Named preset, then the file's overrides, then `bits` if given. The
    /// feature width and frame count always come from the data.
    pub fn model(
        &self,
        preset: Option<&str>,
        bits: Option<usize>,
        dim: usize,
        frames: usize,
    ) -> Result<ModelConfig, CliError> {
        let name = preset.or(self.preset.as_deref()).unwrap_or("desk");
        let mut cfg = self.patched(ModelConfig::preset(name, bits.unwrap_or(16), dim, frames)?)?;
        if let Some(b) = bits {
            cfg.code_length = b;
        }
        cfg.feature_dim = dim;
        cfg.max_frames = frames;
        cfg.validate()?;
        Ok(cfg)
    }

    fn patched(&self, base: ModelConfig) -> Result<ModelConfig, CliError> {
        let Some(patch) = &self.model else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base).expect("model config serializes");
        let obj = value.as_object_mut().expect("model config is an object");
        for (k, v) in patch {
            if !obj.contains_key(k) {
                return Err(CliError::Usage(format!("unknown model field {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("model config: {e}")))
    }
}

/// Parses a config document, or the `config` member of a run manifest so
/// that a recorded run can be replayed. Shared with the fuzz targets.
pub fn parse_config(text: &str) -> Result<FileConfig, serde_json::Error> {
    let mut value: Value = serde_json::from_str(text)?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("config_hash") {
            value = obj.remove("config").unwrap_or(Value::Null);
        }
    }
    serde_json::from_value(value)
}

/// Lays every field of `model` into the patch so that the recorded config
/// reproduces the run regardless of preset defaults.
pub fn resolved(mut file: FileConfig, model: Option<&ModelConfig>) -> FileConfig {
    if let Some(m) = model {
        file.preset = None;
        let value = serde_json::to_value(m).expect("model config serializes");
        file.model = value.as_object().cloned();
    }
    file
}

/// Hex SHA-256 of the canonical JSON encoding.
pub fn config_hash(cfg: &FileConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_patch_overrides_one_field() {
        let cfg = parse_config(r#"{"preset": "desk", "model": {"enc_depth": 3}}"#).unwrap();
        let m = cfg.model(None, Some(16), 32, 16).unwrap();
        assert_eq!(m.enc_depth, 3);
        assert_eq!(m.enc_width, ModelConfig::preset("desk", 16, 32, 16).unwrap().enc_width);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(parse_config(r#"{"trian": {}}"#).is_err());
        let cfg = parse_config(r#"{"model": {"depth": 3}}"#).unwrap();
        assert!(matches!(cfg.model(None, Some(16), 32, 16), Err(CliError::Usage(_))));
    }

    #[test]
    fn resolved_config_round_trips_the_model() {
        let file = parse_config(r#"{"preset": "mini", "model": {"dec_depth": 2}}"#).unwrap();
        let m = file.model(None, Some(32), 8, 10).unwrap();
        let again = resolved(file, Some(&m));
        let text = serde_json::to_string(&again).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back.model(None, None, 8, 10).unwrap(), m);
        assert_eq!(config_hash(&back), config_hash(&again));
    }

    #[test]
    fn manifests_are_accepted_as_configs() {
        let text = r#"{"version": 1, "config_hash": "x", "config": {"preset": "mini"}}"#;
        assert_eq!(parse_config(text).unwrap().preset.as_deref(), Some("mini"));
        assert!(parse_config("[1, 2]").is_err());
    }
}
