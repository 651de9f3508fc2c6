//! Run configuration: one JSON document covering networks, training, losses,
//! bank layout, and data paths, with dotted-key command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use hgd::losses::LossConfig;
use hgd::memory::BankLayout;
use hgd::networks::NetConfig;
use hgd::trainer::TrainConfig;
use hgd::{HgdError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train_manifest: String,
    pub test_manifest: String,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths { train_manifest: String::new(), test_manifest: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub bank: BankLayout,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::toy(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            bank: BankLayout::ixi_default(),
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.bank.validate()?;
        Ok(())
    }

    /// Writes the fully resolved configuration next to the run artifacts.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Sets `doc[a][b][c] = value` for override key "a.b.c", creating
/// intermediate objects as needed. The value text is parsed as JSON when
/// possible and kept as a string otherwise.
fn apply_override(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HgdError::Config(format!("bad override key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(HgdError::Config(format!(
                "override {key:?} descends through a non-object"
            )));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    match node {
        serde_json::Value::Object(map) => {
            map.insert(parts[parts.len() - 1].to_string(), parsed);
            Ok(())
        }
        _ => Err(HgdError::Config(format!(
            "override {key:?} descends through a non-object"
        ))),
    }
}

/// Loads the config file and applies `key=value` overrides; unknown keys in
/// either source are rejected when the merged document is deserialized.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HgdError::Load(format!("{}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    if !doc.is_object() {
        return Err(HgdError::Config("config root must be a JSON object".into()));
    }
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| HgdError::Config(format!("override {ov:?} is not key=value")))?;
        apply_override(&mut doc, key, value)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}
