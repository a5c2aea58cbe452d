//! Run configuration: one TOML section per module plus `[run]` for the
//! training budget and seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gridsim::TaskConfig;
use crate::policy::PolicyParams;
use crate::qfunc::NetworkParams;
use crate::replay::ReplayParams;
use crate::reward::RewardParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub seed: u64,
    /// Training budget in executed actions.
    pub train_steps: usize,
    pub eval_runs: usize,
    /// Steps per point on the learning curves.
    pub curve_window: usize,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            seed: 0,
            train_steps: 2000,
            eval_runs: 30,
            curve_window: 100,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationParams {
    /// Each seed trains all three variants.
    pub seeds: Vec<u64>,
}

impl Default for AblationParams {
    fn default() -> Self {
        AblationParams {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunParams,
    pub task: TaskConfig,
    pub reward: RewardParams,
    pub policy: PolicyParams,
    pub network: NetworkParams,
    pub replay: ReplayParams,
    pub ablation: AblationParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.reward.validate()?;
        self.policy.validate()?;
        self.network.validate()?;
        self.replay.validate()?;
        if self.network.batch_size > self.replay.capacity {
            return Err(Error::config(
                "network.batch_size cannot exceed replay.capacity",
            ));
        }
        if self.run.curve_window == 0 {
            return Err(Error::config("run.curve_window must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::with_overrides(&text, overrides)
    }

    /// Effective configuration as TOML; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key inside `table`, creating intermediate sections.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key {key:?}")));
    }
    let (last, sections) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {key:?}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}
