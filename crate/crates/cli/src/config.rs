//! The single run configuration file and its command-line overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use camo_core::attack::RunConfig;
use camo_core::eval::judge::HttpJudgeConfig;
use camo_core::scene::GridSpec;
use serde::{Deserialize, Serialize};

/// Version of the TOML schema documented in `docs/config.md`.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    /// Caps the iterations of attack runs (smoke runs, sweeps).
    pub max_iterations: Option<u64>,
    pub paths: Paths,
    pub victim: VictimConfig,
    pub dataset: GridSpec,
    pub run: RunConfig,
    pub eval: EvalConfig,
    pub judge: JudgeConfig,
    pub sweep: SweepConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            max_iterations: None,
            paths: Paths::default(),
            victim: VictimConfig::default(),
            dataset: GridSpec::default(),
            run: RunConfig::default(),
            eval: EvalConfig::default(),
            judge: JudgeConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training dataset directory (or its manifest.jsonl).
    pub manifest: Option<PathBuf>,
    /// Held-out dataset for evaluation.
    pub eval_manifest: Option<PathBuf>,
    /// Parent directory for run directories.
    pub out_dir: Option<PathBuf>,
    /// Benign paint; the built-in silver livery when absent.
    pub benign_texture: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    pub name: String,
    pub weights: Option<PathBuf>,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            name: "surrogate".into(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    ClosedSet,
    OpenText,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    None,
    Mock,
    Http,
}

/// Judge settings. The endpoint, key and model name come from the
/// environment only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub min_interval_ms: u64,
    pub max_concurrency: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        let d = HttpJudgeConfig::new("", "");
        Self {
            kind: JudgeKind::None,
            timeout_secs: d.timeout.as_secs_f64(),
            max_attempts: d.max_attempts,
            initial_backoff_ms: d.initial_backoff.as_millis() as u64,
            max_backoff_ms: d.max_backoff.as_millis() as u64,
            min_interval_ms: d.min_interval.as_millis() as u64,
            max_concurrency: d.max_concurrency,
        }
    }
}

impl JudgeConfig {
    pub fn http(&self) -> Result<HttpJudgeConfig> {
        let mut c = HttpJudgeConfig::from_env()?;
        c.timeout = Duration::from_secs_f64(self.timeout_secs);
        c.max_attempts = self.max_attempts;
        c.initial_backoff = Duration::from_millis(self.initial_backoff_ms);
        c.max_backoff = Duration::from_millis(self.max_backoff_ms);
        c.min_interval = Duration::from_millis(self.min_interval_ms);
        c.max_concurrency = self.max_concurrency;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Cells trained at once.
    pub parallelism: usize,
    /// (encoder, projector) weight pairs.
    pub alpha: Vec<(f64, f64)>,
    pub delta: Vec<f64>,
    pub lambda_smooth: Vec<f64>,
    /// Pitch ratios for 22.5 / 45 / 67.5 degrees.
    pub ratio: Vec<[f64; 3]>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parallelism: 1,
            alpha: Vec::new(),
            delta: Vec::new(),
            lambda_smooth: Vec::new(),
            ratio: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.delta.is_empty() && self.lambda_smooth.is_empty() && self.ratio.is_empty()
    }
}

/// One `key=value` override. Keys are dotted paths into the TOML document;
/// values are TOML literals, falling back to a plain string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub key: String,
    pub value: String,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not key=value"))?;
        let key = k.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("`{k}` is not a dotted key"));
        }
        Ok(Self {
            key: key.to_string(),
            value: v.trim().to_string(),
        })
    }
}

fn parse_literal(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, o: &Override) -> Result<()> {
    let mut parts: Vec<&str> = o.key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{}`: `{p}` is not a table", o.key))?;
    }
    table.insert(last.to_string(), parse_literal(&o.value));
    Ok(())
}

/// Reads `path` (defaults when absent), applies `overrides` in order and
/// deserializes the result. Unknown keys are errors.
pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<CliConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: CliConfig = toml::Value::Table(doc)
        .try_into()
        .context("invalid configuration")?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        bail!(
            "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
            cfg.schema_version
        );
    }
    cfg.run.validate()?;
    Ok(cfg)
}

impl CliConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn require<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| anyhow!("missing field `{field}`: set it in the config file or with --set {field}=..."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = CliConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: CliConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o: Vec<Override> = ["run.learning_rate=0.05", "run.attack.delta=0.5", "paths.manifest=data/train"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let cfg = load(None, &o).unwrap();
        assert_eq!(cfg.run.learning_rate, 0.05);
        assert_eq!(cfg.run.attack.delta, 0.5);
        assert_eq!(cfg.paths.manifest, Some(PathBuf::from("data/train")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o: Override = "run.learning_rat=0.05".parse().unwrap();
        assert!(load(None, &[o]).is_err());
    }

    #[test]
    fn malformed_override_is_rejected() {
        assert!("run.lr".parse::<Override>().is_err());
        assert!("run..lr=1".parse::<Override>().is_err());
    }
}
