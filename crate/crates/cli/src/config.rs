//! Project configuration: one TOML or JSON file plus `SFD_` environment
//! overrides. Nested keys are addressed with a double underscore, so
//! `SFD_LOOP__SEED=7` sets `loop.seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sfd_core::planner::EndpointConfig;
use sfd_core::sensor::CameraSpec;
use sfd_core::world::DT;

pub const ENV_PREFIX: &str = "SFD_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub datasets: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopDefaults {
    pub dt: f64,
    pub seed: u64,
    pub max_ticks: Option<u32>,
}

impl Default for LoopDefaults {
    fn default() -> Self {
        Self { dt: DT, seed: 0, max_ticks: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub paths: Paths,
    pub camera: CameraSpec,
    #[serde(rename = "loop")]
    pub loop_defaults: LoopDefaults,
    /// Named planner endpoints, selected with `--endpoint NAME`.
    pub endpoints: BTreeMap<String, EndpointConfig>,
    /// Extra scenario names mapped to scenario JSON files.
    pub scenarios: BTreeMap<String, PathBuf>,
}

fn parse_table(text: &str, path: &Path) -> Result<toml::Table> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match toml::Value::try_from(v)? {
            toml::Value::Table(t) => Ok(t),
            _ => bail!("top level must be an object"),
        }
    } else {
        Ok(text.parse::<toml::Table>()?)
    }
}

/// Parses an override as a TOML scalar, falling back to a plain string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<String> = key.split("__").map(str::to_ascii_lowercase).collect();
    if parts.iter().any(String::is_empty) {
        bail!("malformed override {ENV_PREFIX}{key}");
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .with_context(|| format!("{ENV_PREFIX}{key}: `{p}` is not a table"))?;
    }
    node.insert(last.clone(), env_value(raw));
    Ok(())
}

impl ProjectConfig {
    /// Loads `path` (or defaults when absent), applies overrides from `env`,
    /// and checks that every referenced path exists.
    pub fn load_with_env<I>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_table(&text, p).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        overrides.sort();
        for (k, v) in &overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: ProjectConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dir) in [
            ("paths.datasets", &self.paths.datasets),
            ("paths.checkpoints", &self.paths.checkpoints),
            ("paths.reports", &self.paths.reports),
        ] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    bail!("{name}: {} is not a directory", d.display());
                }
            }
        }
        for (name, file) in &self.scenarios {
            if !file.is_file() {
                bail!("scenarios.{name}: {} does not exist", file.display());
            }
        }
        self.camera.validate()?;
        if !(self.loop_defaults.dt.is_finite() && self.loop_defaults.dt > 0.0) {
            bail!("loop.dt must be positive");
        }
        Ok(())
    }

    /// Resolves a scenario reference: a configured name, `builtin:NAME`, or a path.
    pub fn scenario_ref(&self, spec: &str) -> String {
        match self.scenarios.get(spec) {
            Some(p) => p.display().to_string(),
            None => spec.to_string(),
        }
    }

    pub fn endpoint(&self, name: &str) -> Result<EndpointConfig> {
        self.endpoints.get(name).cloned().with_context(|| format!("no endpoint named `{name}` in the config"))
    }
}

/// Joins a relative file name onto a configured directory.
pub fn resolve(dir: Option<&Path>, file: &Path) -> PathBuf {
    match dir {
        Some(d) if file.is_relative() => d.join(file),
        _ => file.to_path_buf(),
    }
}
