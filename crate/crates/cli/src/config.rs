//! Experiment configuration: JSON files layered over defaults, then dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use usbd_core::adapt::AdaptConfig;
use usbd_core::datagen::{Regime, ShiftSpec};
use usbd_core::distill::DistillConfig;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the domains come from. Exactly one of the two must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub generated: Option<GeneratedPair>,
    pub dataset: Option<DatasetPair>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generated: Some(GeneratedPair::default()),
            dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratedPair {
    pub source: ShiftSpec,
    pub target: ShiftSpec,
}

impl Default for GeneratedPair {
    fn default() -> Self {
        GeneratedPair {
            source: ShiftSpec {
                regime: Regime::Clustered,
                seed: 100,
                ..ShiftSpec::default()
            },
            target: ShiftSpec {
                regime: Regime::Chain,
                seed: 200,
                ..ShiftSpec::default()
            },
        }
    }
}

/// TUDataset directories and name prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetPair {
    pub source_dir: PathBuf,
    pub source_name: String,
    pub target_dir: PathBuf,
    pub target_name: String,
}

impl Default for DatasetPair {
    fn default() -> Self {
        DatasetPair {
            source_dir: PathBuf::from("source"),
            source_name: "SOURCE".into(),
            target_dir: PathBuf::from("target"),
            target_name: "TARGET".into(),
        }
    }
}

/// Encoder width shared by the distillation proxy and the adapted proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden: 32,
            layers: 2,
        }
    }
}

/// The four ablations. Each one is a pure config change.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_sem: bool,
    pub no_span: bool,
    pub no_div: bool,
    pub uniform_weights: bool,
}

impl Ablation {
    pub fn variant(&self) -> String {
        let mut parts = Vec::new();
        if self.no_sem {
            parts.push("w/o SE");
        }
        if self.no_span {
            parts.push("w/o SP");
        }
        if self.no_div {
            parts.push("w/o DI");
        }
        if self.uniform_weights {
            parts.push("w/o AD");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(", ")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(skip_serializing_if = "is_empty_path")]
    pub out: PathBuf,
    pub data: DataConfig,
    pub gnn: GnnConfig,
    pub ablation: Ablation,
    pub distill: DistillConfig,
    pub adapt: AdaptConfig,
}

fn is_empty_path(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            gnn: GnnConfig::default(),
            ablation: Ablation::default(),
            distill: DistillConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.data.generated, &self.data.dataset) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(CliError::Config(
                    "exactly one of data.generated and data.dataset must be set".into(),
                ))
            }
        }
        if self.gnn.hidden == 0 || self.gnn.layers == 0 {
            return Err(CliError::Config("gnn.hidden and gnn.layers must be positive".into()));
        }
        self.resolved_distill().validate()?;
        self.resolved_adapt().validate()?;
        Ok(())
    }

    /// Distillation settings with the seed, encoder width and ablations applied.
    pub fn resolved_distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        d.seed = self.seed;
        d.inner.seed = self.seed;
        d.hidden = self.gnn.hidden;
        d.layers = self.gnn.layers;
        if self.ablation.no_sem {
            d.no_sem = true;
        }
        if self.ablation.no_span {
            d.lambda1 = 0.0;
        }
        if self.ablation.no_div {
            d.lambda2 = 0.0;
        }
        d
    }

    pub fn resolved_adapt(&self) -> AdaptConfig {
        let mut a = self.adapt.clone();
        a.seed = self.seed;
        a.proxy.seed = self.seed;
        a.hidden = self.gnn.hidden;
        a.layers = self.gnn.layers;
        if self.ablation.uniform_weights {
            a.uniform_weights = true;
        }
        a
    }

    /// The config as written into reports: every derived field filled in.
    pub fn resolved(&self) -> ExperimentConfig {
        ExperimentConfig {
            distill: self.resolved_distill(),
            adapt: self.resolved_adapt(),
            ..self.clone()
        }
    }
}

/// Copies `patch` onto `base`, refusing keys the defaults do not know.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, value) in p {
                let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match b.get_mut(key) {
                    Some(slot) => merge(slot, value, &here)?,
                    None => return Err(CliError::Config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the leaf at a dotted `path`, which must exist in `root`.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(key)
                .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?,
            _ => return Err(CliError::Config(format!("`{path}` does not name a config leaf"))),
        };
    }
    if slot.is_object() {
        return Err(CliError::Config(format!("`{path}` is a section, not a leaf")));
    }
    *slot = override_value(raw);
    Ok(())
}

/// Defaults, then the file at `path` (if any), then `overrides` in order.
pub fn load(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, CliError> {
    let mut value = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Sections such as `data.dataset` default to null; a file choosing the
        // dataset route must be able to clear `data.generated`.
        merge_data_route(&mut value, &patch);
        merge(&mut value, &patch, "")?;
    }
    for (key, raw) in overrides {
        set_path(&mut value, key, raw)?;
    }
    let config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn merge_data_route(value: &mut Value, patch: &Value) {
    let Some(data) = patch.get("data") else { return };
    if let Some(dataset) = data.get("dataset").filter(|d| !d.is_null()) {
        let mut full = serde_json::to_value(DatasetPair::default()).expect("plain struct");
        let _ = merge(&mut full, dataset, "data.dataset");
        value["data"]["dataset"] = full;
        if data.get("generated").is_none() {
            value["data"]["generated"] = Value::Null;
        }
    }
}

/// Splits dotted `--a.b value` / `--a.b=value` flags out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|name| name.split('=').next().is_some_and(|n| n.contains('.')));
        match dotted {
            Some(name) => match name.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = iter
                        .next()
                        .ok_or_else(|| CliError::Config(format!("--{name} needs a value")))?;
                    overrides.push((name.to_string(), v));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}
