//! Experiment configuration: flat-sectioned TOML with typed values, dotted
//! `--set` overrides, and strict unknown-key rejection.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use gia_core::attack::{AttackConfig, Dist};
use gia_core::ctp::CtpVariant;
use gia_core::data::DatasetSpec;
use gia_core::fl::ClientConfig;
use gia_core::nn::{FeatureBox, LossKind};

#[derive(Debug, Deserialize)]
pub struct FileConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub loss: LossSection,
    pub client: ClientConfig,
    pub attack: AttackSection,
    pub ctp: Option<CtpSection>,
    pub run: RunSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Deserialize)]
pub struct ModelSection {
    pub attack_neurons: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Deserialize)]
pub struct LossSection {
    pub kind: LossKind,
}

#[derive(Debug, Deserialize)]
pub struct AttackSection {
    pub direction_distribution: Dist,
    pub downstream_distribution: Dist,
    #[serde(default = "default_span_tolerance")]
    pub span_tolerance: f64,
    #[serde(default = "default_fedavg_threshold")]
    pub fedavg_residual_threshold: f64,
    #[serde(default = "default_min_probes")]
    pub min_probes_per_interval: usize,
    #[serde(default = "default_correctness")]
    pub correctness_tolerance: f64,
    pub seed: u64,
}

fn default_span_tolerance() -> f64 {
    1e-8
}
fn default_fedavg_threshold() -> f64 {
    1e-3
}
fn default_min_probes() -> usize {
    3
}
fn default_correctness() -> f64 {
    1e-9
}

impl AttackSection {
    /// The feature box is a placeholder here; every run replaces it with the
    /// loaded dataset's bounds.
    pub fn to_config(&self) -> AttackConfig {
        AttackConfig {
            direction_distribution: self.direction_distribution,
            downstream_distribution: self.downstream_distribution,
            feature_box: FeatureBox(vec![(0.0, 1.0)]),
            span_tolerance: self.span_tolerance,
            fedavg_residual_threshold: self.fedavg_residual_threshold,
            min_probes_per_interval: self.min_probes_per_interval,
            correctness_tolerance: self.correctness_tolerance,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CtpSection {
    pub variant: CtpVariant,
    /// Explicit stopping width; derived from the true projection gap by the
    /// variant's convention when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct RunSection {
    pub rounds_budget: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_outdir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Deserialize)]
pub struct SweepSection {
    #[serde(default)]
    pub local_epochs: Vec<usize>,
    #[serde(default)]
    pub local_batch_size: Vec<usize>,
    #[serde(default)]
    pub methods: Vec<String>,
}

/// Keys every section accepts; anything else is rejected with its path.
const SECTIONS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "source",
            "dim",
            "batch_size",
            "seed",
            "rule",
            "classes",
            "feature_distribution",
            "path",
            "feature_columns",
            "target_column",
            "task",
            "scaling",
            "target_standardize",
        ],
    ),
    ("model", &["attack_neurons", "hidden"]),
    ("loss", &["kind"]),
    ("client", &["mode", "local_epochs", "local_batch_size", "learning_rate", "shuffle_seed"]),
    (
        "attack",
        &[
            "direction_distribution",
            "downstream_distribution",
            "span_tolerance",
            "fedavg_residual_threshold",
            "min_probes_per_interval",
            "correctness_tolerance",
            "seed",
        ],
    ),
    ("ctp", &["variant", "epsilon"]),
    ("run", &["rounds_budget", "seeds", "outdir", "workers"]),
    ("sweep", &["local_epochs", "local_batch_size", "methods"]),
];

const DIST_KEYS: &[&str] = &["kind", "mean", "std", "lo", "hi"];

fn reject_unknown_keys(doc: &toml::Value) -> Result<()> {
    let table = doc.as_table().ok_or_else(|| anyhow!("config root must be a table"))?;
    for (section, value) in table {
        let allowed = SECTIONS
            .iter()
            .find(|(name, _)| name == section)
            .map(|(_, keys)| *keys)
            .ok_or_else(|| anyhow!("unknown section `{section}`"))?;
        let Some(entries) = value.as_table() else {
            bail!("section `{section}` must be a table");
        };
        for (key, sub) in entries {
            if !allowed.contains(&key.as_str()) {
                bail!("unknown key `{section}.{key}`");
            }
            if key.ends_with("_distribution") {
                let Some(dist) = sub.as_table() else {
                    bail!("`{section}.{key}` must be a table");
                };
                for dk in dist.keys() {
                    if !DIST_KEYS.contains(&dk.as_str()) {
                        bail!("unknown key `{section}.{key}.{dk}`");
                    }
                }
            }
        }
    }
    Ok(())
}

/// Applies one `section.key=value` override onto the document. The value is
/// parsed as TOML (so numbers, booleans, and arrays work); anything that does
/// not parse becomes a string.
pub(crate) fn apply_set(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set needs KEY=VALUE, got `{spec}`"))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad --set path `{path}`");
    }
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set path `{path}` crosses a non-table"))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| anyhow!("--set path `{path}` crosses a non-table"))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Loads, overrides, and validates a config file; returns the parsed config
/// and the resolved document for the effective-config record.
pub fn load_config(
    path: &Path,
    sets: &[String],
    seed_override: Option<u64>,
    outdir_override: Option<&Path>,
    workers_override: Option<usize>,
) -> Result<(FileConfig, toml::Value)> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut doc: toml::Value =
        body.parse().with_context(|| format!("config {} is not valid TOML", path.display()))?;

    for spec in sets {
        apply_set(&mut doc, spec)?;
    }
    if let Some(seed) = seed_override {
        apply_set(&mut doc, &format!("run.seeds=[{seed}]"))?;
    }
    if let Some(dir) = outdir_override {
        apply_set(&mut doc, &format!("run.outdir=\"{}\"", dir.display()))?;
    }
    if let Some(w) = workers_override {
        apply_set(&mut doc, &format!("run.workers={w}"))?;
    }

    reject_unknown_keys(&doc)?;
    let cfg: FileConfig = doc
        .clone()
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;

    cfg.attack.to_config().validate().map_err(|e| anyhow!("attack: {e}"))?;
    if cfg.run.seeds.is_empty() {
        bail!("run.seeds must not be empty");
    }
    if cfg.run.rounds_budget == 0 {
        bail!("run.rounds_budget must be at least 1");
    }
    Ok((cfg, doc))
}

/// Resolved worker count: flag > config > `GIA_LAB_WORKERS` > automatic.
pub fn resolve_workers(cfg: &RunSection) -> usize {
    if let Some(w) = cfg.workers {
        return w;
    }
    std::env::var("GIA_LAB_WORKERS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

pub fn parse_method(name: &str) -> Result<gia_core::eval::Method> {
    use gia_core::eval::Method;
    Ok(match name {
        "vgia" => Method::Vgia,
        "ctp_lt" => Method::Ctp { variant: CtpVariant::EpsLt, epsilon: None },
        "ctp_eq" => Method::Ctp { variant: CtpVariant::EpsEq, epsilon: None },
        "ctp_gt" => Method::Ctp { variant: CtpVariant::EpsGt, epsilon: None },
        other => bail!("unknown method `{other}` (expected vgia, ctp_lt, ctp_eq, ctp_gt)"),
    })
}
