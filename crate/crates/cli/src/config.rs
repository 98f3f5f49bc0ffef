//! Pipeline configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ebr_core::corpus::EventLogSchema;
use ebr_core::eval::EvalSplit;
use ebr_core::intent::IntentConfig;
use ebr_core::item2vec::Item2VecConfig;
use ebr_core::mf::MfConfig;
use ebr_core::partition::KMeansConfig;
use ebr_core::retrieval::Schedule;
use ebr_core::seqrec::{EncoderConfig, PromptKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// `UserID::MovieID::Rating::Timestamp` lines.
    Movielens,
    /// Delimited text with a header row.
    EventLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub path: PathBuf,
    #[serde(default)]
    pub min_item_freq: usize,
    #[serde(default)]
    pub min_user_freq: usize,
    /// Column mapping, event logs only.
    #[serde(default)]
    pub schema: Option<EventLogSchema>,
    /// Positive-row predicate such as `click=1,tab=1`, event logs only.
    #[serde(default)]
    pub filter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSpec {
    pub mf: bool,
    pub global: bool,
    /// One model per within-cluster negative ratio; the best on validation
    /// is marked as selected.
    pub mixed_ratios: Vec<f64>,
    pub within: bool,
    /// Within-cluster models with per-cluster task prompts.
    pub prompts: Vec<PromptKind>,
    /// Model whose prompt-free encoding feeds the intent head.
    pub intent_backbone: String,
}

impl Default for MethodsSpec {
    fn default() -> Self {
        Self {
            mf: true,
            global: true,
            mixed_ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            within: true,
            prompts: vec![PromptKind::Hadamard],
            intent_backbone: "global".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSpec {
    /// Fixed quota exponent; when absent it is chosen on validation.
    pub alpha: Option<f64>,
    pub alpha_grid: Vec<f64>,
    /// Model served by the `retrieve` stage; defaults to the last prompted
    /// model, else the within-cluster model.
    pub method: Option<String>,
    /// Candidates per user.
    pub m: usize,
    pub schedule: Schedule,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        Self { alpha: None, alpha_grid: vec![0.5, 1.0, 2.0, 4.0], method: None, m: 50, schedule: Schedule::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub split: EvalSplit,
    pub ms: Vec<usize>,
    pub within_ms: Vec<usize>,
    /// Cutoff for validation-based choices (quota exponent, mix ratio).
    pub selection_m: usize,
    /// Length of one throughput window in seconds; 0 skips measurement.
    pub throughput_window_secs: f64,
    pub throughput_windows: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { split: EvalSplit::Test, ms: vec![20, 50], within_ms: vec![5, 10], selection_m: 20, throughput_window_secs: 0.0, throughput_windows: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub artifact_dir: PathBuf,
    /// Seeds every stage; per-section `seed` keys are overwritten by it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub item2vec: Item2VecConfig,
    #[serde(default)]
    pub kmeans: KMeansConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mf: MfConfig,
    #[serde(default)]
    pub intent: IntentConfig,
    #[serde(default)]
    pub methods: MethodsSpec,
    #[serde(default)]
    pub retrieval: RetrievalSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_seed() -> u64 {
    42
}

/// Sets `a.b.c = value` inside a TOML table; the value is parsed as TOML
/// and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    ensure!(path.iter().all(|p| !p.is_empty()), "override key {key:?} has an empty segment");
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = doc;
    for seg in &path[..path.len() - 1] {
        let entry = table.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {seg:?} is not a table"),
        };
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Reads the file, applies overrides and the seed, resolves relative
    /// paths against the config file's directory, and validates.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut doc: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(doc).try_into().with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base, seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        for p in [&mut self.artifact_dir, &mut self.dataset.path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let s = self.seed;
        self.item2vec.seed = s;
        self.kmeans.seed = s;
        self.encoder.seed = s;
        self.mf.seed = s;
        self.intent.seed = s;
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        ensure!(d.path.is_file(), "dataset file {} does not exist", d.path.display());
        match d.kind {
            DatasetKind::Movielens => ensure!(d.schema.is_none() && d.filter.is_none(), "dataset.schema and dataset.filter apply to event logs only"),
            DatasetKind::EventLog => ensure!(d.schema.is_some(), "event_log datasets need a [dataset.schema] table"),
        }
        self.item2vec.validate()?;
        self.encoder.validate()?;
        self.mf.validate()?;
        ensure!(self.kmeans.k >= 1, "kmeans.k must be >= 1");
        let m = &self.methods;
        ensure!(m.mixed_ratios.iter().all(|r| (0.0..=1.0).contains(r)), "methods.mixed_ratios must lie in [0, 1]");
        ensure!(!m.prompts.contains(&PromptKind::None), "methods.prompts lists prompt kinds (prefix, hadamard)");
        let e = &self.eval;
        ensure!(!e.ms.is_empty() && e.ms.iter().all(|&m| m > 0), "eval.ms needs positive cutoffs");
        ensure!(e.within_ms.iter().all(|&m| m > 0), "eval.within_ms needs positive cutoffs");
        ensure!(e.selection_m > 0, "eval.selection_m must be >= 1");
        ensure!(e.throughput_window_secs >= 0.0 && e.throughput_windows >= 1, "throughput window must be >= 0 s with >= 1 window");
        let r = &self.retrieval;
        ensure!(r.alpha.is_some() || !r.alpha_grid.is_empty(), "retrieval needs alpha or a non-empty alpha_grid");
        ensure!(r.alpha.into_iter().chain(r.alpha_grid.iter().copied()).all(|a| a >= 0.0 && a.is_finite()), "alpha values must be finite and >= 0");
        ensure!(r.m > 0, "retrieval.m must be >= 1");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values_and_create_tables() {
        let mut doc: toml::Table = toml::from_str("[encoder]\nepochs = 3\n").unwrap();
        apply_override(&mut doc, "encoder.epochs=7").unwrap();
        apply_override(&mut doc, "methods.mixed_ratios=[0.5]").unwrap();
        apply_override(&mut doc, "artifact_dir=out/x").unwrap();
        assert_eq!(doc["encoder"]["epochs"].as_integer(), Some(7));
        assert_eq!(doc["methods"]["mixed_ratios"].as_array().unwrap().len(), 1);
        assert_eq!(doc["artifact_dir"].as_str(), Some("out/x"));
        assert!(apply_override(&mut doc, "encoder.epochs.x=1").is_err());
        assert!(apply_override(&mut doc, "novalue").is_err());
    }
}
