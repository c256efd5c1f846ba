//! Run configuration: embedded defaults, an optional TOML file layered on
//! top, then dotted `key=value` overrides. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{gen_synthetic, load_manifest, Dataset, Split, SynthConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::MergeConfig;
use crate::objectives::LossWeights;
use crate::retrieval::FusionWeights;

pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
    pub eval_seed: u64,
    pub eval_videos: usize,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub qs: Vec<usize>,
    pub fusion: FusionWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub full_batch: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub merge: MergeConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Recursively overlays `top` onto `base`.
fn merge_tables(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value`. Intermediate tables are created so that a
/// misspelt key surfaces as an unknown field during validation.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into non-table {p:?}")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(DEFAULTS_TOML, "defaults")?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            merge_tables(&mut table, parse_table(&text, &path.display().to_string())?);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn defaults() -> Self {
        Self::load(None, &[]).expect("embedded defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.merge.validate()?;
        self.retrieval.fusion.validate()?;
        self.data.synth.validate()?;
        let t = &self.train;
        let mut problems = Vec::new();
        if t.batch_size < 1 {
            problems.push("train.batch_size must be at least 1".to_string());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            problems.push("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            problems.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if t.adam_eps <= 0.0 {
            problems.push("train.adam_eps must be positive".into());
        }
        if t.eval_every < 1 {
            problems.push("train.eval_every must be at least 1".into());
        }
        if self.retrieval.qs.is_empty() || self.retrieval.qs.contains(&0) {
            problems.push("retrieval.qs must be non-empty positive cutoffs".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Synthetic held-out split matching the training generator.
    pub fn eval_synth(&self) -> SynthConfig {
        SynthConfig {
            n_videos: self.data.eval_videos,
            seed: self.data.eval_seed,
            split: Split::Eval,
            ..self.data.synth.clone()
        }
    }

    pub fn load_train(&self) -> Result<Dataset> {
        match &self.data.train_manifest {
            Some(p) => load_manifest(p),
            None => Ok(gen_synthetic(&self.data.synth)?.dataset),
        }
    }

    pub fn load_eval(&self) -> Result<Dataset> {
        match &self.data.eval_manifest {
            Some(p) => load_manifest(p),
            None => Ok(gen_synthetic(&self.eval_synth())?.dataset),
        }
    }
}
