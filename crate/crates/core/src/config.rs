//! Run configuration: one JSON document holding every stage's settings.
//!
//! Unknown keys are rejected at every level. Any leaf can be overridden
//! with a dotted `key=value` pair (`sgd.max_iterations=500`); the value is
//! parsed as JSON and falls back to a plain string.
//!
//! All randomness derives from `rng_seed`. Stage `name` uses
//! `splitmix64(rng_seed ^ fnv1a64(name))`, so a stage can be rerun alone
//! and still draw the same numbers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::MatchingConfig;
use crate::net::SgdConfig;
use crate::pseudolabel::{PseudoLabelConfig, SoftmaxConfig};
use crate::sampling::{MarginConfig, SamplerConfig};
use crate::ssbr::SsbrConfig;
use crate::synthetic::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            hidden_dims: vec![64],
            embedding_dim: 32,
        }
    }
}

impl EmbedderConfig {
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Retrieval depth for the ARE metrics.
    pub top_k: usize,
    /// Retrieved lesions must come from another patient.
    pub exclude_same_patient: bool,
    pub kmeans_restarts: usize,
    /// Inter-study thresholds swept for the precision-recall curve.
    pub t2_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 5,
            exclude_same_patient: true,
            kmeans_restarts: 10,
            t2_sweep: (3..=21).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding every stage's inputs and outputs.
    pub work_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            work_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub synthetic: SyntheticConfig,
    pub sampler: SamplerConfig,
    pub margins: MarginConfig,
    pub sgd: SgdConfig,
    pub ssbr: SsbrConfig,
    pub pseudolabel: PseudoLabelConfig,
    pub softmax: SoftmaxConfig,
    pub embedder: EmbedderConfig,
    pub matching: MatchingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.sampler.validate()?;
        self.margins.validate()?;
        self.sgd.validate()?;
        self.ssbr.validate()?;
        self.matching.validate()?;
        if self.pseudolabel.k == 0 || self.eval.top_k == 0 {
            return Err(Error::Config("k and eval.top_k must be positive".into()));
        }
        if self.eval.t2_sweep.iter().any(|t| *t <= self.matching.t1) {
            return Err(Error::Config("every t2 in eval.t2_sweep must exceed matching.t1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies dotted `key=value` overrides and re-validates the schema.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut doc, key, value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Seed of the synthetic generator: the explicit one when configured,
    /// otherwise derived from the run seed.
    pub fn synthetic_config(&self) -> SyntheticConfig {
        let mut s = self.synthetic.clone();
        s.rng_seed = Some(s.rng_seed.unwrap_or_else(|| stage_seed(self.rng_seed, "gen")));
        s
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::Config("empty override key".into()))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-stage seed derived from the run seed and the stage name.
pub fn stage_seed(rng_seed: u64, stage: &str) -> u64 {
    splitmix64(rng_seed ^ fnv1a64(stage.as_bytes()))
}
