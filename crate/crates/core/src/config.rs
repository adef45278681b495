//! Run configuration and its flat `section.key=value` file format.
//!
//! Sub-seeds are not part of the file: every stage derives its seed from
//! `run.seed` and a purpose tag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::codec::CodecConfig;
use crate::diffusion::{AvdTrainConfig, SamplerOptions, ScheduleShape, UNetConfig};
use crate::error::{bad_config, Error, Result};
use crate::losses::TaaTrainConfig;
use crate::seed;
use crate::synth::{CorpusConfig, IndicatorRange};
use crate::taa::TaaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; `None` leaves the library default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
    /// DDIM step interval m.
    pub interval: usize,
    /// Step anchors are noised to before the reverse chain; `none` is the
    /// full depth.
    pub start: Option<usize>,
    /// Prompt contrast weight during generation; 1 turns it off.
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleSection {
    pub count: usize,
    /// Extra triples kept out of training for the equivariance check.
    pub heldout: usize,
    pub indicator: IndicatorRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub plots: bool,
    /// Also report Fréchet and prompt-alignment scores of the triples.
    pub generation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub unet: UNetConfig,
    pub diffusion: DiffusionSection,
    pub avd: AvdTrainConfig,
    pub triples: TripleSection,
    pub taa: TaaConfig,
    pub taa_train: TaaTrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                seed: 0,
                out: PathBuf::from("eqtaa-out"),
                threads: None,
            },
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            unet: UNetConfig {
                head_dim: 16,
                ..UNetConfig::default()
            },
            diffusion: DiffusionSection {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                shape: ScheduleShape::Linear,
                interval: 50,
                start: None,
                guidance: 1.0,
            },
            avd: AvdTrainConfig::default(),
            triples: TripleSection {
                count: 1800,
                heldout: 20,
                indicator: IndicatorRange::TOY,
            },
            taa: TaaConfig::default(),
            taa_train: TaaTrainConfig::default(),
            eval: EvalSection {
                plots: true,
                generation: true,
            },
        }
    }
}

/// Fields holding per-stage seeds; they are derived, not configured.
const DERIVED_SEEDS: [&str; 5] = ["corpus.seed", "codec.seed", "avd.seed", "taa.seed", "taa_train.seed"];

impl RunConfig {
    /// Budget that finishes the whole pipeline on one CPU core within an
    /// hour. The short diffusion training cannot sample from pure noise, so
    /// generation starts half way and contrasts the paired prompt.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.diffusion.start = Some(500);
        c.diffusion.guidance = 4.0;
        c.avd.steps = 1500;
        c.avd.lr = 1e-3;
        c.triples.count = 200;
        c.taa_train.lr = 3e-4;
        c
    }

    /// Copy with every stage seed derived from `run.seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let root = c.run.seed;
        c.corpus.seed = seed::derive(root, "corpus", 0);
        c.codec.seed = seed::derive(root, "codec-init", 0);
        c.avd.seed = seed::derive(root, "avd", 0);
        c.taa.seed = seed::derive(root, "taa-init", 0);
        c.taa_train.seed = seed::derive(root, "taa-train", 0);
        c
    }

    pub fn sampler(&self) -> SamplerOptions {
        SamplerOptions {
            interval: self.diffusion.interval,
            start: self.diffusion.start,
            guidance: self.diffusion.guidance,
        }
    }

    pub fn seed_for(&self, purpose: &str) -> u64 {
        seed::derive(self.run.seed, purpose, 0)
    }

    /// Flat `section.key` to value text, sorted by key.
    pub fn to_pairs(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        for k in DERIVED_SEEDS {
            out.remove(k);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.to_pairs()? {
            s.push_str(&format!("{k}={v}\n"));
        }
        Ok(s)
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn with_pairs<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, text) in pairs {
            let key = key.trim();
            if DERIVED_SEEDS.contains(&key) {
                return Err(bad_config(format!("`{key}` is derived from run.seed")));
            }
            let slot = lookup(&mut tree, key).ok_or_else(|| bad_config(format!("unknown config key `{key}`")))?;
            *slot = parse_like(slot, text.trim()).ok_or_else(|| bad_config(format!("bad value `{text}` for `{key}`")))?;
        }
        serde_json::from_value(tree).map_err(|e| bad_config(format!("config: {e}")))
    }

    /// Parses config text over the defaults. Blank lines and `#` comments
    /// are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().with_text(text)
    }

    pub fn with_text(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad_config(format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k, v));
        }
        self.with_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), scalar_text(other));
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut()?.get_mut(part)?;
    }
    (!node.is_object()).then_some(node)
}

fn parse_like(current: &Value, text: &str) -> Option<Value> {
    // optional numbers switch back and forth with `none`
    if text == "none" && !current.is_string() {
        return Some(Value::Null);
    }
    match current {
        Value::String(_) => Some(Value::String(text.to_string())),
        Value::Bool(_) => text.parse().ok().map(Value::Bool),
        Value::Number(_) => parse_number(text),
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::Null);
            text.split(',').map(|t| parse_like(&template, t.trim())).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        Value::Null => Some(parse_any(text)),
        Value::Object(_) => None,
    }
}

fn parse_number(text: &str) -> Option<Value> {
    if let Ok(u) = text.parse::<u64>() {
        return Some(Value::Number(u.into()));
    }
    if let Ok(i) = text.parse::<i64>() {
        return Some(Value::Number(i.into()));
    }
    text.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
}

fn parse_any(text: &str) -> Value {
    match text {
        "none" | "null" => Value::Null,
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => parse_number(text).unwrap_or_else(|| Value::String(text.to_string())),
    }
}
