//! Corpus planning and the JSONL manifest that regenerates it.
//!
//! Every record is planned from `(root seed, role, index)` alone, so a
//! corpus can be rebuilt from its manifest or re-planned from the config.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{EventAnnotation, Sidecar};
use super::clip::VideoClip;
use super::prompts::{Polarity, PromptPool};
use super::scenario::{generate_clip, sample_accident_scenario, sample_normal_scenario, ObjectClass, ScenarioSpec};
use super::triple::{IndicatorRange, GENERATION_LEN};
use crate::error::{bad_config, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRole {
    /// Accident-free long clip that triple sets are grafted into.
    Anchor,
    /// Generation-length clip with a prompt, for diffusion training.
    AvdTrain,
    /// Held-out long clip with a real collision.
    EvalPositive,
    /// Held-out long accident-free clip.
    EvalNegative,
}

impl ClipRole {
    pub const ALL: [ClipRole; 4] = [
        ClipRole::Anchor,
        ClipRole::AvdTrain,
        ClipRole::EvalPositive,
        ClipRole::EvalNegative,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ClipRole::Anchor => "anchor",
            ClipRole::AvdTrain => "avd",
            ClipRole::EvalPositive => "eval_pos",
            ClipRole::EvalNegative => "eval_neg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frame_rate: f64,
    /// Length of anchor and evaluation clips (N_I).
    pub long_len: usize,
    /// Length of diffusion training clips (the generation window).
    pub gen_len: usize,
    pub anchors: usize,
    pub avd_clips: usize,
    pub eval_positive: usize,
    pub eval_negative: usize,
    /// Range the accident start of held-out positives is drawn from.
    pub eval_ai: IndicatorRange,
    /// Frames from accident start to collision, inclusive range.
    pub approach_frames: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            frame_rate: 30.0,
            long_len: 60,
            gen_len: GENERATION_LEN,
            anchors: 300,
            avd_clips: 400,
            eval_positive: 40,
            eval_negative: 40,
            eval_ai: IndicatorRange::TOY,
            approach_frames: (12, 18),
        }
    }
}

impl CorpusConfig {
    pub fn count(&self, role: ClipRole) -> usize {
        match role {
            ClipRole::Anchor => self.anchors,
            ClipRole::AvdTrain => self.avd_clips,
            ClipRole::EvalPositive => self.eval_positive,
            ClipRole::EvalNegative => self.eval_negative,
        }
    }

    pub fn total(&self) -> usize {
        ClipRole::ALL.iter().map(|r| self.count(*r)).sum()
    }

    /// Same mix rescaled to `total` clips (largest remainder).
    pub fn with_total(&self, total: usize) -> CorpusConfig {
        let mut out = self.clone();
        let sum = self.total();
        let mut counts = [0usize; 4];
        if sum > 0 {
            let mut rem = Vec::new();
            for (i, r) in ClipRole::ALL.iter().enumerate() {
                let exact = self.count(*r) * total;
                counts[i] = exact / sum;
                rem.push((exact % sum, i));
            }
            rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let missing = total - counts.iter().sum::<usize>();
            for (_, i) in rem.into_iter().take(missing) {
                counts[i] += 1;
            }
        }
        out.anchors = counts[0];
        out.avd_clips = counts[1];
        out.eval_positive = counts[2];
        out.eval_negative = counts[3];
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.frame_rate > 0.0) {
            return Err(bad_config("corpus dims and frame rate must be positive"));
        }
        let (lo, hi) = self.approach_frames;
        if lo == 0 || lo > hi {
            return Err(bad_config(format!("bad approach range ({lo}, {hi})")));
        }
        if hi >= self.gen_len {
            return Err(bad_config(format!(
                "approach of up to {hi} frames does not fit a {}-frame training clip",
                self.gen_len
            )));
        }
        if self.eval_ai.lo > self.eval_ai.hi || self.eval_ai.lo == 0 || self.eval_ai.hi + hi >= self.long_len {
            return Err(bad_config(format!(
                "evaluation accidents in {:?} + {hi} frames do not fit {} frames",
                self.eval_ai, self.long_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Container path relative to the corpus directory.
    pub path: String,
    pub role: ClipRole,
    pub index: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub prompt_id: Option<usize>,
    pub spec: ScenarioSpec,
}

impl ManifestRecord {
    pub fn sidecar_path(&self) -> String {
        match self.path.strip_suffix(".eqtv") {
            Some(stem) => format!("{stem}.json"),
            None => format!("{}.json", self.path),
        }
    }

    /// Renders the clip; pure given the record.
    pub fn render(&self) -> Result<(VideoClip, EventAnnotation)> {
        let (clip, ann) = generate_clip(
            &self.spec,
            self.n_frames,
            (self.height, self.width),
            self.frame_rate,
            self.seed,
        )?;
        let ann = match self.prompt_id {
            Some(p) => ann.with_prompt(p),
            None => ann,
        };
        Ok((clip, ann))
    }
}

/// Plans record `index` of `role`. Accident clips pair the hazard with the
/// matching "hits" prompt, normal clips their focus object with the
/// matching "moves straight" prompt.
pub fn plan_record(cfg: &CorpusConfig, pool: &PromptPool, role: ClipRole, index: usize) -> Result<ManifestRecord> {
    let clip_seed = seed::derive(cfg.seed, role.tag(), index as u64);
    let mut rng = seed::rng(clip_seed, "scenario", 0);
    let pick_class = |rng: &mut rand_chacha::ChaCha8Rng| {
        ObjectClass::ROAD_USERS[rng.random_range(0..ObjectClass::ROAD_USERS.len())]
    };
    let approach = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(cfg.approach_frames.0..=cfg.approach_frames.1);

    let (n_frames, spec, prompt_id) = match role {
        ClipRole::Anchor | ClipRole::EvalNegative => {
            let focus = pick_class(&mut rng);
            (cfg.long_len, sample_normal_scenario(&mut rng, cfg.long_len, focus), None)
        }
        ClipRole::EvalPositive => {
            let hazard = pick_class(&mut rng);
            let t_ai = rng.random_range(cfg.eval_ai.lo..=cfg.eval_ai.hi);
            let t_co = t_ai + approach(&mut rng);
            let spec = sample_accident_scenario(&mut rng, cfg.long_len, hazard, t_ai, t_co)?;
            (cfg.long_len, spec, None)
        }
        ClipRole::AvdTrain => {
            let class = pick_class(&mut rng);
            // alternate polarity so both halves are balanced
            if index % 2 == 0 {
                let t_co = approach(&mut rng);
                let spec = sample_accident_scenario(&mut rng, cfg.gen_len, class, 0, t_co)?;
                (cfg.gen_len, spec, prompt_for(pool, Polarity::Positive, class)?)
            } else {
                let spec = sample_normal_scenario(&mut rng, cfg.gen_len, class);
                (cfg.gen_len, spec, prompt_for(pool, Polarity::Negative, class)?)
            }
        }
    };
    Ok(ManifestRecord {
        path: format!("{}/{}_{index:05}.eqtv", role.tag(), role.tag()),
        role,
        index,
        seed: clip_seed,
        n_frames,
        height: cfg.height,
        width: cfg.width,
        frame_rate: cfg.frame_rate,
        prompt_id,
        spec,
    })
}

fn prompt_for(pool: &PromptPool, polarity: Polarity, class: ObjectClass) -> Result<Option<usize>> {
    pool.find(polarity, class)
        .map(|p| Some(p.id))
        .ok_or_else(|| bad_config(format!("prompt pool has no {polarity:?} prompt for {}", class.name())))
}

/// Full plan for a corpus config, roles in fixed order.
pub fn plan_corpus(cfg: &CorpusConfig, pool: &PromptPool) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.total());
    for role in ClipRole::ALL {
        for i in 0..cfg.count(role) {
            out.push(plan_record(cfg, pool, role, i)?);
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Renders every record into `dir` (containers + sidecars) and writes the
/// manifest last.
pub fn write_corpus(dir: &Path, records: &[ManifestRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records {
        let (clip, ann) = r.render()?;
        let path = dir.join(&r.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        clip.write_container(&path)?;
        Sidecar::from(&ann).write(&dir.join(r.sidecar_path()))?;
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, records)?;
    Ok(manifest)
}

/// Loads a clip and its sidecar annotation from a corpus directory.
pub fn load_clip(dir: &Path, record: &ManifestRecord) -> Result<(VideoClip, EventAnnotation)> {
    let clip = VideoClip::read_container(&dir.join(&record.path), record.frame_rate)?;
    let side = Sidecar::read(&dir.join(record.sidecar_path()))?;
    Ok((clip, EventAnnotation::from(&side)))
}
