//! The stages of a full run, each reading and writing files under one output
//! directory so they can run as separate processes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, Codec, CodecTrainReport};
use crate::config::RunConfig;
use crate::diffusion::{
    encode_corpus, generate_variants, make_schedule, train_avd, AvdModel, AvdStepLog, AvdTrainState, NoiseSchedule,
};
use crate::error::{invalid, Error, Result};
use crate::losses::{train_eq_taa, TaaStepLog};
use crate::metrics::{self, AlignmentModel, EvalReport};
use crate::nn::checkpoint::Checkpoint;
use crate::seed;
use crate::synth::manifest::{load_clip, plan_corpus, read_manifest, write_corpus, MANIFEST_NAME};
use crate::synth::{
    build_triple_set, sample_random_indicator, ClipRole, EventAnnotation, ManifestRecord, Polarity, PromptPool,
    TextPrompt, TripleSet, VideoClip, GENERATION_LEN,
};
use crate::taa::{AccidentScoreSeries, TaaModel};

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus().join(MANIFEST_NAME)
    }

    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.eqck")
    }

    pub fn avd(&self) -> PathBuf {
        self.root.join("avd.eqck")
    }

    pub fn triples(&self, split: TripleSplit) -> PathBuf {
        self.root.join(split.dir())
    }

    pub fn taa(&self, variant: TaaVariant) -> PathBuf {
        self.root.join(format!("{}.eqck", variant.name()))
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleSplit {
    Train,
    Heldout,
}

impl TripleSplit {
    fn dir(self) -> &'static str {
        match self {
            TripleSplit::Train => "triples",
            TripleSplit::Heldout => "triples_heldout",
        }
    }
}

/// Ablation switches of the anticipation encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaaVariant {
    pub no_etl: bool,
    pub no_adptoks: bool,
}

impl TaaVariant {
    pub fn name(self) -> String {
        let mut s = String::from("taa");
        if self.no_etl {
            s.push_str("-no-etl");
        }
        if self.no_adptoks {
            s.push_str("-no-adptoks");
        }
        s
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} not found at {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let d = &cfg.diffusion;
    make_schedule(d.steps, d.beta_start, d.beta_end, d.shape)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub clips: usize,
    pub manifest: PathBuf,
}

/// Plans and renders the corpus. `count` rescales the role mix to that many
/// clips.
pub fn cmd_synth(cfg: &RunConfig, count: Option<usize>) -> Result<SynthSummary> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    let corpus = match count {
        Some(n) => cfg.corpus.with_total(n),
        None => cfg.corpus.clone(),
    };
    let records = plan_corpus(&corpus, &PromptPool::toy())?;
    let manifest = write_corpus(&layout.corpus(), &records)?;
    log::info!("wrote {} clips to {}", records.len(), layout.corpus().display());
    Ok(SynthSummary {
        clips: records.len(),
        manifest,
    })
}

/// Rebuilds the corpus directory from an existing manifest.
pub fn regenerate_corpus(manifest: &Path, dir: &Path) -> Result<usize> {
    let records = read_manifest(manifest)?;
    write_corpus(dir, &records)?;
    Ok(records.len())
}

struct Corpus {
    dir: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Corpus {
    fn open(layout: &Layout) -> Result<Self> {
        require(&layout.manifest(), "corpus manifest")?;
        Ok(Self {
            dir: layout.corpus(),
            records: read_manifest(&layout.manifest())?,
        })
    }

    fn role(&self, role: ClipRole) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    fn load(&self, role: ClipRole) -> Result<Vec<(ManifestRecord, VideoClip, EventAnnotation)>> {
        self.role(role)
            .map(|r| {
                let (clip, ann) = load_clip(&self.dir, r)?;
                Ok((r.clone(), clip, ann))
            })
            .collect()
    }

    fn captioned(&self, pool: &PromptPool) -> Result<Vec<(VideoClip, TextPrompt)>> {
        self.load(ClipRole::AvdTrain)?
            .into_iter()
            .map(|(r, clip, ann)| {
                let id = ann
                    .prompt_id
                    .or(r.prompt_id)
                    .ok_or_else(|| invalid(format!("{} has no prompt", r.path)))?;
                let p = pool.get(id).ok_or_else(|| invalid(format!("prompt {id} not in pool")))?;
                Ok((clip, p.clone()))
            })
            .collect()
    }
}

/// Trains the latent codec on anchor and diffusion-training clips.
pub fn cmd_train_codec(cfg: &RunConfig) -> Result<CodecTrainReport> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    let corpus = Corpus::open(&layout)?;
    let mut clips: Vec<VideoClip> = corpus.load(ClipRole::Anchor)?.into_iter().map(|(_, c, _)| c).collect();
    clips.extend(corpus.load(ClipRole::AvdTrain)?.into_iter().map(|(_, c, _)| c));
    let (codec, report) = train_codec(&clips, cfg.codec.clone())?;
    codec.save(&layout.codec())?;
    write_text(&layout.root.join("codec_report.json"), &serde_json::to_string_pretty(&report)?)?;
    log::info!("codec held-out psnr {:.2} dB", report.heldout_psnr);
    Ok(report)
}

fn load_codec(layout: &Layout) -> Result<Codec> {
    require(&layout.codec(), "codec checkpoint")?;
    Codec::load(&layout.codec())
}

/// Trains the diffusion model up to `avd.steps`, continuing from an
/// existing checkpoint when `resume` is set.
pub fn cmd_train_avd(cfg: &RunConfig, resume: bool) -> Result<Vec<AvdStepLog>> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    let codec = load_codec(&layout)?;
    let corpus = Corpus::open(&layout)?;
    let pool = PromptPool::toy();
    let samples = encode_corpus(&codec, &corpus.captioned(&pool)?)?;
    let sched = schedule(&cfg)?;
    let (model, state) = if resume && layout.avd().exists() {
        let ck = Checkpoint::load(&layout.avd())?.expect_kind(crate::diffusion::unet::CHECKPOINT_KIND)?;
        let step = ck.header["extra"]["step"].as_u64().unwrap_or(0) as usize;
        let model = AvdModel::from_checkpoint(&ck, None)?;
        let state = AvdTrainState {
            step,
            optimizer: ck.section("opt."),
        };
        (model, state)
    } else {
        let model = AvdModel::new(cfg.unet.clone(), pool, seed::derive(cfg.run.seed, "avd-init", 0))?;
        (model, AvdTrainState::default())
    };
    let log_path = layout.root.join("avd_log.csv");
    let mut log_text = if state.step > 0 && log_path.exists() {
        std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        String::from("step,loss\n")
    };
    let (state, logs) = train_avd(&model, &samples, &sched, &cfg.avd, state, |l| {
        if l.step % 100 == 0 {
            log::info!("avd step {}: loss {:.4}", l.step, l.loss);
        }
    })?;
    for l in &logs {
        log_text.push_str(&format!("{},{}\n", l.step, l.loss));
    }
    let opt = state.optimizer.into_iter().map(|(n, d, v)| (format!("opt.{n}"), d, v)).collect();
    model
        .to_checkpoint(serde_json::json!({ "step": state.step }), opt)?
        .save(&layout.avd())?;
    write_text(&log_path, &log_text)?;
    Ok(logs)
}

/// One line of a triple-set manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub index: usize,
    pub anchor: String,
    pub t_ai: usize,
    pub pos_prompt: usize,
    pub neg_prompt: usize,
    pub seed: u64,
    pub pos: String,
    pub neg: String,
}

const TRIPLE_MANIFEST: &str = "triples.jsonl";

fn read_triple_records(dir: &Path) -> Result<Vec<TripleRecord>> {
    let path = dir.join(TRIPLE_MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Plan of triple `index`: anchor choice, indicator, prompts and noise seed.
fn plan_triple(
    cfg: &RunConfig,
    split: TripleSplit,
    index: usize,
    anchors: &[(ManifestRecord, VideoClip, EventAnnotation)],
    pool: &PromptPool,
) -> Result<(usize, usize, TextPrompt, TextPrompt, u64)> {
    let root = cfg.seed_for(split.dir());
    let mut rng = seed::rng(root, "triple", index as u64);
    // held-out triples draw anchors after the training ones
    let offset = if split == TripleSplit::Heldout { cfg.triples.count } else { 0 };
    let a = (index + offset) % anchors.len();
    let t_ai = sample_random_indicator(anchors[a].1.frames(), cfg.triples.indicator, GENERATION_LEN, &mut rng)?;
    let pos = pool.sample(Polarity::Positive, &mut rng)?.clone();
    let neg = pool.sample(Polarity::Negative, &mut rng)?.clone();
    Ok((a, t_ai, pos, neg, seed::derive(root, "triple-noise", index as u64)))
}

/// Generates `count` triple sets of `split`, skipping ones already on disk.
pub fn cmd_gen_triples(cfg: &RunConfig, split: TripleSplit, count: usize) -> Result<Vec<TripleRecord>> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    let codec = load_codec(&layout)?;
    require(&layout.avd(), "diffusion checkpoint")?;
    let model = AvdModel::load(&layout.avd())?;
    let corpus = Corpus::open(&layout)?;
    let anchors = corpus.load(ClipRole::Anchor)?;
    if anchors.is_empty() && count > 0 {
        return Err(invalid("corpus has no anchor clips"));
    }
    let sched = schedule(&cfg)?;
    let dir = layout.triples(split);
    ensure_dir(&dir)?;
    let mut records = read_triple_records(&dir)?;
    records.retain(|r| r.index < count);
    let done: BTreeSet<usize> = records.iter().map(|r| r.index).collect();
    let manifest = dir.join(TRIPLE_MANIFEST);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .map_err(|e| Error::io(&manifest, e))?;
    for index in (0..count).filter(|i| !done.contains(i)) {
        let (a, t_ai, pos_p, neg_p, noise) = plan_triple(&cfg, split, index, &anchors, &model.pool)?;
        let (rec, anchor, _) = &anchors[a];
        let seg = anchor.segment(t_ai, GENERATION_LEN)?;
        let out = generate_variants(
            &model,
            &codec,
            &[&seg, &seg],
            &[&pos_p, &neg_p],
            &[&neg_p, &pos_p],
            &[noise, seed::derive(noise, "neg", 0)],
            &sched,
            &cfg.sampler(),
        )?;
        let record = TripleRecord {
            index,
            anchor: rec.path.clone(),
            t_ai,
            pos_prompt: pos_p.id,
            neg_prompt: neg_p.id,
            seed: noise,
            pos: format!("triple_{index:05}_pos.eqtv"),
            neg: format!("triple_{index:05}_neg.eqtv"),
        };
        out[0].write_container(&dir.join(&record.pos))?;
        out[1].write_container(&dir.join(&record.neg))?;
        let line = serde_json::to_string(&record)? + "\n";
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
        file.flush().map_err(|e| Error::io(&manifest, e))?;
        if index % 20 == 0 {
            log::info!("triple {index}/{count}");
        }
        records.push(record);
    }
    records.sort_by_key(|r| r.index);
    Ok(records)
}

/// Loads the triple sets of `split` and re-checks grafting locality.
pub fn load_triples(cfg: &RunConfig, split: TripleSplit) -> Result<Vec<TripleSet>> {
    let layout = Layout::new(&cfg.run.out);
    let dir = layout.triples(split);
    require(&dir.join(TRIPLE_MANIFEST), "triple-set manifest")?;
    let corpus = Corpus::open(&layout)?;
    let pool = PromptPool::toy();
    let mut records = read_triple_records(&dir)?;
    records.sort_by_key(|r| r.index);
    let mut anchors: std::collections::HashMap<String, Arc<VideoClip>> = Default::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let anchor = match anchors.get(&r.anchor) {
            Some(a) => a.clone(),
            None => {
                let rec = corpus
                    .records
                    .iter()
                    .find(|x| x.path == r.anchor)
                    .ok_or_else(|| invalid(format!("anchor {} not in corpus", r.anchor)))?;
                let a = Arc::new(load_clip(&corpus.dir, rec)?.0);
                anchors.insert(r.anchor.clone(), a.clone());
                a
            }
        };
        let fr = anchor.frame_rate();
        let prompt = |id: usize| pool.get(id).cloned().ok_or_else(|| invalid(format!("prompt {id} not in pool")));
        let t = build_triple_set(
            anchor,
            r.t_ai,
            VideoClip::read_container(&dir.join(&r.pos), fr)?,
            VideoClip::read_container(&dir.join(&r.neg), fr)?,
            (prompt(r.pos_prompt)?, prompt(r.neg_prompt)?),
            r.seed,
        )?;
        if !t.grafting_is_local() {
            return Err(invalid(format!("triple {} is not grafted locally", r.index)));
        }
        out.push(t);
    }
    Ok(out)
}

/// Trains the anticipation encoder on the training triples.
pub fn cmd_train_taa(cfg: &RunConfig, variant: TaaVariant) -> Result<Vec<TaaStepLog>> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    let triples = load_triples(&cfg, TripleSplit::Train)?;
    if triples.is_empty() {
        return Err(invalid("no training triple sets"));
    }
    let mut taa_cfg = cfg.taa.clone();
    let mut train = cfg.taa_train.clone();
    if variant.no_etl {
        train.loss.lambda = 0.0;
    }
    if variant.no_adptoks {
        taa_cfg.adaptive = false;
    }
    let (h, w) = (triples[0].anchor.height(), triples[0].anchor.width());
    let model = TaaModel::new(taa_cfg, h, w)?;
    let logs = train_eq_taa(&model, &triples, &train, |l| {
        if l.step % 20 == 0 {
            log::info!("taa step {}: erm {:.4} etl {:.4}", l.step, l.erm, l.etl);
        }
    })?;
    let extra = serde_json::json!({ "variant": variant, "train": train });
    model.to_checkpoint(extra)?.save(&layout.taa(variant))?;
    let mut text = String::from("step,erm,etl,total,wall_time\n");
    for l in &logs {
        text.push_str(&format!("{},{},{},{},{:.3}\n", l.step, l.erm, l.etl, l.total, l.wall_time));
    }
    write_text(&layout.root.join(format!("{}_log.csv", variant.name())), &text)?;
    Ok(logs)
}

/// Score series of every labelled evaluation clip.
pub fn score_eval_set(model: &TaaModel, cfg: &RunConfig) -> Result<Vec<(String, AccidentScoreSeries)>> {
    let corpus = Corpus::open(&Layout::new(&cfg.run.out))?;
    let mut out = Vec::new();
    for role in [ClipRole::EvalPositive, ClipRole::EvalNegative] {
        for (rec, clip, ann) in corpus.load(role)? {
            let name = Path::new(&rec.path)
                .file_stem()
                .map_or(rec.path.clone(), |s| s.to_string_lossy().into_owned());
            out.push((name, model.forward_clip(&clip, ann)?.0));
        }
    }
    Ok(out)
}

/// Share of triples whose pseudo-accident clip scores higher than its
/// pseudo-normal twin, averaged over the causal window.
pub fn equivariance_rate(model: &TaaModel, triples: &[TripleSet]) -> Result<f64> {
    if triples.is_empty() {
        return Err(invalid("no triples to compare"));
    }
    let mut wins = 0;
    for t in triples {
        let window_mean = |clip: &VideoClip| -> Result<f64> {
            let (s, _) = model.forward_clip(clip, t.annotation.clone())?;
            let v: Vec<f64> = s.frames().filter(|(f, _)| *f >= t.t_ai() && *f <= t.t_co()).map(|(_, p)| p).collect();
            Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
        };
        if window_mean(&t.pos())? > window_mean(&t.neg())? {
            wins += 1;
        }
    }
    Ok(wins as f64 / triples.len() as f64)
}

/// Generation quality of the training triples: Fréchet distance of the
/// generated segments to real clips of the same polarity, and alignment of
/// generated segments with their own and the opposite prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationQuality {
    pub fld_pos_vs_real_accident: f64,
    pub fld_neg_vs_real_normal: f64,
    pub align_pos_own: f64,
    pub align_pos_other: f64,
    pub align_neg_own: f64,
    pub align_neg_other: f64,
}

pub fn generation_quality(cfg: &RunConfig, triples: &[TripleSet]) -> Result<GenerationQuality> {
    let layout = Layout::new(&cfg.run.out);
    let codec = load_codec(&layout)?;
    let pool = PromptPool::toy();
    let corpus = Corpus::open(&layout)?;
    let captioned = corpus.captioned(&pool)?;
    let (real_pos, real_neg): (Vec<_>, Vec<_>) = captioned.iter().partition(|(_, p)| p.polarity == Polarity::Positive);
    let real = |v: &[&(VideoClip, TextPrompt)]| v.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>();
    let gen_pos: Vec<VideoClip> = triples.iter().map(|t| t.pos_segment().clone()).collect();
    let gen_neg: Vec<VideoClip> = triples.iter().map(|t| t.neg_segment().clone()).collect();
    let align = AlignmentModel::fit(pool.vocabulary(), &codec, &captioned, 1e-2)?;
    let (mut pp, mut po, mut nn, mut no) = (0.0, 0.0, 0.0, 0.0);
    for t in triples {
        let (p, n) = &t.prompts;
        pp += align.score(&codec, t.pos_segment(), p)?;
        po += align.score(&codec, t.pos_segment(), n)?;
        nn += align.score(&codec, t.neg_segment(), n)?;
        no += align.score(&codec, t.neg_segment(), p)?;
    }
    let k = triples.len().max(1) as f64;
    Ok(GenerationQuality {
        fld_pos_vs_real_accident: metrics::frechet_latent_distance(&gen_pos, &real(&real_pos), &codec)?,
        fld_neg_vs_real_normal: metrics::frechet_latent_distance(&gen_neg, &real(&real_neg), &codec)?,
        align_pos_own: pp / k,
        align_pos_other: po / k,
        align_neg_own: nn / k,
        align_neg_other: no / k,
    })
}

/// Scores the evaluation set with a trained encoder and writes the JSON
/// report, the TTA table, per-video score CSVs and, if enabled, plots.
pub fn cmd_evaluate(cfg: &RunConfig, variant: TaaVariant) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    let layout = Layout::new(&cfg.run.out);
    require(&layout.taa(variant), "encoder checkpoint")?;
    let model = TaaModel::load(&layout.taa(variant))?;
    let named = score_eval_set(&model, &cfg)?;
    let mut config = serde_json::json!({ "variant": variant, "run": cfg.run });
    if let Ok(heldout) = load_triples(&cfg, TripleSplit::Heldout) {
        if !heldout.is_empty() {
            config["equivariance_rate"] = serde_json::json!(equivariance_rate(&model, &heldout)?);
        }
    }
    if cfg.eval.generation {
        if let Ok(train) = load_triples(&cfg, TripleSplit::Train) {
            if train.len() >= 2 {
                config["generation"] = serde_json::to_value(generation_quality(&cfg, &train)?)?;
            }
        }
    }
    let report = metrics::evaluate_series(&named, config)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let dir = layout.eval(&variant.name());
    ensure_dir(&dir.join("scores"))?;
    report.write_json(&dir.join("report.json"))?;
    report.write_tta_csv(&dir.join("tta.csv"))?;
    for (name, s) in &named {
        s.write_csv(&dir.join("scores").join(format!("{name}.csv")))?;
    }
    if cfg.eval.plots {
        ensure_dir(&dir.join("plots"))?;
        for (name, s) in &named {
            let total = s.start + s.scores.len();
            write_text(&dir.join("plots").join(format!("{name}.svg")), &metrics::score_curve_svg(name, s, total))?;
        }
    }
    Ok(report)
}
