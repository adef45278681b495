//! The anticipation encoder: patch tokens, a spatial transformer, adaptive
//! token sampling, a temporal transformer over per-frame cls tokens and the
//! two-layer score decoder.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Error, Result};
use crate::nn::ops::softmax_last;
use crate::nn::{self, Checkpoint, Init, LayerNorm, Linear, ParamStore, Vb};
use crate::synth::{EventAnnotation, VideoClip};

pub const CHECKPOINT_KIND: &str = "taa";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaaConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spatial transformer depth H_s.
    pub spatial_layers: usize,
    /// Adaptive token sampling layers; plain transformer layers when
    /// `adaptive` is off.
    pub sampling_layers: usize,
    pub adaptive: bool,
    /// Temporal transformer depth H_t.
    pub temporal_layers: usize,
    /// Causal window length n.
    pub window: usize,
    pub decoder_hidden: usize,
    pub seed: u64,
}

impl Default for TaaConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            dim: 192,
            heads: 8,
            mlp_ratio: 2,
            spatial_layers: 2,
            sampling_layers: 3,
            adaptive: true,
            temporal_layers: 3,
            window: 5,
            decoder_hidden: 64,
            seed: 0,
        }
    }
}

impl TaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.window == 0 || self.heads == 0 {
            return Err(bad_config("patch, dim, heads and window must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(bad_config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Kept-token count after one sampling layer: half, rounded up.
pub fn kept_tokens(tok: usize) -> usize {
    tok.div_ceil(2)
}

/// Per-head significance of the non-cls tokens: the cls-row attention to
/// token `i` times the norm of its value, normalised over `i >= 1`.
/// `cls_row` and `value_norms` include the cls entry at index 0.
pub fn significance_scores(cls_row: &[f64], value_norms: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = cls_row[1..].iter().zip(&value_norms[1..]).map(|(a, v)| a * v).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Attention probabilities and selection of one sampling layer for one
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceProfile {
    /// `[head][query][key]`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[head][token]` over non-cls tokens.
    pub head_scores: Vec<Vec<f64>>,
    /// Head-summed scores `e_i`.
    pub scores: Vec<f64>,
    /// Kept non-cls tokens, 0-based among the non-cls tokens.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerLayer {
    fn new(vb: &Vb, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&vb.pp("ln1"), dim)?,
            qkv: Linear::new(&vb.pp("qkv"), dim, 3 * dim)?,
            out: Linear::with_init(&vb.pp("out"), dim, dim, Init::Normal(0.5 / (dim as f64).sqrt()), true)?,
            ln2: LayerNorm::new(&vb.pp("ln2"), dim)?,
            fc1: Linear::new(&vb.pp("fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::with_init(&vb.pp("fc2"), mlp_ratio * dim, dim, Init::Normal(0.5 / ((mlp_ratio * dim) as f64).sqrt()), true)?,
            heads,
        })
    }

    /// Queries, keys, values and attention probabilities of `x: (b, l, d)`.
    fn attention(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let d = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?.contiguous()?;
        Ok((nn::attention_probs(&q.contiguous()?, &k.contiguous()?, self.heads)?, v))
    }

    fn mlp(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x + self.fc2.forward(&self.fc1.forward(&self.ln2.forward(x)?)?.gelu()?)?
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (probs, v) = self.attention(x)?;
        let x = (x + self.out.forward(&nn::apply_attention(&probs, &v)?)?)?;
        self.mlp(&x)
    }

    /// Adaptive token sampling: ranks the non-cls tokens of every batch row
    /// by head-summed significance, keeps cls plus the top `keep`, and
    /// returns only their attention rows applied to all values.
    fn forward_sampled(&self, x: &Tensor, keep: usize, profile: bool) -> Result<(Tensor, Vec<SignificanceProfile>)> {
        let (b, l, d) = x.dims3()?;
        let (probs, v) = self.attention(x)?;
        let attended = nn::apply_attention(&probs, &v)?;
        let dk = d / self.heads;
        let norms: Vec<f32> = v
            .reshape((b, l, self.heads, dk))?
            .sqr()?
            .sum(3)?
            .sqrt()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        let cls_rows: Vec<f32> = probs.narrow(2, 0, 1)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let probs_all: Option<Vec<f32>> = if profile {
            Some(probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
        } else {
            None
        };
        let mut index = Vec::with_capacity(b * (keep + 1));
        let mut profiles = Vec::new();
        for bi in 0..b {
            let mut head_scores = Vec::with_capacity(self.heads);
            let mut e = vec![0.0; l - 1];
            for h in 0..self.heads {
                let row: Vec<f64> = (0..l).map(|j| cls_rows[(bi * self.heads + h) * l + j] as f64).collect();
                let vn: Vec<f64> = (0..l).map(|j| norms[(bi * l + j) * self.heads + h] as f64).collect();
                let a = significance_scores(&row, &vn);
                for (ei, ai) in e.iter_mut().zip(&a) {
                    *ei += ai;
                }
                head_scores.push(a);
            }
            let kept = top_k_indices(&e, keep);
            index.push((bi * l) as u32);
            index.extend(kept.iter().map(|i| (bi * l + i + 1) as u32));
            if let Some(p) = &probs_all {
                let attention = (0..self.heads)
                    .map(|h| {
                        (0..l)
                            .map(|q| (0..l).map(|k| p[((bi * self.heads + h) * l + q) * l + k] as f64).collect())
                            .collect()
                    })
                    .collect();
                profiles.push(SignificanceProfile { attention, head_scores, scores: e, kept });
            }
        }
        let index = Tensor::from_vec(index, b * (keep + 1), x.device())?;
        let pick = |t: &Tensor| -> candle_core::Result<Tensor> {
            t.contiguous()?.reshape((b * l, d))?.index_select(&index, 0)?.reshape((b, keep + 1, d))
        };
        let x = (pick(x)? + self.out.forward(&pick(&attended)?)?)?;
        Ok((self.mlp(&x)?, profiles))
    }
}

/// Differentiable outputs for the windows of one clip.
pub struct WindowOutput {
    /// Accident probability per window, `(w,)`.
    pub probs: Tensor,
    /// Max-pooled temporal features, `(w, d)`.
    pub pooled: Tensor,
}

pub struct TaaModel {
    store: ParamStore,
    pub config: TaaConfig,
    patch_embed: Linear,
    cls: Tensor,
    pos: Tensor,
    spatial: Vec<TransformerLayer>,
    sampling: Vec<TransformerLayer>,
    time_cls: Tensor,
    time_pos: Tensor,
    temporal: Vec<TransformerLayer>,
    fc1: Linear,
    fc2: Linear,
    frame_hw: (usize, usize),
}

/// Accident scores of the scored frames `start..start + scores.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccidentScoreSeries {
    pub start: usize,
    pub scores: Vec<f64>,
    pub frame_rate: f64,
    pub annotation: EventAnnotation,
}

impl AccidentScoreSeries {
    pub fn frames(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.scores.iter().enumerate().map(|(i, s)| (self.start + i, *s))
    }

    /// CSV with annotation header lines.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let a = &self.annotation;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
        let mut text = format!(
            "# label={}\n# t_ai={}\n# t_co={}\n# frame_rate={}\nframe_index,score\n",
            a.label,
            opt(a.t_ai),
            opt(a.t_co),
            self.frame_rate
        );
        for (t, s) in self.frames() {
            text.push_str(&format!("{t},{s}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

impl TaaModel {
    /// A fresh model for `height x width` frames.
    pub fn new(config: TaaConfig, height: usize, width: usize) -> Result<Self> {
        Self::build(ParamStore::new(config.seed, DType::F32), config, height, width)
    }

    fn build(store: ParamStore, config: TaaConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if height % p != 0 || width % p != 0 {
            return Err(invalid(format!("{height}x{width} frames not divisible into {p}-pixel patches")));
        }
        let tok = (height / p) * (width / p);
        let d = config.dim;
        let vb = store.root();
        let layers = |name: &str, n: usize| -> Result<Vec<TransformerLayer>> {
            (0..n).map(|i| TransformerLayer::new(&vb.pp(format!("{name}{i}")), d, config.heads, config.mlp_ratio)).collect()
        };
        let model = Self {
            patch_embed: Linear::new(&vb.pp("patch"), 3 * p * p, d)?,
            cls: vb.get(&[1, 1, d], "cls", Init::Normal(0.02))?,
            pos: vb.get(&[1, tok + 1, d], "pos", Init::Normal(0.02))?,
            spatial: layers("spatial", config.spatial_layers)?,
            sampling: layers("sampling", config.sampling_layers)?,
            time_cls: vb.get(&[1, 1, d], "time_cls", Init::Normal(0.02))?,
            time_pos: vb.get(&[1, config.window + 1, d], "time_pos", Init::Normal(0.02))?,
            temporal: layers("temporal", config.temporal_layers)?,
            fc1: Linear::new(&vb.pp("asd1"), d, config.decoder_hidden)?,
            fc2: Linear::new(&vb.pp("asd2"), config.decoder_hidden, 2)?,
            frame_hw: (height, width),
            config,
            store,
        };
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tokens_per_frame(&self) -> usize {
        let p = self.config.patch;
        (self.frame_hw.0 / p) * (self.frame_hw.1 / p)
    }

    /// Patch tokens of `frames: (t, h, w, 3)` with cls at index 0 and the
    /// positional embedding added: `(t, Tok + 1, d)`.
    pub fn patchify(&self, frames: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = frames.dims4()?;
        let p = self.config.patch;
        if (h, w) != self.frame_hw || c != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x3 frames", self.frame_hw.0, self.frame_hw.1),
                got: format!("{h}x{w}x{c}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let patches = frames
            .reshape((t * gh, p, gw, p * c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((t, gh * gw, p * p * c))?;
        let x = self.patch_embed.forward(&patches)?;
        let cls = self.cls.broadcast_as((t, 1, self.config.dim))?;
        Ok(Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?)
    }

    pub fn s_trans(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.spatial {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// The sampling stack; with `profile` set, returns one profile per layer
    /// and frame.
    pub fn adp_tok_s(&self, tokens: &Tensor, profile: bool) -> Result<(Tensor, Vec<Vec<SignificanceProfile>>)> {
        let mut x = tokens.clone();
        let mut profiles = Vec::new();
        for layer in &self.sampling {
            if self.config.adaptive {
                let tok = x.dim(1)? - 1;
                let (y, p) = layer.forward_sampled(&x, kept_tokens(tok), profile)?;
                x = y;
                profiles.push(p);
            } else {
                x = layer.forward(&x)?;
            }
        }
        Ok((x, profiles))
    }

    /// Per-frame cls features `(t, d)`; each frame is encoded once.
    pub fn frame_features(&self, frames: &Tensor) -> Result<Tensor> {
        let x = self.s_trans(&self.patchify(frames)?)?;
        let (x, _) = self.adp_tok_s(&x, false)?;
        Ok(x.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Temporal transformer over windows of cls features `(w, n, d)`,
    /// max-pooled over the `n + 1` tokens: `(w, d)`.
    pub fn t_trans(&self, cls: &Tensor) -> Result<Tensor> {
        let (w, n, d) = cls.dims3()?;
        if n > self.config.window {
            return Err(invalid(format!("window of {n} frames exceeds configured {}", self.config.window)));
        }
        let tc = self.time_cls.broadcast_as((w, 1, d))?;
        let pos = self.time_pos.narrow(1, 0, n + 1)?;
        let mut x = Tensor::cat(&[&tc, cls], 1)?.broadcast_add(&pos)?;
        for layer in &self.temporal {
            x = layer.forward(&x)?;
        }
        Ok(x.max(1)?)
    }

    /// Two-class decoder; returns the accident probability `(w,)`.
    pub fn decode_score(&self, pooled: &Tensor) -> Result<Tensor> {
        let d = pooled.dim(D::Minus1)?;
        if d != self.config.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("width {}", self.config.dim),
                got: d.to_string(),
            });
        }
        let logits = self.fc2.forward(&self.fc1.forward(pooled)?.relu()?)?;
        Ok(softmax_last(&logits)?.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?)
    }

    /// Scores the windows ending at frames `ends` (each `>= n - 1`) from
    /// per-frame features `(t, d)`.
    pub fn score_windows(&self, feats: &Tensor, ends: &[usize]) -> Result<WindowOutput> {
        let n = self.config.window;
        let t = feats.dim(0)?;
        if let Some(e) = ends.iter().find(|e| **e + 1 < n || **e >= t) {
            return Err(invalid(format!("window ending at {e} does not fit {t} frames")));
        }
        let idx: Vec<u32> = ends.iter().flat_map(|e| (e + 1 - n..=*e).map(|i| i as u32)).collect();
        let idx = Tensor::from_vec(idx, ends.len() * n, feats.device())?;
        let windows = feats.contiguous()?.index_select(&idx, 0)?.reshape((ends.len(), n, self.config.dim))?;
        let pooled = self.t_trans(&windows)?;
        Ok(WindowOutput {
            probs: self.decode_score(&pooled)?,
            pooled,
        })
    }

    /// Causal scoring of every frame from `n - 1` on.
    pub fn forward_frames(&self, frames: &Tensor) -> Result<WindowOutput> {
        let t = frames.dim(0)?;
        let n = self.config.window;
        if t < n {
            return Err(invalid(format!("clip of {t} frames shorter than the {n}-frame window")));
        }
        let feats = self.frame_features(frames)?;
        self.score_windows(&feats, &(n - 1..t).collect::<Vec<_>>())
    }

    /// Score series and pooled features of a clip.
    pub fn forward_clip(&self, clip: &VideoClip, annotation: EventAnnotation) -> Result<(AccidentScoreSeries, Tensor)> {
        let out = self.forward_frames(&clip.to_tensor(DType::F32)?)?;
        let scores: Vec<f32> = out.probs.to_vec1()?;
        Ok((
            AccidentScoreSeries {
                start: self.config.window - 1,
                scores: scores.into_iter().map(f64::from).collect(),
                frame_rate: clip.frame_rate(),
                annotation,
            },
            out.pooled,
        ))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "config": self.config,
            "height": self.frame_hw.0,
            "width": self.frame_hw.1,
            "extra": extra,
        });
        Ok(Checkpoint::new(CHECKPOINT_KIND, header, self.store.snapshot()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TaaConfig = serde_json::from_value(ck.header["config"].clone())?;
        let dim = |k: &str| {
            ck.header[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let store = ParamStore::new(config.seed, DType::F32);
        store.load(&ck.tensors, |_| crate::nn::Group::Base)?;
        let n = store.len();
        let model = Self::build(store, config, dim("height")?, dim("width")?)?;
        if model.store.len() != n {
            return Err(Error::Checkpoint("parameter set does not match the encoder config".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?.expect_kind(CHECKPOINT_KIND)?)
    }
}
