//! Anticipation and generation-quality metrics, the evaluation report and
//! its CSV and SVG side outputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{bad_config, invalid, Error, Result};
use crate::synth::{TextPrompt, VideoClip};
use crate::taa::AccidentScoreSeries;

/// Diagonal loading applied to covariances before the matrix square root.
pub const FRECHET_EPS: f64 = 1e-6;

/// Threshold grid `0.01, 0.02, ..., 0.99` used for mTTA.
pub fn threshold_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Seconds between the first frame `t_w <= t_ai` whose score exceeds `a` and
/// `t_ai`; 0 without such a frame. `scores[i]` belongs to frame `start + i`.
pub fn tta_at(start: usize, scores: &[f64], a: f64, t_ai: usize, frame_rate: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(invalid(format!("threshold {a} outside (0, 1)")));
    }
    let first = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (start + i, *s))
        .take_while(|(t, _)| *t <= t_ai)
        .find(|(_, s)| *s > a);
    Ok(first.map_or(0.0, |(t, _)| (t_ai - t) as f64 / frame_rate))
}

/// Mean of [`tta_at`] over [`threshold_grid`].
pub fn mtta(start: usize, scores: &[f64], t_ai: usize, frame_rate: f64) -> Result<f64> {
    let grid = threshold_grid();
    let mut sum = 0.0;
    for a in &grid {
        sum += tta_at(start, scores, *a, t_ai, frame_rate)?;
    }
    Ok(sum / grid.len() as f64)
}

fn positive_t_ai(series: &AccidentScoreSeries) -> Result<usize> {
    match (series.annotation.is_positive(), series.annotation.t_ai) {
        (true, Some(t)) => Ok(t),
        _ => Err(invalid("time-to-accident needs a positive clip with t_ai")),
    }
}

pub fn series_tta(series: &AccidentScoreSeries, a: f64) -> Result<f64> {
    tta_at(series.start, &series.scores, a, positive_t_ai(series)?, series.frame_rate)
}

pub fn series_mtta(series: &AccidentScoreSeries) -> Result<f64> {
    mtta(series.start, &series.scores, positive_t_ai(series)?, series.frame_rate)
}

fn check_both_classes(labels: &[bool]) -> Result<()> {
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(invalid("both classes must be present"));
    }
    Ok(())
}

/// Area under the step-wise precision-recall curve; tied scores form one
/// threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    check_both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let total_pos = labels.iter().filter(|l| **l).count() as f64;
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mann-Whitney AUC; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    check_both_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // midranks
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Population variance of the scores above `threshold`; 0 with fewer than
/// two such scores.
pub fn prediction_variance(scores: &[f64], threshold: f64) -> f64 {
    let above: Vec<f64> = scores.iter().copied().filter(|s| *s > threshold).collect();
    if above.len() < 2 {
        return 0.0;
    }
    let mean = above.iter().sum::<f64>() / above.len() as f64;
    above.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / above.len() as f64
}

/// Fréchet distance between Gaussians `N(mu_a, cov_a)` and `N(mu_b, cov_b)`.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let n = mu_a.len();
    if mu_b.len() != n || cov_a.shape() != (n, n) || cov_b.shape() != (n, n) {
        return Err(invalid("Fréchet inputs differ in dimension"));
    }
    let reg = DMatrix::<f64>::identity(n, n) * FRECHET_EPS;
    let a = cov_a + &reg;
    let b = cov_b + &reg;
    let sqrt_a = psd_sqrt(&a)?;
    let inner = &sqrt_a * &b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -1e-6 * (1.0 + a.trace() + b.trace())) {
        return Err(Error::Numerical(format!("covariance product has negative eigenvalue {v}")));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + a.trace() + b.trace() - 2.0 * tr_sqrt)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -1e-9) {
        return Err(Error::Numerical(format!("covariance is not positive semi-definite ({v})")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Mean and unbiased covariance of feature rows.
pub fn feature_statistics(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(invalid("need at least two feature vectors"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(invalid("feature vectors differ in length"));
    }
    let x = DMatrix::from_fn(features.len(), d, |i, j| features[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(features.len(), d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (features.len() - 1) as f64;
    Ok((mu, cov))
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = feature_statistics(a)?;
    let (mu_b, cov_b) = feature_statistics(b)?;
    frechet_gaussian(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Clip feature: codec latents averaged over frames and pooled to a 4x4
/// grid, flattened.
pub fn clip_feature(codec: &Codec, clip: &VideoClip) -> Result<Vec<f64>> {
    let z = codec.encode(clip)?.latents;
    let (n, h, w, c) = z.dims4()?;
    let (gh, gw) = (4.min(h), 4.min(w));
    if h % gh != 0 || w % gw != 0 {
        return Err(invalid(format!("latent {h}x{w} does not pool to 4x4")));
    }
    let pooled = z
        .mean(0)?
        .reshape((gh, h / gh, gw, w / gw, c))?
        .mean(3)?
        .mean(1)?
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    debug_assert_eq!(pooled.len(), gh * gw * c);
    let _ = n;
    Ok(pooled)
}

/// Fréchet distance between two clip sets in codec feature space.
pub fn frechet_latent_distance(a: &[VideoClip], b: &[VideoClip], codec: &Codec) -> Result<f64> {
    let fa = a.iter().map(|c| clip_feature(codec, c)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|c| clip_feature(codec, c)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Surrogate image and text encoders sharing one space: the text side is a
/// normalised bag of words over the prompt vocabulary, the image side a
/// ridge-regression map from per-frame codec features onto it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentModel {
    pub vocabulary: Vec<String>,
    /// `(feature_dim + 1) x vocabulary` weights, bias row last.
    weights: Vec<Vec<f64>>,
    pub trained: bool,
}

impl AlignmentModel {
    pub fn untrained(vocabulary: Vec<String>) -> Self {
        Self {
            vocabulary,
            weights: Vec::new(),
            trained: false,
        }
    }

    pub fn text_features(&self, prompt: &TextPrompt) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for tok in prompt.tokens() {
            if let Some(i) = self.vocabulary.iter().position(|w| w == tok) {
                v[i] += 1.0;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    fn frame_inputs(codec: &Codec, clip: &VideoClip) -> Result<Vec<Vec<f64>>> {
        let z = codec.encode(clip)?.latents;
        let (n, h, w, c) = z.dims4()?;
        let (gh, gw) = (4.min(h), 4.min(w));
        let pooled = z
            .reshape((n, gh, h / gh, gw, w / gw, c))?
            .mean(4)?
            .mean(2)?
            .reshape((n, gh * gw * c))?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        Ok(pooled
            .into_iter()
            .map(|mut f| {
                f.push(1.0);
                f
            })
            .collect())
    }

    /// Fits the image map on captioned clips with ridge penalty `ridge`.
    pub fn fit(vocabulary: Vec<String>, codec: &Codec, data: &[(VideoClip, TextPrompt)], ridge: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("alignment fit needs captioned clips"));
        }
        let mut model = Self::untrained(vocabulary);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (clip, prompt) in data {
            let t = model.text_features(prompt);
            for f in Self::frame_inputs(codec, clip)? {
                xs.push(f);
                ys.push(t.clone());
            }
        }
        let (n, d, k) = (xs.len(), xs[0].len(), ys[0].len());
        let x = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
        let y = DMatrix::from_fn(n, k, |i, j| ys[i][j]);
        let gram = x.transpose() * &x + DMatrix::<f64>::identity(d, d) * ridge;
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("alignment normal equations are singular".into()))?
            .solve(&(x.transpose() * y));
        model.weights = (0..d).map(|i| w.row(i).iter().copied().collect()).collect();
        model.trained = true;
        Ok(model)
    }

    /// Mean over frames of the cosine between frame and prompt features.
    pub fn score(&self, codec: &Codec, clip: &VideoClip, prompt: &TextPrompt) -> Result<f64> {
        if !self.trained {
            return Err(bad_config("alignment encoders are untrained"));
        }
        let t = self.text_features(prompt);
        let frames = Self::frame_inputs(codec, clip)?;
        let mut total = 0.0;
        for f in &frames {
            let img: Vec<f64> = (0..t.len())
                .map(|j| f.iter().zip(&self.weights).map(|(x, w)| x * w[j]).sum())
                .collect();
            total += cosine(&img, &t);
        }
        Ok(total / frames.len() as f64)
    }
}

/// Per-video anticipation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub name: String,
    pub label: u8,
    pub t_ai: Option<usize>,
    pub t_co: Option<usize>,
    pub max_score: f64,
    pub tta_05: Option<f64>,
    pub mtta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    /// Mean TTA at threshold 0.5 over positive videos, seconds.
    pub tta_05: Option<f64>,
    pub mtta: Option<f64>,
    pub var: f64,
    pub records: Vec<VideoRecord>,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
}

/// Frame labels: frames from t_ai on in positive videos are positive.
pub fn frame_labels(series: &AccidentScoreSeries) -> Vec<bool> {
    let t_ai = series.annotation.t_ai;
    series
        .frames()
        .map(|(t, _)| series.annotation.is_positive() && t_ai.is_some_and(|a| t >= a))
        .collect()
}

/// Builds the report over named score series.
pub fn evaluate_series(named: &[(String, AccidentScoreSeries)], config: serde_json::Value) -> Result<EvalReport> {
    let mut records = Vec::new();
    let mut frame_scores = Vec::new();
    let mut frame_truth = Vec::new();
    let mut video_scores = Vec::new();
    let mut video_truth = Vec::new();
    let mut ttas = Vec::new();
    let mut mttas = Vec::new();
    for (name, s) in named {
        let positive = s.annotation.is_positive();
        let max_score = s.scores.iter().copied().fold(0.0, f64::max);
        let (tta, m) = if positive {
            let (a, b) = (series_tta(s, 0.5)?, series_mtta(s)?);
            ttas.push(a);
            mttas.push(b);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        frame_scores.extend_from_slice(&s.scores);
        frame_truth.extend(frame_labels(s));
        video_scores.push(max_score);
        video_truth.push(positive);
        records.push(VideoRecord {
            name: name.clone(),
            label: s.annotation.label,
            t_ai: s.annotation.t_ai,
            t_co: s.annotation.t_co,
            max_score,
            tta_05: tta,
            mtta: m,
        });
    }
    let mut warnings = Vec::new();
    let ap = average_precision(&frame_scores, &frame_truth).ok();
    let auc_v = auc(&video_scores, &video_truth).ok();
    if ap.is_none() || auc_v.is_none() {
        warnings.push("single-class evaluation set: AP and AUC omitted".to_string());
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    Ok(EvalReport {
        videos: named.len(),
        positives: video_truth.iter().filter(|v| **v).count(),
        ap,
        auc: auc_v,
        tta_05: mean(&ttas),
        mtta: mean(&mttas),
        var: prediction_variance(&frame_scores, 0.5),
        records,
        warnings,
        config,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_tta_csv(&self, path: &Path) -> Result<()> {
        let opt_u = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        let opt_f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut text = String::from("video,label,t_ai,t_co,max_score,tta_05,mtta\n");
        for r in &self.records {
            text.push_str(&format!(
                "{},{},{},{},{:.6},{},{}\n",
                r.name,
                r.label,
                opt_u(r.t_ai),
                opt_u(r.t_co),
                r.max_score,
                opt_f(r.tta_05),
                opt_f(r.mtta)
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Score curve as SVG with the 0.5 threshold line and a t_ai marker.
pub fn score_curve_svg(title: &str, series: &AccidentScoreSeries, total_frames: usize) -> String {
    let (w, h, pad) = (480.0, 200.0, 30.0);
    let x = |t: f64| pad + (w - 2.0 * pad) * t / (total_frames.max(2) - 1) as f64;
    let y = |p: f64| h - pad - (h - 2.0 * pad) * p;
    let points: Vec<String> = series.frames().map(|(t, s)| format!("{:.1},{:.1}", x(t as f64), y(s))).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"18\" font-size=\"12\">{title}</text>\n\
         <line class=\"axis\" x1=\"{pad}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n\
         <line class=\"axis\" x1=\"{pad}\" y1=\"{y0:.1}\" x2=\"{pad}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n\
         <line class=\"threshold\" x1=\"{pad}\" y1=\"{yt:.1}\" x2=\"{x1:.1}\" y2=\"{yt:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        y0 = y(0.0),
        y1 = y(1.0),
        x1 = x((total_frames.max(2) - 1) as f64),
        yt = y(0.5),
    );
    if let Some(t_ai) = series.annotation.t_ai {
        svg.push_str(&format!(
            "<line class=\"t_ai\" x1=\"{xa:.1}\" y1=\"{:.1}\" x2=\"{xa:.1}\" y2=\"{:.1}\" stroke=\"red\"/>\n",
            y(0.0),
            y(1.0),
            xa = x(t_ai as f64)
        ));
    }
    svg.push_str(&format!(
        "<polyline class=\"score\" fill=\"none\" stroke=\"blue\" points=\"{}\"/>\n</svg>\n",
        points.join(" ")
    ));
    svg
}
