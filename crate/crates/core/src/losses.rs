//! Anticipation objectives and the triple-set training loop.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Error, Result};
use crate::nn::{AdamW, AdamWConfig};
use crate::seed;
use crate::synth::{EventAnnotation, TripleSet};
use crate::taa::TaaModel;

/// Lower bound applied to probabilities inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of negative samples.
    pub neg_weight: f64,
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            neg_weight: 0.7,
            margin: 0.5,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neg_weight > 0.0 && self.neg_weight <= 1.0) {
            return Err(bad_config(format!("negative weight {} outside (0, 1]", self.neg_weight)));
        }
        if !(self.margin > 0.0) || !(self.lambda >= 0.0) {
            return Err(bad_config("margin must be positive and lambda non-negative"));
        }
        Ok(())
    }
}

/// Earliness weight `exp(-max(0, t_ai - t) / r)` of every scored frame.
pub fn earliness_weights(start: usize, len: usize, t_ai: usize, frame_rate: f64) -> Vec<f64> {
    (start..start + len)
        .map(|t| (-(t_ai.saturating_sub(t) as f64) / frame_rate).exp())
        .collect()
}

/// Cross-entropy over scored frames `start..`: `-w mean log(1 - p)` for a
/// negative clip, `-mean exp(-tau / r) log p` for a positive one.
pub fn erm_loss(probs: &Tensor, start: usize, annotation: &EventAnnotation, frame_rate: f64, cfg: &LossConfig) -> Result<Tensor> {
    let n = probs.dim(0)?;
    if n == 0 {
        return Err(invalid("empty score series"));
    }
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    if annotation.is_positive() {
        let t_ai = annotation
            .t_ai
            .ok_or_else(|| invalid("positive sample without t_ai"))?;
        let w = earliness_weights(start, n, t_ai, frame_rate);
        let w = Tensor::from_vec(w, n, probs.device())?.to_dtype(probs.dtype())?;
        Ok((p.log()? * w)?.mean_all()?.neg()?)
    } else {
        Ok((p.affine(-1.0, 1.0)?.log()?.mean_all()? * (-cfg.neg_weight))?)
    }
}

/// Mean hinge `max(0, |a - neg|^2 - |a - pos|^2 + margin)` over aligned
/// feature rows `(w, d)`.
pub fn etl_loss(anchor: &Tensor, pos: &Tensor, neg: &Tensor, margin: f64) -> Result<Tensor> {
    if anchor.dims() != pos.dims() || anchor.dims() != neg.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", anchor.dims()),
            got: format!("{:?} / {:?}", pos.dims(), neg.dims()),
        });
    }
    if anchor.dim(0)? == 0 {
        return Err(invalid("empty causal window"));
    }
    let d_neg = (anchor - neg)?.sqr()?.sum(1)?;
    let d_pos = (anchor - pos)?.sqr()?.sum(1)?;
    Ok(((d_neg - d_pos)? + margin)?.relu()?.mean_all()?)
}

/// `erm_pos + erm_neg + lambda * etl`.
pub fn total_loss(erm_pos: &Tensor, erm_neg: &Tensor, etl: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(((erm_pos + erm_neg)? + (etl * lambda)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaaTrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many triple sets; `None` runs every epoch in full.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TaaTrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 1,
            max_steps: None,
            clip_norm: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaaStepLog {
    pub step: usize,
    pub erm: f64,
    pub etl: f64,
    pub total: f64,
    pub wall_time: f64,
}

/// Losses of one triple set. Frames outside the generated window are shared
/// with the anchor, so their features are computed once from the anchor.
pub fn triple_losses(model: &TaaModel, triple: &TripleSet, cfg: &LossConfig) -> Result<(Tensor, Tensor, Tensor)> {
    let n = model.config.window;
    let (t_ai, t_co, len) = (triple.t_ai(), triple.t_co(), triple.window());
    let frames = triple.anchor.frames();
    if t_ai + 1 < n {
        return Err(invalid(format!("t_ai {t_ai} precedes the first scored frame {}", n - 1)));
    }
    let anchor = model.frame_features(&triple.anchor.to_tensor(DType::F32)?)?;
    let splice = |seg: &Tensor| -> Result<Tensor> {
        let mid = model.frame_features(seg)?;
        let mut parts = vec![anchor.narrow(0, 0, t_ai)?, mid];
        if t_ai + len < frames {
            parts.push(anchor.narrow(0, t_ai + len, frames - t_ai - len)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    };
    let pos = splice(&triple.pos_segment().to_tensor(DType::F32)?)?;
    let neg = splice(&triple.neg_segment().to_tensor(DType::F32)?)?;
    let all: Vec<usize> = (n - 1..frames).collect();
    let window: Vec<usize> = (t_ai..=t_co).collect();
    let out_pos = model.score_windows(&pos, &all)?;
    let out_neg = model.score_windows(&neg, &all)?;
    let out_anchor = model.score_windows(&anchor, &window)?;
    let r = triple.anchor.frame_rate();
    let erm_pos = erm_loss(&out_pos.probs, n - 1, &triple.annotation, r, cfg)?;
    let erm_neg = erm_loss(&out_neg.probs, n - 1, &triple.neg_annotation(), r, cfg)?;
    let off = t_ai - (n - 1);
    let etl = etl_loss(
        &out_anchor.pooled,
        &out_pos.pooled.narrow(0, off, window.len())?,
        &out_neg.pooled.narrow(0, off, window.len())?,
        cfg.margin,
    )?;
    Ok((erm_pos, erm_neg, etl))
}

/// One pass per epoch over the triple sets in a seeded order, one optimiser
/// step per triple set.
pub fn train_eq_taa(
    model: &TaaModel,
    triples: &[TripleSet],
    config: &TaaTrainConfig,
    mut on_step: impl FnMut(&TaaStepLog),
) -> Result<Vec<TaaStepLog>> {
    config.loss.validate()?;
    if triples.is_empty() {
        return Err(invalid("no triple sets to train on"));
    }
    let mut opt = AdamW::new(
        model.store().trainable(),
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
            ..AdamWConfig::default()
        },
    )?;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    let start = Instant::now();
    let mut logs = Vec::new();
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, "taa-order", epoch as u64));
        for i in order {
            let step = logs.len();
            if step >= limit {
                break 'epochs;
            }
            let (erm_pos, erm_neg, etl) = triple_losses(model, &triples[i], &config.loss)?;
            let total = total_loss(&erm_pos, &erm_neg, &etl, config.loss.lambda)?;
            let value = total.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_good_step: step.saturating_sub(1),
                });
            }
            opt.step(&total.backward()?)?;
            let log = TaaStepLog {
                step,
                erm: (erm_pos + erm_neg)?.to_scalar::<f32>()? as f64,
                etl: etl.to_scalar::<f32>()? as f64,
                total: value,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_step(&log);
            logs.push(log);
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn negative_hand_case() {
        let l = erm_loss(&t(&[0.5, 0.5]), 0, &EventAnnotation::normal(None, 0), 30.0, &LossConfig::default()).unwrap();
        assert!((scalar(l) - 0.7 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positive_perfect_and_weights() {
        let a = EventAnnotation::accident(3, 5, None, 0).unwrap();
        let l = erm_loss(&t(&[1.0, 1.0, 1.0]), 2, &a, 30.0, &LossConfig::default()).unwrap();
        assert!(scalar(l) < 1e-6);
        let w = earliness_weights(0, 6, 3, 30.0);
        assert_eq!(w[3], 1.0);
        assert_eq!(w[5], 1.0);
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
        assert!((w[0] - (-3.0f64 / 30.0).exp()).abs() < 1e-15);
        let mut missing = a;
        missing.t_ai = None;
        assert!(erm_loss(&t(&[0.5]), 0, &missing, 30.0, &LossConfig::default()).is_err());
    }

    #[test]
    fn etl_hand_cases() {
        let z = t(&[0.0, 0.0]).reshape((1, 2)).unwrap();
        assert!((scalar(etl_loss(&z, &z, &z, 0.5).unwrap()) - 0.5).abs() < 1e-15);
        let pos = t(&[1.0, 1.0]).reshape((1, 2)).unwrap();
        assert_eq!(scalar(etl_loss(&z, &pos, &z, 0.5).unwrap()), 0.0);
        let neg = t(&[1.0, 0.0]).reshape((1, 2)).unwrap();
        assert!((scalar(etl_loss(&z, &z, &neg, 0.5).unwrap()) - 1.5).abs() < 1e-15);
        let empty = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(etl_loss(&empty, &empty, &empty, 0.5).is_err());
    }

    #[test]
    fn total_is_linear() {
        let l = total_loss(&t(&[0.6]), &t(&[0.4]), &t(&[0.4]), 0.5).unwrap();
        assert!((l.to_vec1::<f64>().unwrap()[0] - 1.2).abs() < 1e-15);
        let l0 = total_loss(&t(&[0.6]), &t(&[0.4]), &t(&[0.4]), 0.0).unwrap();
        assert!((l0.to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_bounds() {
        assert!(LossConfig { neg_weight: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    fn finite_difference_check(f: impl Fn(&Tensor) -> Tensor, x0: &[f64], shape: (usize, usize)) {
        let var = candle_core::Var::from_tensor(&t(x0).reshape(shape).unwrap()).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut x = x0.to_vec();
                x[i] += d;
                scalar(f(&t(&x).reshape(shape).unwrap()))
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let pos = EventAnnotation::accident(2, 4, None, 0).unwrap();
        let probs = [0.2, 0.45, 0.6, 0.8];
        finite_difference_check(|p| erm_loss(&p.flatten_all().unwrap(), 0, &pos, 30.0, &cfg).unwrap(), &probs, (1, 4));
        let neg = EventAnnotation::normal(None, 0);
        finite_difference_check(|p| erm_loss(&p.flatten_all().unwrap(), 0, &neg, 30.0, &cfg).unwrap(), &probs, (1, 4));
        let other = t(&[0.3, -0.2, 0.1, 0.4, 0.0, 0.2]).reshape((2, 3)).unwrap();
        let third = t(&[0.1, 0.1, -0.3, 0.2, 0.5, -0.1]).reshape((2, 3)).unwrap();
        let x = [0.05, 0.3, -0.1, 0.25, 0.2, 0.1];
        finite_difference_check(|a| etl_loss(a, &other, &third, 0.5).unwrap(), &x, (2, 3));
        finite_difference_check(|p| etl_loss(&other, p, &third, 0.5).unwrap(), &x, (2, 3));
        finite_difference_check(|n| etl_loss(&other, &third, n, 0.5).unwrap(), &x, (2, 3));
    }
}
