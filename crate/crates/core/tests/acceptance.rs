//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). The scaled end-to-end run
//! writes into a temporary directory unless `EQTAA_ACCEPT_OUT` names one.
//! The process exits 0 even when a criterion fails; the printed lines are
//! the verdict.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use eqtaa_core::config::RunConfig;
use eqtaa_core::diffusion::{
    cross_attention, ddim_reverse, diffusion_loss, lora_wrap, make_schedule, spatial_attention, temporal_attention,
    train_avd, AttnLayer, AvdModel, AvdSample, AvdTrainConfig, AvdTrainState, LoraLinear, ScheduleShape, UNetConfig,
};
use eqtaa_core::losses::{erm_loss, etl_loss, total_loss, LossConfig};
use eqtaa_core::metrics;
use eqtaa_core::nn::{multi_head_attention, ConvP3d, Group, Linear, ParamStore};
use eqtaa_core::pipeline::{self, TaaVariant, TripleSplit};
use eqtaa_core::seed::{normal_tensor, rng};
use eqtaa_core::synth::{EventAnnotation, PromptPool};
use eqtaa_core::taa::{top_k_indices, TaaConfig, TaaModel};
use rand::Rng;

// pinned tolerances
const ALPHA_RATIO_REL: f64 = 1e-14;
const SCHEDULE_TIME: Duration = Duration::from_secs(1);
const DDIM_MAX_ERR: f64 = 1e-3;
const DDIM_TIME: Duration = Duration::from_secs(10);
const ROW_SUM_TOL: f64 = 1e-5;
const EQUIVARIANCE_TOL: f64 = 1e-9;
const CA_HAND_TOL: f64 = 1e-6;
const P3D_TOL: f64 = 1e-6;
const HEAD_SUM_TOL: f64 = 1e-6;
const LOSS_GRAD_REL: f64 = 1e-4;
const DIFFUSION_GRAD_REL: f64 = 1e-3;
const HAND_METRIC_TOL: f64 = 1e-9;
const E2E_AP: f64 = 0.85;
const E2E_AUC: f64 = 0.85;
const E2E_TIME: Duration = Duration::from_secs(60 * 60);
const EQUIVARIANT_SHARE: f64 = 0.8;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    normal_tensor(&mut rng(seed, "acceptance", 0), shape, DType::F64).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .and_then(|d| d.abs())
        .and_then(|d| d.flatten_all())
        .and_then(|d| d.max(0))
        .and_then(|d| d.to_dtype(DType::F64))
        .and_then(|d| d.to_scalar::<f64>())
        .unwrap_or(f64::INFINITY)
}

fn schedule_algebra() -> Outcome {
    let t0 = Instant::now();
    let s = make_schedule(1000, 1e-4, 0.02, ScheduleShape::Linear).map_err(err)?;
    let mut worst: f64 = 0.0;
    for k in 1..=1000 {
        let ratio = s.alpha_bar(k) / s.alpha_bar(k - 1);
        worst = worst.max((ratio - s.alpha(k)).abs() / s.alpha(k));
    }
    let decreasing = (1..=1000).all(|k| s.alpha_bar(k) < s.alpha_bar(k - 1));
    let dt = t0.elapsed();
    check(
        worst <= ALPHA_RATIO_REL && decreasing && dt < SCHEDULE_TIME,
        format!("max rel ratio error {worst:.1e}, strictly decreasing {decreasing}, {dt:?}"),
    )
}

fn ddim_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for (k, m) in [(1000, 50), (20, 1)] {
        let s = make_schedule(k, 1e-4, 0.02, ScheduleShape::Linear).map_err(err)?;
        let z0 = normal_tensor(&mut rng(k as u64, "oracle-z0", 0), (1, 22, 16, 16, 4), DType::F32).map_err(err)?;
        let eps = normal_tensor(&mut rng(k as u64, "oracle-eps", 0), (1, 22, 16, 16, 4), DType::F32).map_err(err)?;
        let injected = eps.clone();
        let mut oracle = |_: &Tensor, _: usize| Ok(injected.clone());
        let z = ddim_reverse(&z0, &eps, &s, m, &mut oracle).map_err(err)?;
        worst = worst.max(max_abs_diff(&z, &z0));
    }
    let dt = t0.elapsed();
    check(worst < DDIM_MAX_ERR && dt < DDIM_TIME, format!("max abs error {worst:.2e}, {dt:?}"))
}

fn attention_layer(store: &ParamStore, c: usize, context: Option<usize>) -> AttnLayer {
    let mut layer = AttnLayer::new(&store.root().pp("a"), c, context, 2, 0).unwrap();
    // the zero-initialised output projection would hide the attention
    layer.out = LoraLinear::plain(Linear::new(&store.root().pp("o"), c, c).unwrap());
    layer
}

fn row_sum_error(probs: &Tensor) -> f64 {
    let s = probs.sum(candle_core::D::Minus1).unwrap();
    max_abs_diff(&s, &s.ones_like().unwrap())
}

fn attention_suite() -> Outcome {
    let mut worst_rows: f64 = 0.0;
    let mut worst_eq: f64 = 0.0;
    for i in 0..50u64 {
        let store = ParamStore::new(i, DType::F64);
        let layer = attention_layer(&store, 4, None);
        let z = randn(100 + i, &[1, 3, 2, 3, 4]);
        // spatial: tokens of one frame; temporal: frames of one site
        let spatial_seq = z.reshape((3, 6, 4)).unwrap();
        let temporal_seq = z.permute((0, 2, 3, 1, 4)).unwrap().contiguous().unwrap().reshape((6, 3, 4)).unwrap();
        for seq in [&spatial_seq, &temporal_seq] {
            worst_rows = worst_rows.max(row_sum_error(&layer.attend(seq, None).unwrap().probs));
        }
        let wperm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let a = spatial_attention(&layer, &z.index_select(&wperm, 3).unwrap()).unwrap();
        let b = spatial_attention(&layer, &z).unwrap().index_select(&wperm, 3).unwrap();
        worst_eq = worst_eq.max(max_abs_diff(&a, &b));
        let tperm = Tensor::new(&[1u32, 2, 0], &Device::Cpu).unwrap();
        let a = temporal_attention(&layer, &z.index_select(&tperm, 1).unwrap()).unwrap();
        let b = temporal_attention(&layer, &z).unwrap().index_select(&tperm, 1).unwrap();
        worst_eq = worst_eq.max(max_abs_diff(&a, &b));
    }
    let ca = cross_attention_hand_error()?;
    check(
        worst_rows <= ROW_SUM_TOL && worst_eq <= EQUIVARIANCE_TOL && ca <= CA_HAND_TOL,
        format!("row-sum err {worst_rows:.1e}, permutation err {worst_eq:.1e}, CA hand err {ca:.1e}"),
    )
}

/// One query over two text tokens, one and two heads, against scalar sums.
fn cross_attention_hand_error() -> Result<f64, String> {
    let dev = Device::Cpu;
    let q = Tensor::new(&[[[1.0f64, 0.0]]], &dev).map_err(err)?;
    let k = Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0]]], &dev).map_err(err)?;
    let v = Tensor::new(&[[[2.0f64, -1.0], [4.0, 3.0]]], &dev).map_err(err)?;
    let one = multi_head_attention(&q, &k, &v, 1).map_err(err)?.out;
    let s = 1.0 / 2f64.sqrt();
    let p0 = s.exp() / (s.exp() + 1.0);
    let expect1 = [p0 * 2.0 + (1.0 - p0) * 4.0, p0 * -1.0 + (1.0 - p0) * 3.0];
    // two heads of width 1: head 0 sees scores (1, 0), head 1 sees (0, 0)
    let two = multi_head_attention(&q, &k, &v, 2).map_err(err)?.out;
    let h0 = 1f64.exp() / (1f64.exp() + 1.0);
    let expect2 = [h0 * 2.0 + (1.0 - h0) * 4.0, 0.5 * -1.0 + 0.5 * 3.0];
    let got1: Vec<f64> = one.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
    let got2: Vec<f64> = two.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (g, e) in got1.iter().zip(expect1).chain(got2.iter().zip(expect2)) {
        worst = worst.max((g - e).abs());
    }
    // the block-level wrapper on the same numbers: identity projections
    let store = ParamStore::new(0, DType::F64);
    let mut layer = AttnLayer::new(&store.root().pp("ca"), 2, Some(2), 1, 0).map_err(err)?;
    let eye = || LoraLinear::plain(Linear { weight: Tensor::eye(2, DType::F64, &dev).unwrap(), bias: None });
    layer.q = eye();
    layer.k = eye();
    layer.v = eye();
    layer.out = eye();
    let z = Tensor::new(&[1.0f64, -1.0], &dev).map_err(err)?.reshape((1, 1, 1, 1, 2)).map_err(err)?;
    let text = k.clone();
    let y: Vec<f64> = cross_attention(&layer, &z, &text).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(err)?;
    let n: Vec<f64> = layer.norm.forward(&z).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(err)?;
    // head c attends with query n[c] to keys text[:, c] and reads values text[:, c]
    let sig = |x: f64| x.exp() / (x.exp() + 1.0);
    let expect = [1.0 + sig(n[0]), -1.0 + sig(n[1])];
    for (g, e) in y.iter().zip(expect) {
        worst = worst.max((g - e).abs());
    }
    Ok(worst)
}

fn conv_p3d_separability() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let store = ParamStore::new(i, DType::F64);
        let conv = ConvP3d::new(&store.root(), 3, 5).map_err(err)?;
        let x = randn(200 + i, &[2, 4, 5, 6, 3]);
        let y = conv.forward(&x).map_err(err)?;
        let w: Vec<Vec<f64>> = conv.spatial.lin.weight.to_vec2().map_err(err)?;
        let bias: Vec<f64> = conv.spatial.lin.bias.as_ref().unwrap().to_vec1().map_err(err)?;
        let xv: Vec<f64> = x.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
        let yv: Vec<f64> = y.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
        let (b, t, h, wd, c, co) = (2, 4, 5, 6, 3, 5);
        let at = |bi: usize, ti: usize, yy: isize, xx: isize, ci: usize| {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                0.0
            } else {
                xv[(((bi * t + ti) * h + yy as usize) * wd + xx as usize) * c + ci]
            }
        };
        for bi in 0..b {
            for ti in 0..t {
                for yy in 0..h {
                    for xx in 0..wd {
                        for o in 0..co {
                            let mut acc = bias[o];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    for ci in 0..c {
                                        let v = at(bi, ti, yy as isize + dy as isize - 1, xx as isize + dx as isize - 1, ci);
                                        acc += v * w[(dy * 3 + dx) * c + ci][o];
                                    }
                                }
                            }
                            let got = yv[(((bi * t + ti) * h + yy) * wd + xx) * co + o];
                            worst = worst.max((got - acc).abs());
                        }
                    }
                }
            }
        }
    }
    check(worst <= P3D_TOL, format!("max deviation from frame-wise 2D conv {worst:.1e} over 10 inputs"))
}

fn brute_force_kept(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let ahead = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            ahead < k
        })
        .collect()
}

fn adaptive_token_sampling() -> Outcome {
    let cfg = TaaConfig {
        dim: 32,
        heads: 4,
        ..TaaConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    let mut instances = 0;
    for i in 0..50u64 {
        let model = TaaModel::new(TaaConfig { seed: i, ..cfg.clone() }, 64, 64).map_err(err)?;
        let frames = normal_tensor(&mut rng(i, "ats-frames", 0), (1, 64, 64, 3), DType::F32)
            .and_then(|t| t.affine(0.2, 0.5))
            .map_err(err)?;
        let tokens = model.s_trans(&model.patchify(&frames).map_err(err)?).map_err(err)?;
        let (_, profiles) = model.adp_tok_s(&tokens, true).map_err(err)?;
        for p in profiles.iter().flatten() {
            for h in &p.head_scores {
                worst = worst.max((h.iter().sum::<f64>() - 1.0).abs());
            }
            if p.kept != brute_force_kept(&p.scores, p.kept.len()) {
                mismatches += 1;
            }
        }
        instances += 1;
    }
    // tie-heavy score vectors
    for i in 0..50u64 {
        let mut r = rng(i, "ats-ties", 0);
        let n: usize = r.random_range(2..=16);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64 / 4.0).collect();
        let k = n.div_ceil(2);
        if top_k_indices(&scores, k) != brute_force_kept(&scores, k) {
            mismatches += 1;
        }
        instances += 1;
    }
    check(
        worst <= HEAD_SUM_TOL && mismatches == 0,
        format!("{instances} instances, per-head sum err {worst:.1e}, selection mismatches {mismatches}"),
    )
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic vs central-difference gradient of `f` at `x0`.
fn grad_rel_error(f: &dyn Fn(&Tensor) -> Tensor, x0: &Tensor) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut x = base.clone();
                x[i] += d;
                let t = Tensor::from_vec(x, x0.dims(), &Device::Cpu).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    rel_error(&g, &numeric)
}

fn loss_gradients() -> Outcome {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut r = rng(i, "loss-grad", 0);
        let n = r.random_range(2..=6);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let probs = Tensor::from_vec(probs, n, &Device::Cpu).unwrap();
        let t_ai = r.random_range(0..n);
        let pos = EventAnnotation::accident(t_ai, n, None, 0).unwrap();
        let neg = EventAnnotation::normal(None, 0);
        worst = worst.max(grad_rel_error(&|p| erm_loss(p, 0, &pos, 30.0, &cfg).unwrap(), &probs));
        worst = worst.max(grad_rel_error(&|p| erm_loss(p, 0, &neg, 30.0, &cfg).unwrap(), &probs));
        let (w, d) = (r.random_range(1..=3), r.random_range(2..=5));
        let a = randn(300 + 3 * i, &[w, d]);
        let p = randn(301 + 3 * i, &[w, d]);
        let q = randn(302 + 3 * i, &[w, d]);
        // margin large enough that no hinge sits on its kink
        let m = 50.0;
        worst = worst.max(grad_rel_error(&|x| etl_loss(x, &p, &q, m).unwrap(), &a));
        worst = worst.max(grad_rel_error(&|x| etl_loss(&a, x, &q, m).unwrap(), &p));
        worst = worst.max(grad_rel_error(&|x| etl_loss(&a, &p, x, m).unwrap(), &q));
        let parts = Tensor::from_vec(vec![r.random_range(0.1..2.0), r.random_range(0.1..2.0), r.random_range(0.1..2.0)], 3, &Device::Cpu).unwrap();
        worst = worst.max(grad_rel_error(
            &|x| {
                total_loss(&x.get(0).unwrap(), &x.get(1).unwrap(), &x.get(2).unwrap(), 0.5).unwrap()
            },
            &parts,
        ));
    }
    let diffusion = diffusion_gradient_error().map_err(err)?;
    check(
        worst < LOSS_GRAD_REL && diffusion < DIFFUSION_GRAD_REL,
        format!("losses rel err {worst:.1e} (20 instances), diffusion loss rel err {diffusion:.1e}"),
    )
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        latent_channels: 2,
        widths: [4, 8, 8],
        head_dim: 4,
        groups: 2,
        time_dim: 8,
        text_width: 8,
        text_tokens: 6,
        lora_rank: 0,
    }
}

/// Central differences on 24 random coordinates of the toy-width U-Net in
/// `f64`, after jittering every parameter so no gradient path is zero.
fn diffusion_gradient_error() -> eqtaa_core::Result<f64> {
    let pool = PromptPool::toy();
    let model = AvdModel::with_dtype(tiny_unet(), pool.clone(), 5, DType::F64)?;
    let mut r = rng(5, "diff-grad", 0);
    let vars = model.store().all();
    for (i, (_, v)) in vars.iter().enumerate() {
        let jitter = normal_tensor(&mut rng(i as u64, "jitter", 0), v.shape(), DType::F64)?;
        v.set(&(v.as_tensor() + (jitter * 0.1)?)?)?;
    }
    let sched = make_schedule(50, 1e-4, 0.02, ScheduleShape::Linear)?;
    let samples: Vec<AvdSample> = (0..2)
        .map(|i| AvdSample {
            latents: randn(400 + i, &[3, 4, 4, 2]),
            prompt: pool.get(i as usize * 9).unwrap().clone(),
        })
        .collect();
    let batch: Vec<&AvdSample> = samples.iter().collect();
    let steps = [7, 31];
    let eps = randn(410, &[2, 3, 4, 4, 2]);
    let loss = || diffusion_loss(&model, &sched, &batch, &steps, &eps).and_then(|l| Ok(l.to_scalar::<f64>()?));
    let grads = diffusion_loss(&model, &sched, &batch, &steps, &eps)?.backward()?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..24 {
        let (_, var) = &vars[r.random_range(0..vars.len())];
        let n = var.elem_count();
        let j = r.random_range(0..n);
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all()?.to_vec1()?;
        let orig = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let set = |d: f64| -> eqtaa_core::Result<()> {
            let mut x = orig.clone();
            x[j] += d;
            var.set(&Tensor::from_vec(x, var.shape(), &Device::Cpu)?)?;
            Ok(())
        };
        set(h)?;
        let up = loss()?;
        set(-h)?;
        let down = loss()?;
        set(0.0)?;
        analytic.push(g[j]);
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(rel_error(&analytic, &numeric))
}

fn hand_metrics() -> Outcome {
    // 1-indexed t_ai = 3 is frame 2 with 0-based frames
    let tta = metrics::tta_at(0, &[0.1, 0.6, 0.7], 0.5, 2, 30.0).map_err(err)?;
    let var = metrics::prediction_variance(&[0.6, 0.8], 0.5);
    let ap = metrics::average_precision(&[0.9, 0.6, 0.3], &[true, false, true]).map_err(err)?;
    let one = nalgebra::DMatrix::from_element(1, 1, 1.0);
    let fd = metrics::frechet_gaussian(
        &nalgebra::DVector::from_element(1, 0.0),
        &one,
        &nalgebra::DVector::from_element(1, 1.0),
        &one,
    )
    .map_err(err)?;
    let errs = [
        (tta - 1.0 / 30.0).abs(),
        (var - 0.01).abs(),
        (ap - 0.8333333333333334).abs(),
        (fd - 1.0).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    check(
        worst <= HAND_METRIC_TOL,
        format!("TTA {tta:.12}, Var {var:.12}, AP {ap:.12}, Frechet {fd:.12}"),
    )
}

fn lora_identity() -> Outcome {
    let store = ParamStore::new(0, DType::F32);
    let base = Linear::new(&store.root().pp("p"), 16, 8).map_err(err)?;
    let wrapped = lora_wrap(&store.root().pp("p"), base.clone(), 4).map_err(err)?;
    let x = normal_tensor(&mut rng(0, "lora-x", 0), (5, 16), DType::F32).map_err(err)?;
    let a: Vec<f32> = base.forward(&x).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(err)?;
    let b: Vec<f32> = wrapped.forward(&x).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(err)?;
    let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let pool = PromptPool::toy();
    let base_model = AvdModel::new(tiny_unet(), pool.clone(), 1).map_err(err)?;
    let ck = base_model.to_checkpoint(serde_json::Value::Null, Vec::new()).map_err(err)?;
    let model = AvdModel::from_checkpoint(&ck, Some(2)).map_err(err)?;
    let base_params = |m: &AvdModel| -> Vec<_> {
        m.store()
            .snapshot()
            .unwrap()
            .into_iter()
            .filter(|(n, _, _)| m.store().group_of(n) == Some(Group::Base))
            .collect()
    };
    let before = base_params(&model);
    let samples: Vec<AvdSample> = (0..3)
        .map(|i| AvdSample {
            latents: normal_tensor(&mut rng(i, "lora-lat", 0), (3, 4, 4, 2), DType::F32).unwrap(),
            prompt: pool.get(i as usize * 5).unwrap().clone(),
        })
        .collect();
    let sched = make_schedule(50, 1e-4, 0.02, ScheduleShape::Linear).map_err(err)?;
    let cfg = AvdTrainConfig {
        steps: 5,
        lr: 1e-2,
        frozen_base: true,
        ..AvdTrainConfig::default()
    };
    train_avd(&model, &samples, &sched, &cfg, AvdTrainState::default(), |_| {}).map_err(err)?;
    let frozen = base_params(&model) == before;
    check(identical && frozen, format!("fresh wrap bit-exact {identical}, base bit-identical after 5 steps {frozen}"))
}

struct EndToEnd {
    full: metrics::EvalReport,
    no_etl: metrics::EvalReport,
    elapsed: Duration,
}

fn run_end_to_end() -> Result<EndToEnd, String> {
    let t0 = Instant::now();
    let keep = std::env::var("EQTAA_ACCEPT_OUT").ok();
    let tmp = tempfile::tempdir().map_err(err)?;
    let out = keep.map(std::path::PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let mut cfg = RunConfig::toy();
    cfg.run.out = out;
    let stage = |name: &str| eprintln!("[acceptance] {name} at {:?}", t0.elapsed());
    stage("synth");
    pipeline::cmd_synth(&cfg, None).map_err(err)?;
    stage("train-codec");
    pipeline::cmd_train_codec(&cfg).map_err(err)?;
    stage("train-avd");
    pipeline::cmd_train_avd(&cfg, false).map_err(err)?;
    stage("gen-triples");
    pipeline::cmd_gen_triples(&cfg, TripleSplit::Train, cfg.triples.count).map_err(err)?;
    pipeline::cmd_gen_triples(&cfg, TripleSplit::Heldout, cfg.triples.heldout).map_err(err)?;
    let full = TaaVariant::default();
    let no_etl = TaaVariant { no_etl: true, ..full };
    stage("train-taa");
    pipeline::cmd_train_taa(&cfg, full).map_err(err)?;
    pipeline::cmd_train_taa(&cfg, no_etl).map_err(err)?;
    stage("evaluate");
    let full = pipeline::cmd_evaluate(&cfg, full).map_err(err)?;
    let no_etl = pipeline::cmd_evaluate(&cfg, no_etl).map_err(err)?;
    Ok(EndToEnd {
        full,
        no_etl,
        elapsed: t0.elapsed(),
    })
}

fn end_to_end(run: &Result<EndToEnd, String>) -> Outcome {
    let r = run.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let (ap, auc, mtta) = (r.full.ap.unwrap_or(0.0), r.full.auc.unwrap_or(0.0), r.full.mtta.unwrap_or(0.0));
    let ok = ap >= E2E_AP && auc >= E2E_AUC && mtta > 0.0 && r.full.var <= r.no_etl.var && r.elapsed <= E2E_TIME;
    check(
        ok,
        format!(
            "AP {ap:.3}, AUC {auc:.3}, mTTA {mtta:.3}s, Var {:.4} vs no-ETL {:.4}, wall {:.1} min",
            r.full.var,
            r.no_etl.var,
            r.elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn equivariance(run: &Result<EndToEnd, String>) -> Outcome {
    let r = run.as_ref().map_err(|e| format!("pipeline failed: {e}"))?;
    let share = r.full.config["equivariance_rate"]
        .as_f64()
        .ok_or_else(|| "no held-out triples were scored".to_string())?;
    check(share >= EQUIVARIANT_SHARE, format!("pseudo-accident above pseudo-normal on {:.0}% of held-out triples", share * 100.0))
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    ok
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let quick = std::env::var("EQTAA_ACCEPT_SKIP_E2E").is_ok();
    let mut passed = 0;
    let mut results = vec![
        report(1, "schedule algebra", schedule_algebra()),
        report(2, "DDIM oracle inversion", ddim_oracle()),
        report(3, "attention suite", attention_suite()),
        report(4, "Conv-P3D separability", conv_p3d_separability()),
        report(5, "adaptive token sampling", adaptive_token_sampling()),
        report(6, "loss gradient checks", loss_gradients()),
        report(7, "hand-value metrics", hand_metrics()),
        report(8, "LoRA identity", lora_identity()),
    ];
    if quick {
        println!("criterion  9 SKIP scaled end-to-end: EQTAA_ACCEPT_SKIP_E2E is set");
        println!("criterion 10 SKIP equivariance property: EQTAA_ACCEPT_SKIP_E2E is set");
    } else {
        let run = run_end_to_end();
        results.push(report(9, "scaled end-to-end", end_to_end(&run)));
        results.push(report(10, "equivariance property", equivariance(&run)));
    }
    for ok in &results {
        passed += *ok as usize;
    }
    println!("acceptance: {passed}/{} criteria passed", results.len());
}
