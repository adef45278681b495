use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

/// Decoupled-weight-decay Adam with exportable moment state.
pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Global L2 norm of the gradients of the tracked variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = self.grad_norm(grads)?;
                if !n.is_finite() {
                    return Err(Error::Numerical("non-finite gradient norm".into()));
                }
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = (g.detach() * scale)?;
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor().detach();
            let theta = ((&theta * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            var.set(&theta)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`, for checkpointing.
    pub fn state(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (tag, t) in [("m", &self.m[i]), ("v", &self.v[i])] {
                let data = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
                out.push((format!("{tag}.{name}"), var.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, step: usize, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for tag in ["m", "v"] {
                let key = format!("{tag}.{name}");
                let (_, dims, data) = entries
                    .iter()
                    .find(|(k, _, _)| *k == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state {key}")))?;
                let t = Tensor::from_slice(data, dims.as_slice(), var.device())?.to_dtype(var.dtype())?;
                if tag == "m" {
                    self.m[i] = t;
                } else {
                    self.v[i] = t;
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn minimises_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(
            vec![("x".into(), x.clone())],
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn zero_steps_leave_parameters() {
        let x = Var::ones(3, DType::F32, &Device::Cpu).unwrap();
        let opt = AdamW::new(vec![("x".into(), x.clone())], AdamWConfig::default()).unwrap();
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(x.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }
}
