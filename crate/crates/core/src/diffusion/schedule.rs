//! Variance schedules and the closed-form forward (noising) process.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::LatentClip;
use crate::error::{bad_config, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// `beta[k-1]`, `alpha[k-1]` and `alpha_bar[k]` for `k = 1..=K`;
/// `alpha_bar[0] = 1` is the clean end of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(bad_config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(bad_config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for a in &alphas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
        })
    }

    /// Number of diffusion steps K.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product of `alpha_1..alpha_k`; 1 at `k = 0`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar_1..alpha_bar_K`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar[1..]
    }
}

pub fn make_schedule(k: usize, beta_start: f64, beta_end: f64, shape: ScheduleShape) -> Result<NoiseSchedule> {
    if k == 0 {
        return Err(bad_config("K must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(bad_config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match shape {
        ScheduleShape::Linear => (0..k)
            .map(|i| {
                if k == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// `Z_k = sqrt(alpha_bar_k) Z_0 + sqrt(1 - alpha_bar_k) eps`.
pub fn ddpm_forward(z0: &LatentClip, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentClip> {
    if k == 0 || k > sched.steps() {
        return Err(invalid(format!("step {k} outside [1, {}]", sched.steps())));
    }
    if eps.dims() != z0.latents.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z0.latents.dims()),
            got: format!("{:?}", eps.dims()),
        });
    }
    let zk = noise_tensor(&z0.latents, k, eps, sched)?;
    LatentClip::new(zk, k, z0.frame_rate)
}

pub(crate) fn noise_tensor(z0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> candle_core::Result<Tensor> {
    let ab = sched.alpha_bar(k);
    (z0 * ab.sqrt())? + (eps.to_dtype(z0.dtype())? * (1.0 - ab).sqrt())?
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn hand_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.5]).unwrap();
        for (a, b) in s.alphas().iter().zip([0.9, 0.8, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in s.alpha_bars().iter().zip([0.9, 0.72, 0.36]) {
            assert!((a - b).abs() < 1e-15);
        }
        let one = make_schedule(1, 0.1, 0.1, ScheduleShape::Linear).unwrap();
        assert_eq!(one.alpha_bars(), &[0.9]);
    }

    #[test]
    fn linear_schedule_is_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleShape::Linear).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for k in 1..=1000 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            assert_eq!(s.alpha(k), 1.0 - s.beta(k));
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.2, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleShape::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleShape::Linear).is_err());
    }

    #[test]
    fn forward_limits() {
        let s = NoiseSchedule::from_betas(vec![1e-12, 0.5]).unwrap();
        let z0 = LatentClip::new(Tensor::ones((2, 1, 1, 2), DType::F64, &Device::Cpu).unwrap(), 0, 30.0).unwrap();
        let zero = Tensor::zeros((2, 1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let z2 = ddpm_forward(&z0, 2, &zero, &s).unwrap();
        let v = z2.latents.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - s.alpha_bar(2).sqrt()).abs() < 1e-15));
        assert_eq!(z2.step, 2);
        let eps = Tensor::ones((2, 1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let z1 = ddpm_forward(&z0, 1, &eps, &s).unwrap().latents.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(z1.iter().all(|x| (x - 1.0).abs() < 1e-5));
        assert!(ddpm_forward(&z0, 3, &zero, &s).is_err());
        assert!(ddpm_forward(&z0, 0, &zero, &s).is_err());
        let bad = Tensor::zeros((1, 1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(ddpm_forward(&z0, 1, &bad, &s).is_err());
    }

    #[test]
    fn forward_preserves_unit_variance() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleShape::Linear).unwrap();
        let n = 10_000;
        let mut rng = crate::seed::rng(5, "test", 0);
        let z0 = crate::seed::normal_tensor(&mut rng, (n, 1, 1, 1), DType::F64).unwrap();
        let eps = crate::seed::normal_tensor(&mut rng, (n, 1, 1, 1), DType::F64).unwrap();
        let z0 = LatentClip::new(z0, 0, 30.0).unwrap();
        let v = ddpm_forward(&z0, 500, &eps, &s).unwrap().latents.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // sample variance of n normals has sd sqrt(2 / (n - 1))
        let sd = (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * sd, "{var}");
    }
}
