//! Named, seeded parameter storage and the basic layers built on it.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops;
use crate::error::{Error, Result};

/// Parameter groups. Adapter parameters are the only trainable ones when the
/// base group is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Base,
    Adapter,
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Param {
    var: Var,
    group: Group,
}

/// Owns every trainable tensor of a model under a dotted name. Initial values
/// depend only on the store seed and the parameter name, never on creation
/// order.
#[derive(Debug)]
pub struct ParamStore {
    params: RefCell<BTreeMap<String, Param>>,
    dtype: DType,
    device: Device,
    seed: u64,
    frozen_base: bool,
}

fn name_hash(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: RefCell::new(BTreeMap::new()),
            dtype,
            device: Device::Cpu,
            seed,
            frozen_base: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// When set, base parameters handed to modules built afterwards are
    /// detached from the autograd graph.
    pub fn set_frozen_base(&mut self, frozen: bool) {
        self.frozen_base = frozen;
    }

    pub fn frozen_base(&self) -> bool {
        self.frozen_base
    }

    pub fn root(&self) -> Vb<'_> {
        Vb {
            store: self,
            prefix: String::new(),
            group: Group::Base,
        }
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init, group: Group) -> Result<Tensor> {
        let mut params = self.params.borrow_mut();
        if let Some(p) = params.get(name) {
            if p.var.dims() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {shape:?}"),
                    got: format!("{:?}", p.var.dims()),
                });
            }
            return Ok(self.handle(p));
        }
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_hash(self.seed, name));
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{n} init values for {name}"),
                        got: v.len().to_string(),
                    });
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = Param {
            var: Var::from_tensor(&t)?,
            group,
        };
        let h = self.handle(&p);
        params.insert(name.to_string(), p);
        Ok(h)
    }

    fn handle(&self, p: &Param) -> Tensor {
        if self.frozen_base && p.group == Group::Base {
            p.var.as_tensor().detach()
        } else {
            p.var.as_tensor().clone()
        }
    }

    /// Variables the optimiser may update, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params
            .borrow()
            .iter()
            .filter(|(_, p)| !(self.frozen_base && p.group == Group::Base))
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.params
            .borrow()
            .iter()
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params.borrow().get(name).map(|p| p.group)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.params.borrow().get(name).map(|p| p.var.clone())
    }

    pub fn len(&self) -> usize {
        self.params.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_count(&self, group: Option<Group>) -> usize {
        self.params
            .borrow()
            .values()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// Flattened f32 snapshot of every parameter, sorted by name.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.params
            .borrow()
            .iter()
            .map(|(k, p)| {
                let v = p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), p.var.dims().to_vec(), v))
            })
            .collect()
    }

    /// Inserts or overwrites parameters from a snapshot. Existing entries must
    /// match in shape.
    pub fn load(&self, entries: &[(String, Vec<usize>, Vec<f32>)], group: impl Fn(&str) -> Group) -> Result<()> {
        let mut params = self.params.borrow_mut();
        for (name, dims, data) in entries {
            let t = Tensor::from_slice(data, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            match params.get(name) {
                Some(p) => {
                    if p.var.dims() != dims.as_slice() {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{name}: {:?}", p.var.dims()),
                            got: format!("{dims:?}"),
                        });
                    }
                    p.var.set(&t)?;
                }
                None => {
                    params.insert(
                        name.clone(),
                        Param {
                            var: Var::from_tensor(&t)?,
                            group: group(name),
                        },
                    );
                }
            }
        }
        Ok(())
    }
}

/// Scoped view into a [`ParamStore`], in the style of a var-builder.
#[derive(Clone)]
pub struct Vb<'a> {
    store: &'a ParamStore,
    prefix: String,
    group: Group,
}

impl<'a> Vb<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Vb<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Vb {
            store: self.store,
            prefix,
            group: self.group,
        }
    }

    pub fn in_group(&self, group: Group) -> Vb<'a> {
        Vb {
            group,
            ..self.clone()
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.fetch(&full, shape, init, self.group)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Affine map over the last axis, weight stored `(d_in, d_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &Vb, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(vb, d_in, d_out, Init::Normal(1.0 / (d_in as f64).sqrt()), true)
    }

    pub fn zeros(vb: &Vb, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(vb, d_in, d_out, Init::Zeros, true)
    }

    pub fn with_init(vb: &Vb, d_in: usize, d_out: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = vb.get(&[d_in, d_out], "weight", init)?;
        let bias = if bias {
            Some(vb.get(&[d_out], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[0], d[1])
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (d_in, d_out) = self.dims();
        let mut shape = x.dims().to_vec();
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        *shape.last_mut().expect("non-scalar input") = d_out;
        y.reshape(shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(vb: &Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.get(&[dim], "gamma", Init::Ones)?,
            beta: vb.get(&[dim], "beta", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        ops::normalize_last(x, 1e-5)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Group norm over `(batch, tokens, channels)` input.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(vb: &Vb, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: vb.get(&[channels], "gamma", Init::Ones)?,
            beta: vb.get(&[channels], "beta", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        ops::group_normalize(x, self.groups, 1e-5)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let a1 = a.root().get(&[3], "x", Init::Normal(1.0)).unwrap();
        let _ = a.root().get(&[3], "y", Init::Normal(1.0)).unwrap();
        let _ = b.root().get(&[3], "y", Init::Normal(1.0)).unwrap();
        let b1 = b.root().get(&[3], "x", Init::Normal(1.0)).unwrap();
        assert_eq!(a1.to_vec1::<f32>().unwrap(), b1.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn refetch_shares_storage() {
        let s = ParamStore::new(1, DType::F32);
        let t = s.root().pp("l").get(&[2], "w", Init::Zeros).unwrap();
        s.var("l.w").unwrap().set(&Tensor::new(&[1f32, 2.], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1., 2.]);
    }

    #[test]
    fn shape_conflict_is_rejected() {
        let s = ParamStore::new(1, DType::F32);
        s.root().get(&[2], "w", Init::Zeros).unwrap();
        assert!(s.root().get(&[3], "w", Init::Zeros).is_err());
    }

    #[test]
    fn linear_handles_leading_axes() {
        let s = ParamStore::new(3, DType::F64);
        let lin = Linear::new(&s.root().pp("p"), 4, 2).unwrap();
        let x = crate::seed::normal_tensor(&mut crate::seed::rng(1, "test", 0), (2, 3, 4), candle_core::DType::F64).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 3, 2]);
    }
}
