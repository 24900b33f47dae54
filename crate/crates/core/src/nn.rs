//! Parameter storage and the small set of layers every module is built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups drive both the freeze policy and the learning-rate split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Mixer,
    MaskHead,
    Projector,
    MaskTokens,
    Prefix,
    Language,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Mixer,
        ParamGroup::MaskHead,
        ParamGroup::Projector,
        ParamGroup::MaskTokens,
        ParamGroup::Prefix,
        ParamGroup::Language,
    ];
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Named trainable tensors. Each parameter draws its initial values from a
/// generator seeded by `(seed, name)`, so initialization does not depend on
/// construction order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    params: BTreeMap<String, Param>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<Tensor> {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, data, shape, group)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, group: ParamGroup) -> Result<Tensor> {
        let mut rng = self.rng_for(name);
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, data, shape, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, group)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Overwrite a parameter's values in place; shapes must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?} vs loaded {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copy of every parameter's values, for bit-exact comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.params
            .iter()
            .map(|(k, p)| {
                let v = p.var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((k.clone(), v))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weight stored `(in, out)`, uniform in `±1/sqrt(in)`; zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, group: ParamGroup) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Linear {
            weight: store.uniform(&format!("{name}.weight"), &[inp, out], bound, group)?,
            bias: store.constant(&format!("{name}.bias"), &[out], 0.0, group)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if inp != self.in_dim() {
            return Err(Error::Shape(format!("linear expects {} inputs, got {inp}", self.in_dim())));
        }
        let rows = x.elem_count() / inp;
        let y = x
            .reshape((rows, inp))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.constant(&format!("{name}.gain"), &[dim], 1.0, group)?,
            bias: store.constant(&format!("{name}.bias"), &[dim], 0.0, group)?,
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log softmax` over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Above this many attention scores per call, heads are processed one at a
/// time to bound peak memory.
const SCORE_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, group)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, group)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, group)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, group)?,
            heads,
        })
    }

    /// `queries (B, Lq, d)` attend over `keys (B, Lk, d)`. `mask` is an
    /// additive `(Lq, Lk)` bias (0 or a large negative).
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.forward_with_budget(queries, keys, mask, SCORE_BUDGET)
    }

    pub(crate) fn forward_with_budget(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        mask: Option<&Tensor>,
        budget: usize,
    ) -> Result<Tensor> {
        let (b, lq, d) = queries.dims3()?;
        let (kb, lk, kd) = keys.dims3()?;
        if kb != b || kd != d {
            return Err(Error::Shape(format!(
                "attention queries {:?} vs keys {:?}",
                queries.dims(),
                keys.dims()
            )));
        }
        let h = self.heads;
        let hd = d / h;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, h, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(queries)?, lq)?;
        let k = split(self.k.forward(keys)?, lk)?;
        let v = split(self.v.forward(keys)?, lk)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let attend = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<Tensor> {
            let mut scores = (q.matmul(&k.t()?)? * scale)?;
            if let Some(m) = mask {
                scores = scores.broadcast_add(m)?;
            }
            Ok(softmax(&scores)?.matmul(v)?)
        };
        let out = if b * h * lq * lk <= budget {
            attend(&q, &k, &v)?
        } else {
            let per_head = (0..h)
                .map(|i| attend(&q.narrow(1, i, 1)?, &k.narrow(1, i, 1)?, &v.narrow(1, i, 1)?))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&per_head, 1)?
        };
        let merged = out.transpose(1, 2)?.reshape((b, lq, d))?;
        self.o.forward(&merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: ParamGroup) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, group)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Additive causal bias for `[prefix, text]` sequences: every position sees
/// the whole prefix; text positions additionally see text up to themselves.
pub fn prefix_causal_mask(prefix: usize, total: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; total * total];
    for i in 0..total {
        for j in 0..total {
            if j >= prefix && j > i {
                data[i * total + j] = -1e9;
            }
        }
    }
    Ok(Tensor::from_vec(data, (total, total), device)?.to_dtype(dtype)?)
}

/// Panic-free finiteness check used after every encoder forward.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} produced non-finite values")))
    }
}
