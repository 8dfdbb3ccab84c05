//! Parameter storage and transformer building blocks on top of `candle-core`.
//!
//! Trainable parameters live in a [`ParamStore`] as `Var`s keyed by dotted
//! names. Frozen copies (the EMA teacher, fixed feature nets) are built from a
//! plain `BTreeMap<String, Tensor>` so they never enter a gradient tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::rng::trunc_normal;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Truncated normal with the given standard deviation.
    TruncNormal(f64),
    /// Kaiming-style normal with std `gain / sqrt(fan_in)`, fan-in taken from
    /// every dimension but the first.
    FanIn(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, fan-out being the first dimension.
    XavierUniform,
}

impl Init {
    fn tensor(self, shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType, dev: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => (0..n).map(|_| trunc_normal(rng, std)).collect(),
            Init::FanIn(gain) => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let std = gain / (fan_in as f64).sqrt();
                (0..n).map(|_| trunc_normal(rng, std)).collect()
            }
            Init::XavierUniform => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = (6.0 / (fan_in + shape.first().copied().unwrap_or(1)) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)
    }
}

/// Ordered map of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn iter_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.iter_prefix(prefix).map(|(_, v)| v.clone()).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_elements_prefix(&self, prefix: &str) -> usize {
        self.iter_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of the variables whose names start with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.iter_prefix(prefix) {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Overwrites variable values in place from `tensors`. Every name in
    /// `tensors` must exist with an identical shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in tensors {
            let Some(var) = self.vars.get(k) else {
                bail!(Shape, "unknown parameter {k}");
            };
            if var.dims() != t.dims() {
                bail!(Shape, "parameter {k}: expected {:?}, got {:?}", var.dims(), t.dims());
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

enum Source<'a> {
    Init {
        store: &'a RefCell<ParamStore>,
        rng: &'a RefCell<ChaCha8Rng>,
    },
    Frozen {
        tensors: &'a BTreeMap<String, Tensor>,
    },
}

/// Hands out parameter tensors under a name prefix, either creating trainable
/// variables or looking up frozen tensors.
pub struct Builder<'a> {
    source: &'a Source<'a>,
    prefix: String,
    dtype: DType,
    device: Device,
}

/// Owns the borrowed state a [`Builder`] points at.
pub struct BuilderRoot<'a> {
    source: Source<'a>,
    dtype: DType,
    device: Device,
}

impl<'a> BuilderRoot<'a> {
    pub fn trainable(store: &'a RefCell<ParamStore>, rng: &'a RefCell<ChaCha8Rng>) -> Self {
        let (dtype, device) = {
            let s = store.borrow();
            (s.dtype, s.device.clone())
        };
        Self {
            source: Source::Init { store, rng },
            dtype,
            device,
        }
    }

    pub fn frozen(tensors: &'a BTreeMap<String, Tensor>, dtype: DType, device: Device) -> Self {
        Self {
            source: Source::Frozen { tensors },
            dtype,
            device,
        }
    }

    pub fn root(&'a self) -> Builder<'a> {
        Builder {
            source: &self.source,
            prefix: String::new(),
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }
}

impl<'a> Builder<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            source: self.source,
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        match self.source {
            Source::Init { store, rng } => {
                if let Some(v) = store.borrow().vars.get(&full) {
                    if v.dims() != shape {
                        bail!(Shape, "parameter {full}: expected {shape:?}, found {:?}", v.dims());
                    }
                    return Ok(v.as_tensor().clone());
                }
                let t = init.tensor(shape, &mut rng.borrow_mut(), self.dtype, &self.device)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                store.borrow_mut().vars.insert(full, var);
                Ok(out)
            }
            Source::Frozen { tensors } => {
                let Some(t) = tensors.get(&full) else {
                    bail!(Shape, "missing frozen parameter {full}");
                };
                if t.dims() != shape {
                    bail!(Shape, "frozen parameter {full}: expected {shape:?}, found {:?}", t.dims());
                }
                Ok(t.clone())
            }
        }
    }
}

/// Applies `f` to a tensor of shape `[.., in]` by flattening leading dims.
fn flatten_apply(x: &Tensor, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().expect("non-scalar input");
    let lead: usize = dims[..dims.len() - 1].iter().product();
    let y = f(&x.reshape((lead, last))?)?;
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(y.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, Init::XavierUniform, true)
    }

    pub fn with_init(b: &Builder, in_dim: usize, out_dim: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = b.get("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(b.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = self.in_dim();
        if x.dim(D::Minus1)? != in_dim {
            bail!(Shape, "linear expects last dim {in_dim}, got {:?}", x.dims());
        }
        flatten_apply(x, |x2| {
            let y = x2.matmul(&self.weight.t()?)?;
            match &self.bias {
                Some(b) => y.broadcast_add(b),
                None => Ok(y),
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[dim], Init::Ones)?,
            bias: b.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Parameter-free normalization used where affine parameters would be
/// redundant (adaLN modulation supplies its own scale and shift).
pub fn layer_norm_plain(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// L2-normalizes along the last dimension with an epsilon floor on the norm.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(eps, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Multi-head self-attention with optional QK normalization.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    heads: usize,
    /// Learnable logit scale, present only with QK normalization.
    pub qk_scale: Option<Tensor>,
}

pub const QKNORM_INIT_SCALE: f64 = 10.0;

impl Attention {
    pub fn new(b: &Builder, dim: usize, heads: usize, qknorm: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "width {dim} is not divisible by {heads} heads");
        }
        let qk_scale = if qknorm {
            Some(b.get("qk_scale", &[1], Init::Const(QKNORM_INIT_SCALE))?)
        } else {
            None
        };
        Ok(Self {
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&b.pp("proj"), dim, dim)?,
            heads,
            qk_scale,
        })
    }

    fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (bsz, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bsz, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        Ok((q, k, v))
    }

    /// Query and key tensors `[B, H, T, hd]` as they enter the dot product.
    pub fn qk(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (q, k, _) = self.split(x)?;
        self.normalize_qk(q, k)
    }

    fn normalize_qk(&self, q: Tensor, k: Tensor) -> Result<(Tensor, Tensor)> {
        if self.qk_scale.is_some() {
            Ok((l2_normalize(&q, 1e-6)?, l2_normalize(&k, 1e-6)?))
        } else {
            Ok((q, k))
        }
    }

    /// `mask` is an additive `[T, T]` bias (e.g. causal).
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bsz, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let (q, k, v) = self.split(x)?;
        let (q, k) = self.normalize_qk(q, k)?;
        let logits = q.matmul(&k.t()?)?;
        let logits = match &self.qk_scale {
            Some(s) => logits.broadcast_mul(s)?,
            None => (logits * (1.0 / (hd as f64).sqrt()))?,
        };
        let logits = match mask {
            Some(m) => logits.broadcast_add(m)?,
            None => logits,
        };
        let att = softmax_last(&logits)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((bsz, t, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &Builder, dim: usize, heads: usize, mlp_ratio: usize, qknorm: bool) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), dim)?,
            attn: Attention::new(&b.pp("attn"), dim, heads, qknorm)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim)?,
            mlp: Mlp::new(&b.pp("mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Additive causal mask `[T, T]`: 0 on and below the diagonal, a large negative
/// value above it.
pub fn causal_mask(t: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), dev)?.to_dtype(dtype)?)
}

/// Number of scalar parameters in one transformer block of width `w`.
pub fn block_param_count(w: usize, mlp_ratio: usize, qknorm: bool) -> usize {
    let h = w * mlp_ratio;
    let attn = (w * 3 * w + 3 * w) + (w * w + w) + usize::from(qknorm);
    let mlp = (w * h + h) + (h * w + w);
    attn + mlp + 4 * w
}

/// Multiply-accumulate count of one block's forward pass over `t` tokens.
pub fn block_macs(w: usize, t: usize, mlp_ratio: usize) -> u64 {
    let (w, t, r) = (w as u64, t as u64, mlp_ratio as u64);
    // qkv + proj + mlp, then QK^T and AV.
    (3 * w * w + w * w + 2 * r * w * w) * t + 2 * t * t * w
}
