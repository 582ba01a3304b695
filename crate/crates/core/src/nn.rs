//! Small differentiable building blocks shared by every model stage.
//!
//! Everything here is written against plain `candle_core` tensor ops so the
//! whole forward pass stays on one autograd tape, in either `f32` (training)
//! or `f64` (gradient checks).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Initial value rule for a parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

/// Stable 64-bit FNV-1a; used to derive per-parameter seeds from names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named parameter registry. Each block is seeded from `(seed, name)` so
/// adding or removing a module never shifts the initial values of others.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Overwrite a block in place, keeping every module handle live.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self.vars.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.to_string(),
            reason: "no such parameter".into(),
        })?;
        if v.dims() != value.dims() {
            return Err(Error::Checkpoint {
                name: name.to_string(),
                reason: format!("shape {:?} != expected {:?}", value.dims(), v.dims()),
            });
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zero every block whose name starts with `prefix`.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, v) in &self.vars {
            if name.starts_with(prefix) {
                v.set(&v.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

pub(crate) fn scalar_like(x: &Tensor, value: f64) -> Result<Tensor> {
    Ok(Tensor::new(value, x.device())?.to_dtype(x.dtype())?)
}

/// Fully connected layer `y = x W^T + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let a = 1.0 / (d_in as f64).sqrt();
        let weight = ps.var(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(a))?;
        let bias = if bias {
            Some(ps.var(&format!("{name}.bias"), &[d_out], Init::Uniform(a))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// 1x1 convolution on `(N, C, H, W)` maps, done as a channel matmul.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl PointwiseConv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let a = 1.0 / (c_in as f64).sqrt();
        let weight = ps.var(&format!("{name}.weight"), &[c_out, c_in], Init::Uniform(a))?;
        let bias = if bias {
            Some(ps.var(&format!("{name}.bias"), &[c_out], Init::Uniform(a))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let y = self
            .weight
            .as_tensor()
            .broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        let c_out = self.weight.dims()[0];
        let y = match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((c_out, 1))?)?,
            None => y,
        };
        Ok(y.reshape((n, c_out, h, w))?)
    }
}

/// 3x3 convolution with zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Var,
    pub bias: Var,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let a = 1.0 / ((c_in * 9) as f64).sqrt();
        let weight = ps.var(
            &format!("{name}.weight"),
            &[c_out, c_in, 3, 3],
            Init::Uniform(a),
        )?;
        let bias = ps.var(&format!("{name}.bias"), &[c_out], Init::Uniform(a))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), 1, 1, 1, 1)?;
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.var(&format!("{name}.gamma"), &[d], Init::Const(1.0))?,
            beta: ps.var(&format!("{name}.beta"), &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
        })
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d_out, true)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.act.apply(&self.fc1.forward(x)?)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Logistic function through `tanh`. The `1 / (1 + exp(-x))` form overflows
/// for large negative logits in f32, and its backward then yields `0 * inf`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// L2-normalise along the last axis; zero rows stay zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .clamp(1e-24, f64::MAX)?
        .sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Scaled dot-product attention with an optional additive per-key bias.
///
/// `q`: `(B, H, Nq, dh)`, `k`: `(B, H, Nk, dh)`, `v`: `(B, H, Nk, dv)`,
/// `bias`: `(B, Nk)`, broadcast over heads and queries.
/// Returns the attended values and the post-softmax weights `(B, H, Nq, Nk)`.
pub fn biased_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, _h, _nq, dh) = q.dims4()?;
    let nk = k.dim(2)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut logits = (q.matmul(&k.t()?)? * scale)?;
    if let Some(bias) = bias {
        if bias.dims() != [b, nk] {
            return Err(Error::Shape(format!(
                "attention bias {:?} does not match ({b}, {nk}) keys",
                bias.dims()
            )));
        }
        logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
    }
    let w = softmax_last(&logits)?;
    let out = w.matmul(&v.contiguous()?)?;
    Ok((out, w))
}

/// Multi-head attention with separate query and key/value widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d_q, d, true)?,
            k: Linear::new(ps, &format!("{name}.k"), d_kv, d, true)?,
            v: Linear::new(ps, &format!("{name}.v"), d_kv, d, true)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d_q, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `xq`: `(B, Nq, d_q)`, `xkv`: `(B, Nk, d_kv)`, `bias`: `(B, Nk)`.
    pub fn forward_with_weights(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, nq, _) = xq.dims3()?;
        let q = self.split(&self.q.forward(xq)?)?;
        let k = self.split(&self.k.forward(xkv)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        let (out, w) = biased_attention(&q, &k, &v, bias)?;
        let d = self.q.d_out();
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        Ok((self.o.forward(&out)?, w))
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(xq, xkv, bias)?.0)
    }
}

/// Row-stochastic bilinear interpolation matrix `(n_out, n_in)` using
/// half-pixel centres (the `align_corners = false` convention).
pub fn bilinear_weights(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Nearest-neighbour source index for each output position.
pub fn nearest_indices(n_out: usize, n_in: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
        .collect()
}

/// Nearest-neighbour resize of `(N, C, H, W)` built from two gathers.
///
/// `Tensor::upsample_nearest2d` is avoided on purpose: its backward pass in
/// candle 0.11 overwrites the gradient already accumulated on its input
/// instead of adding to it, which corrupts any input with a second consumer.
pub fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let index = |n_out: usize, n_in: usize| -> Result<Tensor> {
        let idx: Vec<u32> = nearest_indices(n_out, n_in)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        Ok(Tensor::from_vec(idx, n_out, x.device())?)
    };
    Ok(x.index_select(&index(out_h, h)?, 2)?
        .index_select(&index(out_w, w)?, 3)?)
}

/// Bilinear resize of `(N, C, H, W)` via two fixed interpolation matmuls,
/// which keeps the operation differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), x.device())?
        .to_dtype(x.dtype())?;
    let rx_t = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?;
    let y = ry
        .broadcast_matmul(&x.reshape((n * c, h, w))?)?
        .broadcast_matmul(&rx_t)?;
    Ok(y.reshape((n, c, out_h, out_w))?)
}

/// Resize `(N, C, H, W)` to `(N, C, out, out)` by integer average pooling
/// when shrinking and nearest replication when growing.
pub fn resize_pool_or_repeat(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        Ok(x.clone())
    } else if h >= out_h && w >= out_w && h % out_h == 0 && w % out_w == 0 {
        Ok(x.avg_pool2d((h / out_h, w / out_w))?)
    } else if out_h % h == 0 && out_w % w == 0 && out_h / h == out_w / w {
        upsample_nearest(x, out_h, out_w)
    } else {
        Err(Error::Shape(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w} by integer factors"
        )))
    }
}

/// Tensor values as `f64`, flattened.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(64, 8), (8, 64), (5, 3), (3, 3)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_resize_is_identity() {
        let m = bilinear_weights(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m[r * 4 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x)
            .unwrap()
            .sum(1)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_init_depends_on_name_not_order() {
        let mut a = ParamStore::new(7, DType::F64);
        let mut b = ParamStore::new(7, DType::F64);
        let xa = a.var("x", &[3], Init::Normal(1.0)).unwrap();
        b.var("y", &[5], Init::Normal(1.0)).unwrap();
        let xb = b.var("x", &[3], Init::Normal(1.0)).unwrap();
        assert_eq!(
            xa.as_tensor().to_vec1::<f64>().unwrap(),
            xb.as_tensor().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let mut ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = to_f64_vec(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
