//! Token distiller: K learnable seeds cross-attend to the top visual stage,
//! followed by differentiable Gram-Schmidt and the orthogonality regulariser.
//!
//! No normalisation layer is used anywhere on this path.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, Activation, Init, Linear, Mlp, MultiHeadAttention, ParamStore};

/// Residual norm below which a Gram-Schmidt step is treated as degenerate.
pub const GS_DEGENERATE_NORM: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TokenDistiller {
    /// Projection of stage-4 channels into the token space.
    pub psi: Linear,
    /// `V_0`: `(K, d0)` learnable seeds.
    pub seeds: candle_core::Var,
    pub attn: MultiHeadAttention,
    pub mlp: Mlp,
}

impl TokenDistiller {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c4: usize,
        d0: usize,
        k: usize,
        heads: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(
                "distilled token count must be positive".into(),
            ));
        }
        Ok(Self {
            psi: Linear::new(ps, &format!("{name}.psi"), c4, d0, true)?,
            seeds: ps.var(&format!("{name}.seeds"), &[k, d0], Init::Normal(1.0))?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d0, d0, d0, heads)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d0, 4 * d0, d0, Activation::Gelu)?,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.seeds.dims()[0]
    }

    /// `stage4`: `(T, C4, H4, W4)` -> raw distilled tokens `(T, K, d0)`.
    pub fn distill(&self, stage4: &Tensor) -> Result<Tensor> {
        let (t, c, h, w) = stage4.dims4()?;
        let tokens = stage4
            .reshape((t, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let projected = self.psi.forward(&tokens)?;
        let (k, d0) = self.seeds.dims2()?;
        let seeds = self
            .seeds
            .as_tensor()
            .unsqueeze(0)?
            .broadcast_as((t, k, d0))?
            .contiguous()?;
        let v_hat = (&seeds + self.attn.forward(&seeds, &projected, None)?)?;
        Ok((&v_hat + self.mlp.forward(&v_hat)?)?)
    }
}

/// Frames on which Gram-Schmidt had to fall back to a basis vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Degeneracy {
    pub frames: Vec<usize>,
}

impl Degeneracy {
    pub fn any(&self) -> bool {
        !self.frames.is_empty()
    }
}

/// Classical Gram-Schmidt over the K rows of each frame, in index order,
/// with each result L2-normalised. `(T, K, d0) -> (T, K, d0)`.
pub fn orthogonalize(raw: &Tensor) -> Result<(Tensor, Degeneracy)> {
    let (t, k, d0) = raw.dims3()?;
    if k > d0 {
        return Err(Error::Invalid(format!(
            "cannot orthogonalise {k} tokens in {d0} dims"
        )));
    }
    let mut basis: Vec<Tensor> = Vec::with_capacity(k);
    let mut flags = Degeneracy::default();
    for j in 0..k {
        let x = raw.narrow(1, j, 1)?;
        let mut v = x.clone();
        for q in &basis {
            let c = (&x * q)?.sum_keepdim(D::Minus1)?;
            v = (v - q.broadcast_mul(&c)?)?;
        }
        let sq = v.sqr()?.sum_keepdim(D::Minus1)?;
        let norms = to_f64_vec(&sq)?;
        let degenerate: Vec<usize> = norms
            .iter()
            .enumerate()
            .filter(|(_, n)| n.sqrt() < GS_DEGENERATE_NORM)
            .map(|(i, _)| i)
            .collect();
        if !degenerate.is_empty() {
            let fb = fallback_direction(&basis, j, d0, t, raw)?;
            let mut mask = vec![0u8; t];
            for &i in &degenerate {
                mask[i] = 1;
                if !flags.frames.contains(&i) {
                    flags.frames.push(i);
                }
            }
            let mask = Tensor::from_vec(mask, (t, 1, 1), raw.device())?.broadcast_as((t, 1, d0))?;
            v = mask.where_cond(&fb, &v)?;
        }
        let sq = v.sqr()?.sum_keepdim(D::Minus1)?.clamp(1e-30, f64::MAX)?;
        basis.push(v.broadcast_div(&sq.sqrt()?)?);
    }
    flags.frames.sort_unstable();
    Ok((Tensor::cat(&basis, 1)?, flags))
}

/// First standard basis vector (starting at `e_j`) with a usable component
/// orthogonal to the current basis, per frame.
fn fallback_direction(
    basis: &[Tensor],
    j: usize,
    d0: usize,
    t: usize,
    like: &Tensor,
) -> Result<Tensor> {
    let mut best: Option<Tensor> = None;
    for off in 0..d0 {
        let mut e = vec![0f64; d0];
        e[(j + off) % d0] = 1.0;
        let e = Tensor::from_vec(e, (1, 1, d0), like.device())?
            .to_dtype(like.dtype())?
            .broadcast_as((t, 1, d0))?
            .contiguous()?;
        let mut v = e.clone();
        for q in basis {
            let c = (&e * q)?.sum_keepdim(D::Minus1)?;
            v = (v - q.broadcast_mul(&c)?)?;
        }
        let n = to_f64_vec(&v.sqr()?.sum_keepdim(D::Minus1)?)?;
        if n.iter().all(|x| x.sqrt() > 0.5) {
            return Ok(v);
        }
        if best.is_none() {
            best = Some(v);
        }
    }
    Ok(best.expect("d0 > 0"))
}

/// Mean squared off-diagonal cosine between row-normalised tokens,
/// `(1 / (K (K-1))) Σ_{i≠j} (v̂_i · v̂_j)^2`, averaged over frames.
/// Returns the loss and whether any zero row was seen.
pub fn orth_loss(raw: &Tensor) -> Result<(Tensor, bool)> {
    let (_t, k, _d) = raw.dims3()?;
    if k < 2 {
        return Err(Error::Invalid(
            "orthogonality loss needs at least two tokens".into(),
        ));
    }
    let sq = raw.sqr()?.sum_keepdim(D::Minus1)?;
    let zero_row = to_f64_vec(&sq)?.iter().any(|&v| v == 0.0);
    let unit = raw.broadcast_div(&sq.clamp(1e-24, f64::MAX)?.sqrt()?)?;
    let gram = unit.matmul(&unit.t()?)?;
    let eye = Tensor::eye(k, raw.dtype(), raw.device())?;
    let off = gram.broadcast_mul(&(1.0 - eye)?)?;
    let per_frame = (off.sqr()?.sum((1, 2))? / (k * (k - 1)) as f64)?;
    Ok((per_frame.mean_all()?, zero_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;
    use candle_core::{DType, Device};

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        scalar_f64(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn hand_gram_schmidt() {
        let x = t64(&[1.0, 0.0, 1.0, 1.0], &[1, 2, 2]);
        let (q, flags) = orthogonalize(&x).unwrap();
        assert!(!flags.any());
        assert!(max_abs(&q, &t64(&[1.0, 0.0, 0.0, 1.0], &[1, 2, 2])) < 1e-12);
    }

    #[test]
    fn orthonormal_rows_are_fixed_points() {
        let s = 0.5f64.sqrt();
        let x = t64(&[s, s, 0.0, -s, s, 0.0], &[1, 2, 3]);
        let (q, _) = orthogonalize(&x).unwrap();
        assert!(max_abs(&q, &x) < 1e-6);
    }

    #[test]
    fn dependent_rows_use_fallback() {
        let x = t64(&[1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 3.0], &[1, 3, 3]);
        let (q, flags) = orthogonalize(&x).unwrap();
        assert_eq!(flags.frames, vec![0]);
        let g = q.matmul(&q.t().unwrap()).unwrap();
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu)
            .unwrap()
            .unsqueeze(0)
            .unwrap();
        assert!(max_abs(&g, &eye) < 1e-9);
        for v in to_f64_vec(&q).unwrap() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn orth_loss_hand_values() {
        let same = t64(&[1.0, 2.0, 1.0, 2.0], &[1, 2, 2]);
        assert!((scalar_f64(&orth_loss(&same).unwrap().0).unwrap() - 1.0).abs() < 1e-12);
        let c = 60f64.to_radians();
        let sixty = t64(&[1.0, 0.0, c.cos(), c.sin()], &[1, 2, 2]);
        assert!((scalar_f64(&orth_loss(&sixty).unwrap().0).unwrap() - 0.25).abs() < 1e-12);
        let ortho = t64(&[3.0, 0.0, 0.0, 0.5], &[1, 2, 2]);
        assert!(scalar_f64(&orth_loss(&ortho).unwrap().0).unwrap() < 1e-20);
    }

    #[test]
    fn orth_loss_zero_row_is_flagged() {
        let x = t64(&[0.0, 0.0, 1.0, 1.0], &[1, 2, 2]);
        let (l, flag) = orth_loss(&x).unwrap();
        assert!(flag);
        assert_eq!(scalar_f64(&l).unwrap(), 0.0);
        assert!(orth_loss(&t64(&[1.0, 2.0], &[1, 1, 2])).is_err());
    }

    #[test]
    fn zero_input_with_zero_mlp_output_returns_seeds() {
        let mut ps = ParamStore::new(1, DType::F64);
        let dist = TokenDistiller::new(&mut ps, "dist", 6, 8, 3, 4).unwrap();
        ps.zero_prefix("dist.psi.bias").unwrap();
        ps.zero_prefix("dist.attn.v.bias").unwrap();
        ps.zero_prefix("dist.attn.o.bias").unwrap();
        ps.zero_prefix("dist.mlp.fc2").unwrap();
        let f = Tensor::zeros((2, 6, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let out = dist.distill(&f).unwrap();
        assert_eq!(out.dims(), &[2, 3, 8]);
        for t in 0..2 {
            assert!(max_abs(&out.get(t).unwrap(), dist.seeds.as_tensor()) < 1e-12);
        }
    }

    #[test]
    fn single_key_attention_is_value_projection() {
        let mut ps = ParamStore::new(2, DType::F64);
        let dist = TokenDistiller::new(&mut ps, "dist", 5, 8, 4, 4).unwrap();
        let f = Tensor::randn(0f64, 1.0, (1, 5, 1, 1), &Device::Cpu).unwrap();
        let out = dist.distill(&f).unwrap();
        let key = dist.psi.forward(&f.reshape((1, 1, 5)).unwrap()).unwrap();
        let attended = dist
            .attn
            .o
            .forward(&dist.attn.v.forward(&key).unwrap())
            .unwrap();
        let v_hat = dist
            .seeds
            .as_tensor()
            .unsqueeze(0)
            .unwrap()
            .broadcast_add(&attended)
            .unwrap();
        let want = (&v_hat + dist.mlp.forward(&v_hat).unwrap()).unwrap();
        assert!(max_abs(&out, &want) < 1e-12);
    }

    #[test]
    fn more_tokens_than_keys_is_allowed() {
        let mut ps = ParamStore::new(2, DType::F64);
        let dist = TokenDistiller::new(&mut ps, "dist", 5, 8, 6, 2).unwrap();
        let f = Tensor::randn(0f64, 1.0, (2, 5, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(dist.distill(&f).unwrap().dims(), &[2, 6, 8]);
        let mut ps = ParamStore::new(2, DType::F64);
        assert!(TokenDistiller::new(&mut ps, "dist", 5, 8, 0, 2).is_err());
    }
}
