//! Training losses: segmentation, spatial-aware contrastive alignment and
//! their weighted sum.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, resize_bilinear, scalar_f64, scalar_like, to_f64_vec, Linear};

/// Smoothing constant in the Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Mean pixel BCE plus per-frame soft Dice, both on `(T, H, W)` inputs.
pub fn seg_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs ground truth {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    let (t, h, w) = logits.dims3()?;
    if to_f64_vec(logits)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("segmentation logits".into()));
    }
    let gt = gt.to_dtype(logits.dtype())?;
    // max(x, 0) - x g + log(1 + exp(-|x|))
    let bce = (logits.relu()? - (logits * &gt)?)?
        .add(&((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?
        .mean_all()?;
    let p = crate::nn::sigmoid(logits)?;
    let p = p.reshape((t, h * w))?;
    let g = gt.reshape((t, h * w))?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + DICE_SMOOTH)?;
    let dice = (1.0 - ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?)?.mean_all()?;
    Ok((bce + dice)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SasaConfig {
    /// Side of the square grid both feature map and mask are resized to.
    pub grid: usize,
    /// Hard negatives per frame.
    pub k: usize,
    pub tau: f64,
}

impl Default for SasaConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            k: 10,
            tau: 0.07,
        }
    }
}

/// `-log(φ⁺ / (φ⁺ + Σ φ⁻))` from raw similarities.
pub fn sasa_from_similarities(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let m = negatives.iter().copied().fold(positive, f64::max);
    if m == positive {
        let z: f64 = negatives.iter().map(|s| ((s - positive) / tau).exp()).sum();
        return z.ln_1p();
    }
    let z: f64 = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| ((s - m) / tau).exp())
        .sum();
    z.ln() + (m - positive) / tau
}

/// The `k` background positions most similar to the anchor; ties go to the
/// lowest index. `sims` is indexed by flat grid position.
pub fn hard_negatives(sims: &[f64], background: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = background.to_vec();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Nearest-neighbour resize of a `(T, H, W)` binary mask to `g x g`.
pub fn resize_mask_nearest(gt: &[f64], t: usize, h: usize, w: usize, g: usize) -> Vec<bool> {
    let iy = crate::nn::nearest_indices(g, h);
    let ix = crate::nn::nearest_indices(g, w);
    let mut out = Vec::with_capacity(t * g * g);
    for f in 0..t {
        for &y in &iy {
            for &x in &ix {
                out.push(gt[(f * h + y) * w + x] > 0.5);
            }
        }
    }
    out
}

/// Per-frame diagnostics from the contrastive loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SasaStats {
    pub valid_frames: usize,
    pub negatives: Vec<usize>,
}

/// Contrastive alignment loss.
///
/// `feature`: `(T, C, h, w)` decoder map, `gt`: `(T, H, W)` in `{0, 1}`,
/// `anchor`: `(T, C)` per-frame mean of semantic tokens, `proj`: shared
/// projection applied to both grid tokens and anchor.
pub fn sasa_loss(
    feature: &Tensor,
    gt: &Tensor,
    anchor: &Tensor,
    proj: &Linear,
    config: &SasaConfig,
) -> Result<(Tensor, SasaStats)> {
    let (t, c, _, _) = feature.dims4()?;
    let (tg, h, w) = gt.dims3()?;
    if tg != t || anchor.dims() != [t, c] {
        return Err(Error::Shape(format!(
            "feature {:?}, mask {:?}, anchor {:?}",
            feature.dims(),
            gt.dims(),
            anchor.dims()
        )));
    }
    if config.tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let g = config.grid;
    let grid = resize_bilinear(feature, g, g)?
        .reshape((t, c, g * g))?
        .transpose(1, 2)?
        .contiguous()?;
    let z = l2_normalize(&proj.forward(&grid)?)?;
    let a = l2_normalize(&proj.forward(anchor)?)?;
    let mask = resize_mask_nearest(&to_f64_vec(gt)?, t, h, w, g);

    let mut total: Option<Tensor> = None;
    let mut stats = SasaStats::default();
    let dev = feature.device();
    for f in 0..t {
        let m = &mask[f * g * g..(f + 1) * g * g];
        let fg: Vec<u32> = (0..g * g).filter(|&i| m[i]).map(|i| i as u32).collect();
        if fg.is_empty() {
            stats.negatives.push(0);
            continue;
        }
        stats.valid_frames += 1;
        let bg: Vec<usize> = (0..g * g).filter(|&i| !m[i]).collect();
        let zf = z.get(f)?;
        let af = a.get(f)?;
        let fg_idx = Tensor::from_vec(fg, g * g - bg.len(), dev)?;
        let proto = l2_normalize(&zf.index_select(&fg_idx, 0)?.mean(0)?)?;
        let pos = (&proto * &af)?.sum_all()?.reshape(1)?;
        let sims = zf.matmul(&af.unsqueeze(1)?)?.squeeze(1)?;
        let neg = hard_negatives(&to_f64_vec(&sims)?, &bg, config.k);
        stats.negatives.push(neg.len());
        let logits = if neg.is_empty() {
            pos.clone()
        } else {
            let idx = Tensor::from_vec(
                neg.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                neg.len(),
                dev,
            )?;
            Tensor::cat(&[&pos, &sims.index_select(&idx, 0)?], 0)?
        };
        let logits = (logits / config.tau)?;
        let mx = logits.max_keepdim(D::Minus1)?.detach();
        let lse = (logits.broadcast_sub(&mx)?.exp()?.sum_all()?.log()? + mx.squeeze(0)?)?;
        let lf = (lse - (pos.squeeze(0)? / config.tau)?)?;
        total = Some(match total {
            Some(acc) => (acc + lf)?,
            None => lf,
        });
    }
    let loss = match total {
        Some(sum) => (sum / stats.valid_frames as f64)?,
        None => scalar_like(feature, 0.0)?,
    };
    Ok((loss, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sasa: f64,
    pub kl: f64,
    pub orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sasa: 5.0,
            kl: 1.0,
            orth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("sasa", self.sasa), ("kl", self.kl), ("orth", self.orth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {n} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// The four loss components as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub seg: Tensor,
    pub sasa: Tensor,
    pub kl: Tensor,
    pub orth: Tensor,
}

/// Tolerated rounding below zero (single precision) before a component
/// counts as negative.
const NEGATIVE_SLACK: f64 = 1e-5;

/// `seg + λ_SASA sasa + λ_KL kl + λ_orth orth`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    for (name, t) in [
        ("seg", &c.seg),
        ("sasa", &c.sasa),
        ("kl", &c.kl),
        ("orth", &c.orth),
    ] {
        let v = scalar_f64(t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
        if v < -NEGATIVE_SLACK {
            return Err(Error::Invalid(format!("{name} loss is negative ({v})")));
        }
    }
    let mut total = c.seg.clone();
    for (t, wt) in [(&c.sasa, w.sasa), (&c.kl, w.kl), (&c.orth, w.orth)] {
        if wt != 0.0 {
            total = (total + (t * wt)?)?;
        }
    }
    Ok(total)
}
