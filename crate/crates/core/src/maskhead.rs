//! Prompt construction and a small trainable mask decoder.
//!
//! The decoder is a top-down merge over the fused stage maps. Each block
//! upsamples, adds a lateral projection of the matching fused map, attends to
//! one stage's sparse prompt tokens and adds that stage's dense prompt map.

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::cbcf::StageFusionOutput;
use crate::error::{Error, Result};
use crate::io::Array;
use crate::nn::{
    resize_bilinear, resize_pool_or_repeat, sigmoid, upsample_nearest, Activation, Conv3x3, Init,
    Linear, MultiHeadAttention, ParamStore, PointwiseConv,
};

/// Which stage's prompts feed the first (coarsest) decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionOrder {
    /// Stage 3 prompts into the coarsest block, stage 1 into the finest.
    #[default]
    CoarseFirst,
    FineFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptToggles {
    pub sparse: bool,
    pub dense: bool,
}

impl Default for PromptToggles {
    fn default() -> Self {
        Self {
            sparse: true,
            dense: true,
        }
    }
}

/// Learned base prompts shared by all stages.
#[derive(Debug, Clone)]
pub struct PromptBases {
    /// `(d, S, S)`.
    pub dense: Var,
    /// `(N_s, d)`.
    pub sparse: Var,
}

impl PromptBases {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        dense_size: usize,
        num_sparse: usize,
    ) -> Result<Self> {
        if dense_size == 0 || num_sparse == 0 {
            return Err(Error::Config("prompt sizes must be positive".into()));
        }
        Ok(Self {
            dense: ps.var(
                &format!("{name}.dense"),
                &[d, dense_size, dense_size],
                Init::Zeros,
            )?,
            sparse: ps.var(&format!("{name}.sparse"), &[num_sparse, d], Init::Zeros)?,
        })
    }

    pub fn dense_size(&self) -> usize {
        self.dense.dims()[1]
    }

    pub fn num_sparse(&self) -> usize {
        self.sparse.dims()[0]
    }
}

/// Bases, per-stage increments and their sums.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    /// `(T, d, S, S)`.
    pub dense_increment: Tensor,
    /// `(T, N_s, d)`.
    pub sparse_increment: Tensor,
    pub dense: Tensor,
    pub sparse: Tensor,
}

impl PromptEmbeddings {
    /// `E = Ê + increment`, broadcast over frames.
    pub fn inject(
        bases: &PromptBases,
        dense_increment: Tensor,
        sparse_increment: Tensor,
    ) -> Result<Self> {
        let dense = dense_increment.broadcast_add(bases.dense.as_tensor())?;
        let sparse = sparse_increment.broadcast_add(bases.sparse.as_tensor())?;
        Ok(Self {
            dense_increment,
            sparse_increment,
            dense,
            sparse,
        })
    }
}

/// Per-stage prompt projections: a bias-free 1x1 conv for the dense map and a
/// bias-free linear for the sparse tokens.
#[derive(Debug, Clone)]
pub struct PromptMaker {
    pub conv: PointwiseConv,
    pub linear: Linear,
}

impl PromptMaker {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, d: usize) -> Result<Self> {
        Ok(Self {
            conv: PointwiseConv::new(ps, &format!("{name}.conv"), channels, d, false)?,
            linear: Linear::new(ps, &format!("{name}.linear"), d, d, false)?,
        })
    }

    /// Increments `(d^(n), s^(n))` from one stage's fused outputs.
    pub fn make_prompts(
        &self,
        fused: &StageFusionOutput,
        bases: &PromptBases,
        toggles: PromptToggles,
    ) -> Result<(Tensor, Tensor)> {
        let size = bases.dense_size();
        let t = fused.fused_visual.dim(0)?;
        let d = bases.sparse.dims()[1];
        let dense = if toggles.dense {
            resize_pool_or_repeat(&self.conv.forward(&fused.fused_visual)?, size, size)?
        } else {
            bases
                .dense
                .as_tensor()
                .zeros_like()?
                .unsqueeze(0)?
                .repeat((t, 1, 1, 1))?
        };
        let ns = bases.num_sparse();
        let sparse = if toggles.sparse {
            self.linear
                .forward(&fused.fused_semantic)?
                .mean_keepdim(1)?
                .broadcast_as((t, ns, d))?
                .contiguous()?
        } else {
            bases
                .sparse
                .as_tensor()
                .zeros_like()?
                .unsqueeze(0)?
                .repeat((t, 1, 1))?
        };
        Ok((dense, sparse))
    }
}

/// Per-frame mask logits `(T, H, W)`.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub logits: Tensor,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Result<Tensor> {
        Ok(sigmoid(&self.logits)?)
    }

    /// Binary masks at probability 0.5, i.e. logit 0.
    pub fn binary(&self) -> Result<Array<u8>> {
        let shape = self.logits.dims().to_vec();
        let data = crate::nn::to_f64_vec(&self.logits)?
            .into_iter()
            .map(|v| u8::from(v > 0.0))
            .collect();
        Array::new(shape, data)
    }
}

/// One top-down decoder block.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub lateral: PointwiseConv,
    pub attn: MultiHeadAttention,
    pub refine: Conv3x3,
}

impl DecoderBlock {
    fn forward(
        &self,
        x: &Tensor,
        fused_visual: &Tensor,
        prompts: &PromptEmbeddings,
    ) -> Result<Tensor> {
        let (t, d, h, w) = x.dims4()?;
        let (fh, fw) = (fused_visual.dim(2)?, fused_visual.dim(3)?);
        let (h, w) = (h * 2, w * 2);
        if (fh, fw) != (h, w) {
            return Err(Error::Shape(format!(
                "decoder block at {h}x{w} got a {fh}x{fw} stage map"
            )));
        }
        let x = upsample_nearest(x, h, w)?;
        let x = (x + self.lateral.forward(fused_visual)?)?;
        let tokens = x.reshape((t, d, h * w))?.transpose(1, 2)?.contiguous()?;
        let attended = self.attn.forward(&tokens, &prompts.sparse, None)?;
        let attended = attended
            .transpose(1, 2)?
            .contiguous()?
            .reshape((t, d, h, w))?;
        let x = (x + attended)?;
        let x = (&x + resize_pool_or_repeat(&prompts.dense, h, w)?)?;
        Ok((&x + self.refine.forward(&Activation::Gelu.apply(&x)?)?)?)
    }
}

/// Decoder output with the intermediate feature maps, lowest resolution first.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub logits: MaskLogits,
    pub fpn: Vec<Tensor>,
}

impl DecoderOutput {
    /// Feature maps without the lowest-resolution one, highest resolution
    /// first.
    pub fn retained(&self) -> Vec<&Tensor> {
        self.fpn.iter().skip(1).rev().collect()
    }

    /// The second retained map, used for the contrastive alignment loss.
    pub fn sasa_map(&self) -> Result<&Tensor> {
        self.retained()
            .get(1)
            .copied()
            .ok_or_else(|| Error::Shape("decoder exposes fewer than three retained maps".into()))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub seed: PointwiseConv,
    pub blocks: [DecoderBlock; 3],
    pub head: PointwiseConv,
    /// Maps the pooled sparse prompt of the last block to per-frame readout
    /// weights, like the hypernetwork on SAM's mask token. Zero-initialised,
    /// so the static head alone decides the logits at start.
    pub readout: Linear,
    pub order: InjectionOrder,
}

impl MaskDecoder {
    /// `channels`: fused map widths for stages 1..3.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: [usize; 3],
        d: usize,
        heads: usize,
        order: InjectionOrder,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3);
        // block k merges stage 3-k (0-based: 2, 1, 0)
        for k in 0..3 {
            let c = channels[2 - k];
            blocks.push(DecoderBlock {
                lateral: PointwiseConv::new(ps, &format!("{name}.block{k}.lateral"), c, d, true)?,
                attn: MultiHeadAttention::new(
                    ps,
                    &format!("{name}.block{k}.attn"),
                    d,
                    d,
                    d,
                    heads,
                )?,
                refine: Conv3x3::new(ps, &format!("{name}.block{k}.refine"), d, d)?,
            });
        }
        let readout = Linear::new(ps, &format!("{name}.readout"), d, d, true)?;
        ps.zero_prefix(&format!("{name}.readout"))?;
        Ok(Self {
            seed: PointwiseConv::new(ps, &format!("{name}.seed"), channels[2], d, true)?,
            blocks: blocks.try_into().expect("three blocks"),
            head: PointwiseConv::new(ps, &format!("{name}.head"), d, 1, true)?,
            readout,
            order,
        })
    }

    /// `fused`: stage outputs 1..3; `prompts`: one set per stage, same order.
    pub fn decode_masks(
        &self,
        fused: &[StageFusionOutput],
        prompts: &[PromptEmbeddings],
        out_hw: (usize, usize),
    ) -> Result<DecoderOutput> {
        if fused.len() != 3 {
            return Err(Error::Invalid(format!(
                "need 3 fused stage outputs, got {}",
                fused.len()
            )));
        }
        if prompts.len() != 3 {
            return Err(Error::Invalid(format!(
                "need 3 prompt sets, got {}",
                prompts.len()
            )));
        }
        let top = &fused[2].fused_visual;
        let mut x = self.seed.forward(&top.avg_pool2d((2, 2))?)?;
        let mut fpn = vec![x.clone()];
        let mut last = &prompts[0];
        for (k, block) in self.blocks.iter().enumerate() {
            let stage = 2 - k;
            last = match self.order {
                InjectionOrder::CoarseFirst => &prompts[stage],
                InjectionOrder::FineFirst => &prompts[k],
            };
            x = block.forward(&x, &fused[stage].fused_visual, last)?;
            fpn.push(x.clone());
        }
        // static head plus a prompt-conditioned per-frame dot product
        let w = self.readout.forward(&last.sparse.mean(1)?)?;
        let dynamic = x
            .broadcast_mul(&w.unsqueeze(2)?.unsqueeze(3)?)?
            .sum_keepdim(1)?;
        let logits = (self.head.forward(&x)? + dynamic)?;
        let logits = resize_bilinear(&logits, out_hw.0, out_hw.1)?.squeeze(1)?;
        Ok(DecoderOutput {
            logits: MaskLogits { logits },
            fpn,
        })
    }
}

/// Largest absolute entry, a convenience for probes.
pub fn max_abs(x: &Tensor) -> Result<f64> {
    crate::nn::scalar_f64(&x.abs()?.flatten_all()?.max(D::Minus1)?)
}
