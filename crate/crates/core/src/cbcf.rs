//! Cross-modal biased competition fusion.
//!
//! Three stages of bidirectional cross-attention between visual tokens and the
//! semantic flow. The second round of every stage also attends to the
//! distilled tokens. At the last stage a modality-prior score field over the
//! visual positions becomes an additive logit bias on every attention block
//! whose keys are visual tokens; blocks with semantic or distilled keys get no
//! bias since a per-query constant cancels under softmax.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, nearest_indices, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore,
    PointwiseConv,
};
use crate::semflow::ModalityPrior;

pub use crate::nn::biased_attention;

/// Score clamp keeping the logit transform finite.
pub const SCORE_CLAMP: f64 = 1e-4;

/// Projections into the shared similarity space plus the learnable scale.
#[derive(Debug, Clone)]
pub struct BiasProjections {
    pub text: Linear,
    pub audio: Linear,
    pub visual: Linear,
    pub gamma: Var,
}

impl BiasProjections {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_text: usize,
        d_audio: usize,
        c4: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            text: Linear::new(ps, &format!("{name}.text"), d_text, d, true)?,
            audio: Linear::new(ps, &format!("{name}.audio"), d_audio, d, true)?,
            visual: Linear::new(ps, &format!("{name}.visual"), c4, d, true)?,
            gamma: ps.var(&format!("{name}.gamma"), &[1], Init::Const(1.0))?,
        })
    }

    /// Score field and logit bias over stage-4 positions.
    ///
    /// `t_g`: `(d_T,)`, `audio`: `(T, d_A)`, `stage4`: `(T, C4, H4, W4)`.
    pub fn modality_bias(
        &self,
        prior: &ModalityPrior,
        t_g: &Tensor,
        audio: &Tensor,
        stage4: &Tensor,
    ) -> Result<BiasField> {
        let (t, c, h, w) = stage4.dims4()?;
        let tg = self.text.forward(&t_g.unsqueeze(0)?)?.squeeze(0)?;
        let ag = self.audio.forward(audio)?.mean(0)?;
        let fv = self.visual.forward(
            &stage4
                .reshape((t, c, h * w))?
                .transpose(1, 2)?
                .contiguous()?,
        )?;
        bias_from_projected(&prior.probs, &tg, &ag, &fv, self.gamma.as_tensor(), (h, w))
    }
}

/// Unified score `P̂`, logit bias `b_M` and the spatial grid they live on.
#[derive(Debug, Clone)]
pub struct BiasField {
    /// `(T, M4)` in `[ε, 1-ε]`.
    pub score: Tensor,
    /// `(T, M4)`.
    pub bias: Tensor,
    pub grid: (usize, usize),
    /// Set when a global text or audio vector had zero norm.
    pub zero_norm: bool,
}

impl BiasField {
    /// Nearest-neighbour resample of the bias map onto an `h x w` grid,
    /// returned as per-key bias `(T, h*w)`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Tensor> {
        let (gh, gw) = self.grid;
        let t = self.bias.dim(0)?;
        if (gh, gw) == (h, w) {
            return Ok(self.bias.clone());
        }
        let dev = self.bias.device();
        let iy = Tensor::from_vec(
            nearest_indices(h, gh)
                .into_iter()
                .map(|i| i as u32)
                .collect::<Vec<_>>(),
            h,
            dev,
        )?;
        let ix = Tensor::from_vec(
            nearest_indices(w, gw)
                .into_iter()
                .map(|i| i as u32)
                .collect::<Vec<_>>(),
            w,
            dev,
        )?;
        let map = self.bias.reshape((t, gh, gw))?;
        let map = map.index_select(&iy, 1)?.index_select(&ix, 2)?;
        Ok(map.reshape((t, h * w))?)
    }
}

fn cosine_to_unit(global: &Tensor, tokens: &Tensor) -> Result<(Tensor, bool)> {
    let norm = crate::nn::scalar_f64(&global.sqr()?.sum_all()?)?.sqrt();
    let (t, m, _) = tokens.dims3()?;
    if norm == 0.0 {
        let half = Tensor::full(0.5f64, (t, m), tokens.device())?.to_dtype(tokens.dtype())?;
        return Ok((half, true));
    }
    let g = l2_normalize(global)?;
    let z = l2_normalize(tokens)?;
    let cos = z.broadcast_matmul(&g.unsqueeze(1)?)?.squeeze(D::Minus1)?;
    Ok((((cos + 1.0)? * 0.5)?, false))
}

/// Core of the bias computation on already-projected vectors.
///
/// `probs`: `[p_A, p_V, p_AV]`, `tg`, `ag`: `(d,)`, `fv`: `(T, M, d)`,
/// `gamma`: `(1,)`.
pub fn bias_from_projected(
    probs: &Tensor,
    tg: &Tensor,
    ag: &Tensor,
    fv: &Tensor,
    gamma: &Tensor,
    grid: (usize, usize),
) -> Result<BiasField> {
    let (_, m, _) = fv.dims3()?;
    if m != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "{m} visual tokens for a {grid:?} grid"
        )));
    }
    let (sim_vis, z1) = cosine_to_unit(tg, fv)?;
    let (sim_aud, z2) = cosine_to_unit(ag, fv)?;
    let p_a = probs.narrow(0, 0, 1)?;
    let p_v = probs.narrow(0, 1, 1)?;
    let p_av = probs.narrow(0, 2, 1)?;
    let score = sim_vis
        .broadcast_mul(&p_v)?
        .add(&sim_aud.broadcast_mul(&p_a)?)?
        .add(&(&sim_vis * &sim_aud)?.broadcast_mul(&p_av)?)?;
    let score = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let bias = logit_bias(&score, gamma)?;
    Ok(BiasField {
        score,
        bias,
        grid,
        zero_norm: z1 || z2,
    })
}

/// `γ · log(P̂ / (1 − P̂))`.
pub fn logit_bias(score: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let logit = (score.log()? - (1.0 - score)?.log()?)?;
    Ok(logit.broadcast_mul(gamma)?)
}

/// Outputs of one fusion stage.
#[derive(Debug, Clone)]
pub struct StageFusionOutput {
    /// `(T, C_n, H_n, W_n)`.
    pub fused_visual: Tensor,
    /// `(T, T+L, d)`.
    pub fused_semantic: Tensor,
}

/// Cross-attention with layer-normalised inputs; the caller adds the
/// residual. Distilled tokens are unit-norm already and skip the key norm.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
}

impl CrossBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        norm_kv: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(ps, &format!("{name}.norm_q"), d)?,
            norm_kv: if norm_kv {
                Some(LayerNorm::new(ps, &format!("{name}.norm_kv"), d_kv)?)
            } else {
                None
            },
            attn: MultiHeadAttention::new(ps, name, d, d_kv, d, heads)?,
        })
    }

    pub fn forward_with_weights(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.norm_q.forward(xq)?;
        let kv = match &self.norm_kv {
            Some(n) => n.forward(xkv)?,
            None => xkv.clone(),
        };
        self.attn.forward_with_weights(&q, &kv, bias)
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(xq, xkv, bias)?.0)
    }
}

/// One CBCF stage. `modulate` is present for every stage but the last.
#[derive(Debug, Clone)]
pub struct CbcfStage {
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub v_to_s: CrossBlock,
    pub s_to_v: CrossBlock,
    pub v_to_dis: CrossBlock,
    pub s_to_dis: CrossBlock,
    pub v_to_s2: CrossBlock,
    pub s_to_v2: CrossBlock,
    pub modulate: Option<PointwiseConv>,
}

impl CbcfStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        next_channels: Option<usize>,
        d: usize,
        d0: usize,
        heads: usize,
    ) -> Result<Self> {
        let mha = |ps: &mut ParamStore, n: &str, kv: usize| {
            CrossBlock::new(
                ps,
                &format!("{name}.{n}"),
                d,
                kv,
                heads,
                n != "v_to_dis" && n != "s_to_dis",
            )
        };
        Ok(Self {
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), channels, d, true)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), d, channels, true)?,
            v_to_s: mha(ps, "v_to_s", d)?,
            s_to_v: mha(ps, "s_to_v", d)?,
            v_to_dis: mha(ps, "v_to_dis", d0)?,
            s_to_dis: mha(ps, "s_to_dis", d0)?,
            v_to_s2: mha(ps, "v_to_s2", d)?,
            s_to_v2: mha(ps, "s_to_v2", d)?,
            modulate: match next_channels {
                Some(c) => Some(PointwiseConv::new(
                    ps,
                    &format!("{name}.modulate"),
                    channels,
                    c,
                    true,
                )?),
                None => None,
            },
        })
    }

    /// `visual`: `(T, C, H, W)`, `semantic`: `(T, N, d)`, `distilled`:
    /// `(T, K, d0)`, `bias`: per visual key `(T, H*W)`.
    pub fn forward(
        &self,
        visual: &Tensor,
        semantic: &Tensor,
        distilled: Option<&Tensor>,
        bias: Option<&Tensor>,
    ) -> Result<StageFusionOutput> {
        let (t, c, h, w) = visual.dims4()?;
        if c != self.in_proj.d_in() {
            return Err(Error::Shape(format!(
                "stage expects {} channels, got {c}",
                self.in_proj.d_in()
            )));
        }
        if semantic.dim(0)? != t {
            return Err(Error::Shape(
                "visual and semantic frame counts differ".into(),
            ));
        }
        let tokens = visual
            .reshape((t, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let mut v = self.in_proj.forward(&tokens)?;
        let mut s = semantic.clone();

        // round 1
        v = (&v + self.v_to_s.forward(&v, &s, None)?)?;
        s = (&s + self.s_to_v.forward(&s, &v, bias)?)?;

        // round 2
        if let Some(dis) = distilled {
            v = (&v + self.v_to_dis.forward(&v, dis, None)?)?;
            s = (&s + self.s_to_dis.forward(&s, dis, None)?)?;
        }
        v = (&v + self.v_to_s2.forward(&v, &s, None)?)?;
        s = (&s + self.s_to_v2.forward(&s, &v, bias)?)?;

        let fused_visual = self
            .out_proj
            .forward(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((t, c, h, w))?;
        Ok(StageFusionOutput {
            fused_visual,
            fused_semantic: s,
        })
    }

    /// `next + proj(avgpool2(fused))`.
    pub fn modulate_next(&self, fused: &Tensor, next: &Tensor) -> Result<Tensor> {
        let m = self
            .modulate
            .as_ref()
            .ok_or_else(|| Error::Invalid("last stage has no modulation path".into()))?;
        let pooled = fused.avg_pool2d((2, 2))?;
        if pooled.dims()[2..] != next.dims()[2..] {
            return Err(Error::Shape(format!(
                "pooled stage {:?} does not match next stage {:?}",
                pooled.dims(),
                next.dims()
            )));
        }
        Ok((next + m.forward(&pooled)?)?)
    }
}

/// Run the three stages in order with inter-stage propagation.
///
/// `visual`: the first three stage maps; `bias` is applied at the last stage
/// only.
pub fn run_stack(
    stages: &[CbcfStage; 3],
    visual: [&Tensor; 3],
    flow: &Tensor,
    distilled: Option<&Tensor>,
    bias: Option<&BiasField>,
) -> Result<Vec<StageFusionOutput>> {
    let mut v = visual[0].clone();
    let mut s = flow.clone();
    let mut outs = Vec::with_capacity(3);
    for (n, stage) in stages.iter().enumerate() {
        let b = if n == 2 {
            match bias {
                Some(f) => {
                    let (_, _, h, w) = v.dims4()?;
                    Some(f.resized(h, w)?)
                }
                None => None,
            }
        } else {
            None
        };
        let out = stage.forward(&v, &s, distilled, b.as_ref())?;
        if n < 2 {
            v = stage.modulate_next(&out.fused_visual, visual[n + 1])?;
            s = out.fused_semantic.clone();
        }
        outs.push(out);
    }
    Ok(outs)
}
