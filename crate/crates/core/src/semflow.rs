//! Semantic flow generation: modality prior, audio-text fusion, cached-memory
//! audio enhancement and the broadcast per-frame token sequence.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{
    softmax_last, to_f64_vec, Activation, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
};
use crate::synthscene::SoftLabel;

/// Clamp applied to predicted probabilities inside the KL divergence.
pub const KL_PROB_FLOOR: f64 = 1e-8;

/// Predicted modality prior: logits and `[p_A, p_V, p_AV]`.
#[derive(Debug, Clone)]
pub struct ModalityPrior {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ModalityPrior {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probs = softmax_last(&logits)?;
        Ok(Self { logits, probs })
    }

    /// Fixed prior (no logits to learn from); used by probes and ablations.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let logits = probs.clamp(1e-30, 1.0)?.log()?;
        Ok(Self { logits, probs })
    }

    pub fn values(&self) -> Result<[f64; 3]> {
        let v = to_f64_vec(&self.probs)?;
        Ok([v[0], v[1], v[2]])
    }
}

/// Two linear layers with a ReLU between them: `t_g -> 3 logits`.
#[derive(Debug, Clone)]
pub struct PriorDecoder {
    pub mlp: Mlp,
}

impl PriorDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, d_text: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(ps, name, d_text, hidden, 3, Activation::Relu)?,
        })
    }

    /// `t_g`: `(d_T,)`.
    pub fn predict_prior(&self, t_g: &Tensor) -> Result<ModalityPrior> {
        let vals = to_f64_vec(t_g)?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global text token".into()));
        }
        let z = self.mlp.forward(&t_g.unsqueeze(0)?)?.squeeze(0)?;
        ModalityPrior::from_logits(z)
    }
}

/// `KL(target || predicted)` with `0 log 0 = 0` and predictions floored at
/// [`KL_PROB_FLOOR`].
pub fn kl_loss(prior: &ModalityPrior, target: &SoftLabel) -> Result<Tensor> {
    let p = &prior.probs;
    let mut mask = [0f64; 3];
    let mut plogp = 0.0;
    for (c, &pc) in target.p.iter().enumerate() {
        if pc > 0.0 {
            mask[c] = pc;
            plogp += pc * pc.ln();
        }
    }
    let w = Tensor::new(&mask, p.device())?.to_dtype(p.dtype())?;
    let cross = (p.clamp(KL_PROB_FLOOR, 1.0)?.log()? * w)?.sum_all()?;
    Ok((cross.neg()? + plogp)?)
}

/// One post-norm transformer block over `[audio ‖ text]` tokens.
#[derive(Debug, Clone)]
pub struct SemanticFusion {
    pub proj_audio: Linear,
    pub proj_text: Linear,
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl SemanticFusion {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_audio: usize,
        d_text: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj_audio: Linear::new(ps, &format!("{name}.proj_audio"), d_audio, d, true)?,
            proj_text: Linear::new(ps, &format!("{name}.proj_text"), d_text, d, true)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, d, d, heads)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), d, 4 * d, d, Activation::Gelu)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
        })
    }

    /// `audio`: `(T, d_A)`, `text`: `(L, d_T)` (valid rows only) ->
    /// `(S_A: (T, d), S_T: (L, d))`.
    pub fn fuse_semantics(&self, audio: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = audio.dim(0)?;
        let l = text.dim(0)?;
        if t == 0 || l == 0 {
            return Err(Error::Invalid(format!(
                "fusion needs T>0 and L>0, got T={t} L={l}"
            )));
        }
        let s0 = Tensor::cat(
            &[
                self.proj_audio.forward(audio)?,
                self.proj_text.forward(text)?,
            ],
            0,
        )?
        .unsqueeze(0)?;
        let s_bar = self
            .ln1
            .forward(&(&s0 + self.attn.forward(&s0, &s0, None)?)?)?;
        let s = self
            .ln2
            .forward(&(&s_bar + self.ffn.forward(&s_bar)?)?)?
            .squeeze(0)?;
        Ok((s.narrow(0, 0, t)?, s.narrow(0, t, l)?))
    }
}

/// Cached-memory enhancement computed for all frames at once:
/// `C_A[0] = 0`, `C_A[i] = mean(S_A[..i])`, `Ŝ_A = (β+1) S_A − β C_A`.
pub fn temporal_enhance(s_a: &Tensor, beta: f64) -> Result<(Tensor, Tensor)> {
    let (t, d) = s_a.dims2()?;
    if t == 0 {
        return Err(Error::Invalid(
            "temporal_enhance needs at least one frame".into(),
        ));
    }
    // exclusive prefix sums
    let inclusive = s_a.cumsum(0)?;
    let zero = s_a.narrow(0, 0, 1)?.zeros_like()?;
    let exclusive = if t > 1 {
        Tensor::cat(&[zero, inclusive.narrow(0, 0, t - 1)?], 0)?
    } else {
        zero
    };
    let inv: Vec<f64> = (0..t)
        .map(|i| if i == 0 { 0.0 } else { 1.0 / i as f64 })
        .collect();
    let inv = Tensor::from_vec(inv, (t, 1), s_a.device())?.to_dtype(s_a.dtype())?;
    let c_a = exclusive.broadcast_mul(&inv)?;
    let enhanced = ((s_a * (beta + 1.0))? - (&c_a * beta)?)?;
    debug_assert_eq!(c_a.dims(), &[t, d]);
    Ok((c_a, enhanced))
}

/// `F_se`: `(T, T + L, d)`, the same `[Ŝ_A ‖ S_T]` sequence for every frame.
pub fn build_flow(enhanced_audio: &Tensor, text: &Tensor) -> Result<Tensor> {
    let (t, d) = enhanced_audio.dims2()?;
    let (l, d2) = text.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!("audio width {d} != text width {d2}")));
    }
    let seq = Tensor::cat(&[enhanced_audio, text], 0)?;
    Ok(seq
        .unsqueeze(0)?
        .broadcast_as((t, t + l, d))?
        .contiguous()?)
}

/// All semantic-flow intermediates for one clip.
#[derive(Debug, Clone)]
pub struct SemanticFlow {
    pub audio: Tensor,
    pub text: Tensor,
    pub memory: Tensor,
    pub enhanced_audio: Tensor,
    pub flow: Tensor,
    pub beta: f64,
}

impl SemanticFlow {
    /// Per-frame anchor: mean over the `T + L` tokens, `(T, d)`.
    pub fn anchor(&self) -> Result<Tensor> {
        Ok(self.flow.mean(1)?)
    }
}

/// Full semantic-flow generator. With `use_cached_memory = false` the
/// enhanced audio equals the refined audio.
pub fn generate_flow(
    fusion: &SemanticFusion,
    audio: &Tensor,
    text: &Tensor,
    beta: f64,
    use_cached_memory: bool,
) -> Result<SemanticFlow> {
    let (s_a, s_t) = fusion.fuse_semantics(audio, text)?;
    let (memory, enhanced) = if use_cached_memory {
        temporal_enhance(&s_a, beta)?
    } else {
        (s_a.zeros_like()?, s_a.clone())
    };
    let flow = build_flow(&enhanced, &s_t)?;
    Ok(SemanticFlow {
        audio: s_a,
        text: s_t,
        memory,
        enhanced_audio: enhanced,
        flow,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar_f64;
    use crate::synthscene::LabelSource;
    use candle_core::{DType, Device};

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn label(p: [f64; 3]) -> SoftLabel {
        SoftLabel::new(p, LabelSource::Template).unwrap()
    }

    #[test]
    fn zero_decoder_gives_uniform_prior() {
        let mut ps = ParamStore::new(0, DType::F64);
        let mpd = PriorDecoder::new(&mut ps, "mpd", 8, 16).unwrap();
        ps.zero_prefix("mpd").unwrap();
        let p = mpd
            .predict_prior(&t64(&[0.3; 8], &[8]))
            .unwrap()
            .values()
            .unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax() {
        let p = ModalityPrior::from_logits(t64(&[0.0, 2f64.ln(), 0.0], &[3])).unwrap();
        let v = p.values().unwrap();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = ModalityPrior::from_logits(t64(&[0.3, -1.2, 2.0], &[3]))
            .unwrap()
            .values()
            .unwrap();
        let b = ModalityPrior::from_logits(t64(&[5.3, 3.8, 7.0], &[3]))
            .unwrap()
            .values()
            .unwrap();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_text_token_is_rejected() {
        let mut ps = ParamStore::new(0, DType::F64);
        let mpd = PriorDecoder::new(&mut ps, "mpd", 2, 4).unwrap();
        assert!(mpd.predict_prior(&t64(&[f64::NAN, 0.0], &[2])).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        let p = ModalityPrior::from_probs(t64(&[0.25, 0.25, 0.5], &[3])).unwrap();
        let v = scalar_f64(&kl_loss(&p, &label([0.5, 0.5, 0.0])).unwrap()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let p = ModalityPrior::from_logits(t64(&[0.0, 0.0, 0.0], &[3])).unwrap();
        let v = scalar_f64(&kl_loss(&p, &label([1.0, 0.0, 0.0])).unwrap()).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);

        let p = ModalityPrior::from_probs(t64(&[0.2, 0.3, 0.5], &[3])).unwrap();
        let v = scalar_f64(&kl_loss(&p, &label([0.2, 0.3, 0.5])).unwrap()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn kl_clamps_zero_prediction() {
        let p = ModalityPrior::from_probs(t64(&[0.0, 0.5, 0.5], &[3])).unwrap();
        let v = scalar_f64(&kl_loss(&p, &label([0.5, 0.5, 0.0])).unwrap()).unwrap();
        let expect = 0.5 * (0.5 / KL_PROB_FLOOR).ln() + 0.5 * (0.5f64 / 0.5).ln();
        assert!(v.is_finite());
        assert!((v - expect).abs() < 1e-9);
    }

    #[test]
    fn cached_memory_worked_example() {
        let s = t64(&[1.0, 2.0, 3.0], &[3, 1]);
        let (c, e) = temporal_enhance(&s, 1.0).unwrap();
        assert_eq!(to_f64_vec(&c).unwrap(), vec![0.0, 1.0, 1.5]);
        assert_eq!(to_f64_vec(&e).unwrap(), vec![2.0, 3.0, 4.5]);
    }

    #[test]
    fn zero_beta_is_identity() {
        let s = t64(&[1.0, -2.0, 3.5, 0.25, 7.0, 1.0], &[3, 2]);
        let (_, e) = temporal_enhance(&s, 0.0).unwrap();
        assert_eq!(to_f64_vec(&e).unwrap(), to_f64_vec(&s).unwrap());
    }

    #[test]
    fn constant_sequence() {
        let c = 1.75;
        for beta in [0.5, 1.0, 3.0] {
            let s = t64(&[c; 5], &[5, 1]);
            let (_, e) = temporal_enhance(&s, beta).unwrap();
            let e = to_f64_vec(&e).unwrap();
            assert!((e[0] - (beta + 1.0) * c).abs() < 1e-12);
            for v in &e[1..] {
                assert!((v - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flow_shape_and_broadcast() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let txt = t64(&[7.0, 8.0, 9.0, 10.0], &[2, 2]);
        let f = build_flow(&a, &txt).unwrap();
        assert_eq!(f.dims(), &[3, 5, 2]);
        let f0 = to_f64_vec(&f.get(0).unwrap()).unwrap();
        let f2 = to_f64_vec(&f.get(2).unwrap()).unwrap();
        assert_eq!(f0, f2);
        for frame in 0..3 {
            for j in 0..2 {
                let tok = to_f64_vec(&f.get(frame).unwrap().get(3 + j).unwrap()).unwrap();
                assert_eq!(tok, to_f64_vec(&txt.get(j).unwrap()).unwrap());
            }
        }
    }

    #[test]
    fn fusion_rejects_empty_sequences() {
        let mut ps = ParamStore::new(0, DType::F64);
        let f = SemanticFusion::new(&mut ps, "f", 3, 3, 4, 2).unwrap();
        let a = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(f.fuse_semantics(&a, &t).is_err());
        assert!(f.fuse_semantics(&t, &a).is_err());
    }

    #[test]
    fn fusion_shapes() {
        let mut ps = ParamStore::new(0, DType::F64);
        let f = SemanticFusion::new(&mut ps, "f", 6, 5, 8, 4).unwrap();
        let a = Tensor::randn(0f64, 1.0, (4, 6), &Device::Cpu).unwrap();
        let t = Tensor::randn(0f64, 1.0, (3, 5), &Device::Cpu).unwrap();
        let (sa, st) = f.fuse_semantics(&a, &t).unwrap();
        assert_eq!(sa.dims(), &[4, 8]);
        assert_eq!(st.dims(), &[3, 8]);
    }

    #[test]
    fn residual_only_path_is_double_layer_norm() {
        let mut ps = ParamStore::new(3, DType::F64);
        let f = SemanticFusion::new(&mut ps, "f", 6, 5, 8, 4).unwrap();
        ps.zero_prefix("f.attn.v").unwrap();
        ps.zero_prefix("f.attn.o").unwrap();
        ps.zero_prefix("f.ffn.fc2").unwrap();
        let a = Tensor::randn(0f64, 1.0, (3, 6), &Device::Cpu).unwrap();
        let t = Tensor::randn(0f64, 1.0, (2, 5), &Device::Cpu).unwrap();
        let (sa, st) = f.fuse_semantics(&a, &t).unwrap();
        let s0 = Tensor::cat(
            &[
                f.proj_audio.forward(&a).unwrap(),
                f.proj_text.forward(&t).unwrap(),
            ],
            0,
        )
        .unwrap();
        let want = f.ln2.forward(&f.ln1.forward(&s0).unwrap()).unwrap();
        let got = Tensor::cat(&[sa, st], 0).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar_f64(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn anchor_is_token_mean() {
        let a = t64(&[1.0, 3.0], &[1, 2]);
        let t = t64(&[3.0, 5.0], &[1, 2]);
        let flow = SemanticFlow {
            audio: a.clone(),
            text: t.clone(),
            memory: a.zeros_like().unwrap(),
            enhanced_audio: a.clone(),
            flow: build_flow(&a, &t).unwrap(),
            beta: 1.0,
        };
        assert_eq!(to_f64_vec(&flow.anchor().unwrap()).unwrap(), vec![2.0, 4.0]);
    }
}
