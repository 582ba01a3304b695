//! Full model assembly: semantic flow, prior, distiller, biased fusion stack
//! and mask head.

use candle_core::{DType, Device, Tensor};

use super::config::{Ablation, ModelConfig, RunConfig};
use crate::cbcf::{
    logit_bias, run_stack, BiasField, BiasProjections, CbcfStage, StageFusionOutput,
};
use crate::distiller::{orth_loss, orthogonalize, Degeneracy, TokenDistiller};
use crate::error::{Error, Result};
use crate::maskhead::{
    DecoderOutput, MaskDecoder, PromptBases, PromptEmbeddings, PromptMaker, PromptToggles,
};
use crate::nn::{scalar_like, Linear, ParamStore};
use crate::objectives::{sasa_loss, seg_loss, total_loss, LossComponents, LossWeights, SasaConfig};
use crate::semflow::{
    generate_flow, kl_loss, ModalityPrior, PriorDecoder, SemanticFlow, SemanticFusion,
};
use crate::synthscene::{EncoderConfig, FeatureBundle, SoftLabel};

/// One clip as tensors.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Stage maps `(T, C_n, H_n, W_n)`.
    pub visual: [Tensor; 4],
    /// `(T, d_A)`.
    pub audio: Tensor,
    /// Valid text rows `(L, d_T)`; row 0 is the global token.
    pub text: Tensor,
    /// `(d_T,)`.
    pub text_global: Tensor,
    /// `(T, H, W)` in `{0, 1}`.
    pub gt: Tensor,
    pub label: SoftLabel,
}

impl Sample {
    pub fn from_bundle(id: &str, b: &FeatureBundle, dtype: DType, device: &Device) -> Result<Self> {
        let tensor = |shape: &[usize], data: &[f32]| -> Result<Tensor> {
            Ok(Tensor::from_slice(data, shape, device)?.to_dtype(dtype)?)
        };
        let visual = [0, 1, 2, 3].map(|n| tensor(&b.visual[n].shape, &b.visual[n].data));
        let [v0, v1, v2, v3] = visual;
        let d_t = b.text.rows.shape[1];
        let len = b.text.len;
        let gt: Vec<f32> = b.gt_masks.data.iter().map(|&v| v as f32).collect();
        Ok(Self {
            id: id.to_string(),
            visual: [v0?, v1?, v2?, v3?],
            audio: tensor(&b.audio.shape, &b.audio.data)?,
            text: tensor(&[len, d_t], &b.text.rows.data[..len * d_t])?,
            text_global: tensor(&[d_t], b.text.global())?,
            gt: tensor(&b.gt_masks.shape, &gt)?,
            label: b.soft_label.clone(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.gt.dims()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.gt.dims()[1], self.gt.dims()[2])
    }
}

/// Test and diagnostic overrides applied during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks {
    /// Replace the unified score field by this constant.
    pub force_score: Option<f64>,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub flow: SemanticFlow,
    pub prior: Option<ModalityPrior>,
    /// Distilled tokens before and after orthogonalisation.
    pub distilled_raw: Option<Tensor>,
    pub distilled: Option<Tensor>,
    pub degeneracy: Degeneracy,
    pub bias: Option<BiasField>,
    pub stages: Vec<StageFusionOutput>,
    pub prompts: Vec<PromptEmbeddings>,
    pub decoder: DecoderOutput,
}

impl ForwardOutput {
    pub fn logits(&self) -> &Tensor {
        &self.decoder.logits.logits
    }
}

#[derive(Debug, Clone)]
pub struct Primed {
    pub ps: ParamStore,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub prior: PriorDecoder,
    pub fusion: SemanticFusion,
    pub distiller: TokenDistiller,
    pub bias: BiasProjections,
    pub stages: [CbcfStage; 3],
    pub bases: PromptBases,
    pub makers: [PromptMaker; 3],
    pub decoder: MaskDecoder,
    pub sasa_proj: Linear,
}

impl Primed {
    pub fn new(cfg: &RunConfig, encoder: &EncoderConfig, dtype: DType) -> Result<Self> {
        let m = &cfg.model;
        let mut ps = ParamStore::new(cfg.seed, dtype);
        let ch = encoder.channels;
        let (d_a, d_t) = (encoder.d_audio, encoder.d_text);
        let prior = PriorDecoder::new(&mut ps, "prior", d_t, m.prior_hidden)?;
        let fusion = SemanticFusion::new(&mut ps, "fusion", d_a, d_t, m.d, m.heads)?;
        let distiller =
            TokenDistiller::new(&mut ps, "distiller", ch[3], m.d0, m.num_tokens, m.heads)?;
        let bias = BiasProjections::new(&mut ps, "bias", d_t, d_a, ch[3], m.d)?;
        let stages = [
            CbcfStage::new(
                &mut ps,
                "cbcf.stage1",
                ch[0],
                Some(ch[1]),
                m.d,
                m.d0,
                m.heads,
            )?,
            CbcfStage::new(
                &mut ps,
                "cbcf.stage2",
                ch[1],
                Some(ch[2]),
                m.d,
                m.d0,
                m.heads,
            )?,
            CbcfStage::new(&mut ps, "cbcf.stage3", ch[2], None, m.d, m.d0, m.heads)?,
        ];
        let bases = PromptBases::new(&mut ps, "prompt.base", m.d, m.dense_size, m.num_sparse)?;
        let makers = [
            PromptMaker::new(&mut ps, "prompt.stage1", ch[0], m.d)?,
            PromptMaker::new(&mut ps, "prompt.stage2", ch[1], m.d)?,
            PromptMaker::new(&mut ps, "prompt.stage3", ch[2], m.d)?,
        ];
        let decoder = MaskDecoder::new(
            &mut ps,
            "decoder",
            [ch[0], ch[1], ch[2]],
            m.d,
            m.heads,
            m.injection_order,
        )?;
        let sasa_proj = Linear::new(&mut ps, "sasa.proj", m.d, m.d, false)?;
        Ok(Self {
            ps,
            model: m.clone(),
            ablation: cfg.ablation,
            encoder: encoder.clone(),
            prior,
            fusion,
            distiller,
            bias,
            stages,
            bases,
            makers,
            decoder,
            sasa_proj,
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn forward(&self, s: &Sample) -> Result<ForwardOutput> {
        self.forward_with(s, Hooks::default())
    }

    pub fn forward_with(&self, s: &Sample, hooks: Hooks) -> Result<ForwardOutput> {
        let ab = &self.ablation;
        let flow = generate_flow(
            &self.fusion,
            &s.audio,
            &s.text,
            self.model.beta,
            ab.use_cached_memory,
        )?;
        let prior = if ab.use_prior {
            Some(self.prior.predict_prior(&s.text_global)?)
        } else {
            None
        };
        let (distilled_raw, distilled, degeneracy) = if ab.use_distiller {
            let raw = self.distiller.distill(&s.visual[3])?;
            let (orth, deg) = if ab.use_gram_schmidt {
                orthogonalize(&raw)?
            } else {
                (raw.clone(), Degeneracy::default())
            };
            (Some(raw), Some(orth), deg)
        } else {
            (None, None, Degeneracy::default())
        };
        let bias = match &prior {
            Some(p) => {
                let mut field =
                    self.bias
                        .modality_bias(p, &s.text_global, &s.audio, &s.visual[3])?;
                if let Some(v) = hooks.force_score {
                    field.score = (field.score.zeros_like()? + v)?;
                    field.bias = logit_bias(&field.score, self.bias.gamma.as_tensor())?;
                }
                Some(field)
            }
            None => None,
        };
        let stages = run_stack(
            &self.stages,
            [&s.visual[0], &s.visual[1], &s.visual[2]],
            &flow.flow,
            distilled.as_ref(),
            bias.as_ref(),
        )?;
        let toggles = PromptToggles {
            sparse: ab.use_sparse,
            dense: ab.use_dense,
        };
        let mut prompts = Vec::with_capacity(3);
        for (stage, maker) in stages.iter().zip(&self.makers) {
            let (d, sp) = maker.make_prompts(stage, &self.bases, toggles)?;
            prompts.push(PromptEmbeddings::inject(&self.bases, d, sp)?);
        }
        let decoder = self.decoder.decode_masks(&stages, &prompts, s.size())?;
        Ok(ForwardOutput {
            flow,
            prior,
            distilled_raw,
            distilled,
            degeneracy,
            bias,
            stages,
            prompts,
            decoder,
        })
    }

    /// Loss components for one forward pass; disabled terms are zero.
    pub fn losses(
        &self,
        out: &ForwardOutput,
        s: &Sample,
        sasa: &SasaConfig,
    ) -> Result<LossComponents> {
        let ab = &self.ablation;
        let zero = scalar_like(&s.gt, 0.0)?;
        let seg = seg_loss(out.logits(), &s.gt)?;
        let sasa = if ab.use_sasa {
            sasa_loss(
                out.decoder.sasa_map()?,
                &s.gt,
                &out.flow.anchor()?,
                &self.sasa_proj,
                sasa,
            )?
            .0
        } else {
            zero.clone()
        };
        let kl = match &out.prior {
            Some(p) => kl_loss(p, &s.label)?,
            None => zero.clone(),
        };
        let orth = match (&out.distilled_raw, ab.use_orth) {
            (Some(raw), true) => orth_loss(raw)?.0,
            _ => zero,
        };
        Ok(LossComponents {
            seg,
            sasa,
            kl,
            orth,
        })
    }

    /// Forward pass plus weighted objective.
    pub fn objective(
        &self,
        s: &Sample,
        sasa: &SasaConfig,
        weights: &LossWeights,
    ) -> Result<(ForwardOutput, LossComponents, Tensor)> {
        let out = self.forward(s)?;
        let c = self.losses(&out, s, sasa)?;
        let total = total_loss(&c, weights)?;
        Ok((out, c, total))
    }

    /// Check that a sample's feature widths fit this model.
    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        for n in 0..4 {
            let c = s.visual[n].dims()[1];
            if c != self.encoder.channels[n] {
                return Err(Error::Shape(format!(
                    "stage {} has {c} channels, model expects {}",
                    n + 1,
                    self.encoder.channels[n]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar_f64, to_f64_vec};
    use crate::synthscene::{sample_scene, Encoders, SceneParams, ShapeKind, Template};

    pub(crate) fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            channels: [8, 8, 16, 16],
            d_audio: 8,
            d_text: 8,
            ..EncoderConfig::default()
        }
    }

    pub(crate) fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d = 8;
        c.model.d0 = 8;
        c.model.heads = 2;
        c.model.dense_size = 4;
        c.model.prior_hidden = 8;
        c.sasa.grid = 8;
        c
    }

    fn sample(enc: &EncoderConfig, template: Template) -> Sample {
        let params = SceneParams {
            num_frames: 2,
            height: 32,
            width: 32,
        };
        let scene = sample_scene(7, template, Template::Visual, &ShapeKind::SEEN, params).unwrap();
        let e = Encoders::new(enc.clone());
        let audio = e.encode_audio(&scene, 0.05);
        let b = e.encode(&scene, audio, scene.soft_label()).unwrap();
        Sample::from_bundle("x", &b, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let enc = small_encoder();
        let m = Primed::new(&small_config(), &enc, DType::F64).unwrap();
        let s = sample(&enc, Template::Joint);
        let (out, c, total) = m
            .objective(&s, &small_config().sasa, &LossWeights::default())
            .unwrap();
        assert_eq!(out.logits().dims(), &[2, 32, 32]);
        assert!(scalar_f64(&total).unwrap().is_finite());
        assert!(scalar_f64(&c.orth).unwrap() > 0.0);
        assert_eq!(out.bias.as_ref().unwrap().grid, (1, 1));
    }

    #[test]
    fn toggles_reach_the_forward_pass() {
        let enc = small_encoder();
        let mut cfg = small_config();
        cfg.ablation.use_cached_memory = false;
        cfg.ablation.use_sparse = false;
        cfg.ablation.use_dense = false;
        cfg.ablation.use_prior = false;
        let m = Primed::new(&cfg, &enc, DType::F64).unwrap();
        let out = m.forward(&sample(&enc, Template::Audio)).unwrap();
        assert_eq!(
            to_f64_vec(&out.flow.enhanced_audio).unwrap(),
            to_f64_vec(&out.flow.audio).unwrap()
        );
        for p in &out.prompts {
            assert!(to_f64_vec(&p.sparse_increment)
                .unwrap()
                .iter()
                .all(|v| *v == 0.0));
            assert!(to_f64_vec(&p.dense_increment)
                .unwrap()
                .iter()
                .all(|v| *v == 0.0));
        }
        assert!(out.bias.is_none() && out.prior.is_none());
    }

    #[test]
    fn neutral_score_matches_no_bias() {
        let enc = small_encoder();
        let cfg = small_config();
        let m = Primed::new(&cfg, &enc, DType::F64).unwrap();
        let s = sample(&enc, Template::Visual);
        let a = m
            .forward_with(
                &s,
                Hooks {
                    force_score: Some(0.5),
                },
            )
            .unwrap();
        let mut off = cfg.clone();
        off.ablation.use_prior = false;
        let m2 = Primed::new(&off, &enc, DType::F64).unwrap();
        let b = m2.forward(&s).unwrap();
        let d = to_f64_vec(&(a.logits() - b.logits()).unwrap()).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-9));
    }
}
