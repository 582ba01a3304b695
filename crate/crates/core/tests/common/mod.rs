#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use primed::harness::{Primed, RunConfig, Sample};
use primed::nn::{scalar_f64, to_f64_vec};
use primed::synthscene::{
    gen_dataset, Dataset, EncoderConfig, GenConfig, LabelSource, SoftLabel, Split,
};
use primed::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely. Central
/// differences through a temperature-0.07 softmax carry about 1e-9 of
/// cancellation noise, and some gradients (attention key biases) are
/// exactly zero.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Every entry over tolerance, for diagnosis.
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel < GRAD_REL_TOL
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Central-difference check of `loss` against backprop for up to
/// `per_var` evenly spaced entries of every variable.
pub fn grad_check(
    vars: &[(String, Var)],
    per_var: usize,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradReport> {
    let grads = loss()?.backward()?;
    let mut rep = GradReport::default();
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base = to_f64_vec(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let picks = per_var.min(n);
        for j in 0..picks {
            let i = j * n / picks;
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(
                    &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?,
                )?;
                scalar_f64(&loss()?)
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            var.set(
                &Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu)?
                    .to_dtype(var.dtype())?,
            )?;
            let e = rel_err(analytic[i], numeric);
            rep.checked += 1;
            if e >= GRAD_REL_TOL {
                rep.failures
                    .push(format!("{name}[{i}] {:.3e} vs {numeric:.3e}", analytic[i]));
            }
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = format!(
                    "{name}[{i}] analytic {:.6e} numeric {numeric:.6e}",
                    analytic[i]
                );
            }
        }
    }
    Ok(rep)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// Encoder widths for the gradient-check model.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: [4, 4, 8, 8],
        d_audio: 4,
        d_text: 4,
        ..EncoderConfig::default()
    }
}

pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d = 8;
    c.model.d0 = 8;
    c.model.heads = 2;
    c.model.num_sparse = 2;
    c.model.dense_size = 4;
    c.model.prior_hidden = 8;
    c.sasa.grid = 8;
    c.sasa.k = 5;
    c
}

/// Random two-frame clip on an 8x8 canvas; stage maps are 8, 4, 2 and 1
/// pixels wide. Every frame has foreground and background.
pub fn tiny_sample(seed: u64, enc: &EncoderConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 2;
    let visual =
        [0usize, 1, 2, 3].map(|n| randn(&mut rng, &[t, enc.channels[n], 8 >> n, 8 >> n], 1.0));
    let text = randn(&mut rng, &[3, enc.d_text], 1.0);
    let mut gt = vec![0.0f64; t * 64];
    for f in 0..t {
        for p in 0..64 {
            gt[f * 64 + p] = f64::from(rng.gen_bool(0.35));
        }
        gt[f * 64] = 1.0;
        gt[f * 64 + 63] = 0.0;
    }
    Sample {
        id: format!("tiny{seed}"),
        visual,
        audio: randn(&mut rng, &[t, enc.d_audio], 1.0),
        text_global: text.get(0).unwrap(),
        text,
        gt: Tensor::from_vec(gt, (t, 8, 8), &Device::Cpu).unwrap(),
        label: SoftLabel::new([0.2, 0.5, 0.3], LabelSource::File).unwrap(),
    }
}

/// f64 model with every parameter moved off its initial value so that
/// zero-initialised blocks still carry gradient through their consumers.
pub fn tiny_model(cfg: &RunConfig, seed: u64) -> Primed {
    let m = Primed::new(cfg, &tiny_encoder(), DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, v) in m.ps.vars() {
        let jitter = randn(&mut rng, v.dims(), 0.2);
        m.ps.set(name, &(v.as_tensor() + jitter).unwrap()).unwrap();
    }
    m
}

pub fn all_vars(m: &Primed) -> Vec<(String, Var)> {
    m.ps.vars()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// The toy benchmark: 240 train / 60 val / 30 null clips, four 64x64 frames.
pub fn toy_gen_config() -> GenConfig {
    GenConfig::new(
        0,
        &[(Split::Train, 240), (Split::Val, 60), (Split::Null, 30)],
    )
}

/// Small dataset for pipeline tests.
pub fn small_dataset(dir: &Path, seed: u64) -> Dataset {
    let cfg = GenConfig::new(
        seed,
        &[(Split::Train, 4), (Split::Val, 2), (Split::Null, 2)],
    );
    gen_dataset(&cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let a = to_f64_vec(a).unwrap();
    let b = to_f64_vec(b).unwrap();
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
