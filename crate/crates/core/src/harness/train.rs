//! Training loop and evaluation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{Primed, Sample};
use super::optim::{lr_at, AdamW};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate_report, clip_metrics, MetricReport, SampleMetrics, Scope};
use crate::io::{write_array, write_json, Array};
use crate::nn::{scalar_f64, to_f64_vec};
use crate::synthscene::{Dataset, Split};

/// Training runs in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg: f64,
    pub sasa: f64,
    pub kl: f64,
    pub orth: f64,
    pub total: f64,
    #[serde(rename = "val_J")]
    pub val_j: Option<f64>,
}

/// Which samples of a scope to score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalFilter {
    pub audio_conflict_only: bool,
}

fn scope_splits(scope: Scope) -> Vec<Split> {
    match scope {
        Scope::Split(s) => vec![s],
        Scope::Mix => vec![Split::Seen, Split::Unseen],
    }
}

/// Load every sample of the given splits, in manifest order.
pub fn load_samples(
    ds: &Dataset,
    splits: &[Split],
    filter: EvalFilter,
    dtype: DType,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for e in &ds.manifest.samples {
        if !splits.contains(&e.split) || (filter.audio_conflict_only && !e.audio_conflict) {
            continue;
        }
        out.push(Sample::from_bundle(
            &e.id,
            &ds.load(&e.id)?,
            dtype,
            &Device::Cpu,
        )?);
    }
    Ok(out)
}

/// Binary masks at probability 0.5 for every frame.
pub fn predict(model: &Primed, s: &Sample) -> Result<Array<u8>> {
    model.forward(s)?.decoder.logits.binary()
}

fn gt_array(s: &Sample) -> Result<Array<u8>> {
    let data = crate::nn::to_f64_vec(&s.gt)?
        .into_iter()
        .map(|v| u8::from(v > 0.5))
        .collect();
    Array::new(s.gt.dims().to_vec(), data)
}

pub fn score_samples(
    model: &Primed,
    samples: &[Sample],
    tolerance_px: usize,
) -> Result<Vec<SampleMetrics>> {
    samples
        .iter()
        .map(|s| clip_metrics(&s.id, &predict(model, s)?, &gt_array(s)?, tolerance_px))
        .collect()
}

/// Score a model on one scope of a dataset.
pub fn evaluate(
    model: &Primed,
    ds: &Dataset,
    scope: Scope,
    filter: EvalFilter,
    tolerance_px: usize,
) -> Result<MetricReport> {
    let samples = load_samples(ds, &scope_splits(scope), filter, model.dtype())?;
    evaluate_loaded(model, ds, &samples, scope, tolerance_px)
}

/// Like [`evaluate`] on samples that are already in memory.
pub fn evaluate_loaded(
    model: &Primed,
    ds: &Dataset,
    samples: &[Sample],
    scope: Scope,
    tolerance_px: usize,
) -> Result<MetricReport> {
    let metrics = score_samples(model, samples, tolerance_px)?;
    aggregate_report(&metrics, &ds.manifest, scope)
}

/// `primed eval`: load a checkpoint, score a split, optionally write masks.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data: &Path,
    scope: Scope,
    report: Option<&Path>,
    masks: Option<&Path>,
) -> Result<MetricReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, _) = ck.restore(TRAIN_DTYPE)?;
    let ds = Dataset::open(data)?;
    if ds.manifest.generator.encoder != ck.encoder {
        return Err(Error::Config(
            "dataset encoder settings differ from the checkpoint's".into(),
        ));
    }
    let samples = load_samples(
        &ds,
        &scope_splits(scope),
        EvalFilter::default(),
        TRAIN_DTYPE,
    )?;
    for s in &samples {
        model.check_sample(s)?;
    }
    if let Some(dir) = masks {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &samples {
            write_array(&dir.join(format!("{}.bin", s.id)), &predict(&model, s)?)?;
        }
    }
    let r = evaluate_loaded(&model, &ds, &samples, scope, ck.config.eval.tolerance_px)?;
    if let Some(p) = report {
        write_json(p, &r)?;
    }
    Ok(r)
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Primed,
    pub optimizer: AdamW,
    pub logs: Vec<EpochLog>,
    /// Checkpoint written after the last epoch, if an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

/// Train from the configured dataset directory.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let ds = Dataset::open(cfg.dataset_dir()?)?;
    train_on(cfg, &ds, out_dir)
}

pub fn train_on(cfg: &RunConfig, ds: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Primed::new(cfg, &ds.manifest.generator.encoder, TRAIN_DTYPE)?;
    let train = load_samples(ds, &[Split::Train], EvalFilter::default(), TRAIN_DTYPE)?;
    if train.is_empty() {
        return Err(Error::Invalid("dataset has no training samples".into()));
    }
    let val_scope = match cfg.eval.val_split.as_str() {
        "none" => None,
        s => Some(Scope::parse(s)?),
    };
    let val = match val_scope {
        Some(scope) => load_samples(ds, &scope_splits(scope), EvalFilter::default(), TRAIN_DTYPE)?,
        None => Vec::new(),
    };
    let log_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)
                .map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            std::fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    let mut opt = AdamW::new();
    let total_steps = cfg.optim.epochs * train.len();
    let mut logs = Vec::with_capacity(cfg.optim.epochs);
    let mut checkpoint = None;
    let mut step = 0;
    for epoch in 1..=cfg.optim.epochs {
        let mut sums = [0f64; 5];
        for i in epoch_order(cfg.seed, epoch, train.len()) {
            let s = &train[i];
            let (_, c, total) = match model.objective(s, &cfg.sasa, &cfg.loss) {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        components: format!("sample {}: {what}", s.id),
                    })
                }
                Err(e) => return Err(e),
            };
            let vals = [
                scalar_f64(&c.seg)?,
                scalar_f64(&c.sasa)?,
                scalar_f64(&c.kl)?,
                scalar_f64(&c.orth)?,
                scalar_f64(&total)?,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    components: format!(
                        "sample {}: seg={} sasa={} kl={} orth={} total={}",
                        s.id, vals[0], vals[1], vals[2], vals[3], vals[4]
                    ),
                });
            }
            let grads = total.backward()?;
            for (name, v) in model.ps.vars() {
                if let Some(g) = grads.get(v.as_tensor()) {
                    if to_f64_vec(g)?.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Diverged {
                            epoch,
                            step,
                            components: format!("sample {}: gradient of {name}", s.id),
                        });
                    }
                }
            }
            opt.update(
                &cfg.optim,
                &model.ps,
                &grads,
                lr_at(&cfg.optim, step, total_steps),
            )?;
            for (a, v) in sums.iter_mut().zip(vals) {
                *a += v;
            }
            step += 1;
        }
        let n = train.len() as f64;
        let val_j = match val_scope {
            Some(scope) if !val.is_empty() => {
                Some(evaluate_loaded(&model, ds, &val, scope, cfg.eval.tolerance_px)?.j / 100.0)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch,
            seg: sums[0] / n,
            sasa: sums[1] / n,
            kl: sums[2] / n,
            orth: sums[3] / n,
            total: sums[4] / n,
            val_j,
        };
        if let (Some(p), Some(dir)) = (&log_path, out_dir) {
            let mut f = OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", serde_json::to_string(&log)?).map_err(|e| Error::io(p, e))?;
            let ck = dir.join(format!("epoch_{epoch}.ckpt"));
            Checkpoint::capture(&model, &opt, epoch, cfg)?.save(&ck)?;
            checkpoint = Some(ck);
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        logs,
        checkpoint,
    })
}
