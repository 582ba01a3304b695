//! Region similarity, boundary F-measure, the null-split S score and
//! per-split aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Array;
use crate::synthscene::{Manifest, Split};

fn check_same(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn jaccard(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Foreground pixels with a background 4-neighbour; outside the frame counts
/// as background.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let at = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize] != 0
    };
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Dilate by a Euclidean disk of radius `r`.
fn dilate(b: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let ri = r as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !b[y as usize * w + x as usize] {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (yy, xx) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= ri * ri
                        && yy >= 0
                        && xx >= 0
                        && yy < h as i64
                        && xx < w as i64
                    {
                        out[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a matching tolerance in pixels.
pub fn boundary_f(pred: &[u8], gt: &[u8], h: usize, w: usize, tolerance_px: usize) -> Result<f64> {
    check_same(pred, gt)?;
    if pred.len() != h * w {
        return Err(Error::Shape(format!(
            "{} pixels for a {h}x{w} frame",
            pred.len()
        )));
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let np = bp.iter().filter(|b| **b).count();
    let ng = bg.iter().filter(|b| **b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let dp = dilate(&bp, h, w, tolerance_px);
    let dg = dilate(&bg, h, w, tolerance_px);
    let hit_p = bp.iter().zip(&dg).filter(|(b, d)| **b && **d).count();
    let hit_g = bg.iter().zip(&dp).filter(|(b, d)| **b && **d).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Tolerance in pixels from a fraction of the image diagonal, at least 1.
pub fn tolerance_from_diagonal(fraction: f64, h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((fraction * diag).round() as usize).max(1)
}

/// Per-frame `sqrt(fg / bg)` averaged over frames. A frame with no background
/// is capped at `sqrt(pixels)` and sets the returned flag.
pub fn s_metric(pred: &Array<u8>) -> Result<(f64, bool)> {
    let (t, hw) = frames(pred)?;
    let mut sum = 0.0;
    let mut capped = false;
    for f in 0..t {
        let fg = pred.data[f * hw..(f + 1) * hw]
            .iter()
            .filter(|v| **v != 0)
            .count();
        let bg = hw - fg;
        sum += if bg == 0 {
            capped = true;
            (hw as f64).sqrt()
        } else {
            (fg as f64 / bg as f64).sqrt()
        };
    }
    Ok((sum / t as f64, capped))
}

fn frames(a: &Array<u8>) -> Result<(usize, usize)> {
    match a.shape[..] {
        [t, h, w] if t > 0 => Ok((t, h * w)),
        _ => Err(Error::Shape(format!(
            "expected T x H x W masks, got {:?}",
            a.shape
        ))),
    }
}

/// Metrics of one clip. `J` and `F` are fractions here; reports use percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(default)]
    pub s_capped: bool,
}

/// Frame-averaged J, F and S for one clip.
pub fn clip_metrics(
    id: &str,
    pred: &Array<u8>,
    gt: &Array<u8>,
    tolerance_px: usize,
) -> Result<SampleMetrics> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape, gt.shape
        )));
    }
    let (t, hw) = frames(pred)?;
    let (h, w) = (pred.shape[1], pred.shape[2]);
    let (mut j, mut f) = (0.0, 0.0);
    for i in 0..t {
        let p = &pred.data[i * hw..(i + 1) * hw];
        let g = &gt.data[i * hw..(i + 1) * hw];
        j += jaccard(p, g)?;
        f += boundary_f(p, g, h, w, tolerance_px)?;
    }
    let (s, s_capped) = s_metric(pred)?;
    Ok(SampleMetrics {
        id: id.to_string(),
        j: j / t as f64,
        f: f / t as f64,
        s,
        s_capped,
    })
}

/// What a report aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Split(Split),
    /// Mean of the seen and unseen split means.
    Mix,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "mix" {
            Ok(Scope::Mix)
        } else {
            Ok(Scope::Split(Split::parse(s)?))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::Split(s) => s.name(),
            Scope::Mix => "mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    /// Mean S; only meaningful on the null split.
    #[serde(rename = "S")]
    pub s: Option<f64>,
    /// J and F are computed against empty masks and carry little signal.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub s_capped: bool,
    pub per_sample: Vec<SampleMetrics>,
}

/// `(seen + unseen) / 2`.
pub fn mix_mean(seen: f64, unseen: f64) -> f64 {
    (seen + unseen) / 2.0
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn split_means(samples: &[&SampleMetrics]) -> (f64, f64, f64) {
    (
        100.0 * mean(samples.iter().map(|m| m.j)),
        100.0 * mean(samples.iter().map(|m| m.f)),
        mean(samples.iter().map(|m| m.s)),
    )
}

/// Aggregate per-sample metrics into one report.
pub fn aggregate_report(
    per_sample: &[SampleMetrics],
    manifest: &Manifest,
    scope: Scope,
) -> Result<MetricReport> {
    let split_of: BTreeMap<&str, Split> = manifest
        .samples
        .iter()
        .map(|e| (e.id.as_str(), e.split))
        .collect();
    let mut by_split: BTreeMap<Split, Vec<&SampleMetrics>> = BTreeMap::new();
    for m in per_sample {
        let s = split_of.get(m.id.as_str()).ok_or_else(|| {
            Error::Invalid(format!("sample {:?} has no split in the manifest", m.id))
        })?;
        by_split.entry(*s).or_default().push(m);
    }
    let pick = |s: Split| by_split.get(&s).cloned().unwrap_or_default();
    let (j, f, s, members) = match scope {
        Scope::Split(split) => {
            let members = pick(split);
            if members.is_empty() {
                return Err(Error::Invalid(format!(
                    "no samples for split {}",
                    split.name()
                )));
            }
            let (j, f, s) = split_means(&members);
            (j, f, s, members)
        }
        Scope::Mix => {
            let seen = pick(Split::Seen);
            let unseen = pick(Split::Unseen);
            if seen.is_empty() || unseen.is_empty() {
                return Err(Error::Invalid(
                    "mix needs both seen and unseen samples".into(),
                ));
            }
            let a = split_means(&seen);
            let b = split_means(&unseen);
            let members = seen.into_iter().chain(unseen).collect();
            (
                mix_mean(a.0, b.0),
                mix_mean(a.1, b.1),
                mix_mean(a.2, b.2),
                members,
            )
        }
    };
    let null = scope == Scope::Split(Split::Null);
    Ok(MetricReport {
        split: scope.name().to_string(),
        j,
        f,
        jf: (j + f) / 2.0,
        s: null.then_some(s),
        degenerate: null,
        s_capped: null && members.iter().any(|m| m.s_capped),
        per_sample: members.into_iter().cloned().collect(),
    })
}
