//! Ablation sweeps: train and score each variant under several seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{evaluate, train_on, EvalFilter};
use crate::error::{Error, Result};
use crate::evalkit::{MetricReport, Scope};
use crate::io::write_json;
use crate::synthscene::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Dotted config keys to override, e.g. `"ablation.use_prior" = false`.
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_splits")]
    pub splits: Vec<String>,
    #[serde(default)]
    pub audio_conflict_only: bool,
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_splits() -> Vec<String> {
    vec!["val".into()]
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "a sweep needs at least one variant and one seed".into(),
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variants {
            if !names.insert(&v.name) {
                return Err(Error::Config(format!("variant {:?} listed twice", v.name)));
            }
            for k in v.set.keys() {
                if k == "seed" {
                    return Err(Error::Config(format!(
                        "variant {:?}: seeds come from the sweep",
                        v.name
                    )));
                }
                if let Some(other) = v.set.keys().find(|o| o.starts_with(&format!("{k}."))) {
                    return Err(Error::Config(format!(
                        "variant {:?}: {k:?} conflicts with {other:?}",
                        v.name
                    )));
                }
            }
        }
        for s in &self.splits {
            Scope::parse(s)?;
        }
        Ok(())
    }
}

/// Apply dotted-key overrides; every key must already exist in the config.
pub fn apply_overrides(base: &RunConfig, set: &BTreeMap<String, toml::Value>) -> Result<RunConfig> {
    let mut root = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for (key, value) in set {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*p)
                .filter(|n| n.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config section in {key:?}")))?;
        }
        let last = parts[parts.len() - 1];
        let table = node.as_table_mut().expect("checked table");
        match table.get(last) {
            Some(_) => {
                table.insert(last.to_string(), value.clone());
            }
            // optional keys are absent when unset
            None if key == "dataset" => {
                table.insert(last.to_string(), value.clone());
            }
            None => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }
    let cfg: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    #[serde(rename = "J")]
    pub j: Stat,
    #[serde(rename = "F")]
    pub f: Stat,
    #[serde(rename = "S")]
    pub s: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub reports: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub splits: BTreeMap<String, SplitStats>,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub audio_conflict_only: bool,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned plain-text rendering, one line per variant.
    pub fn to_text(&self) -> String {
        let splits: Vec<String> = self
            .rows
            .first()
            .map(|r| r.splits.keys().cloned().collect())
            .unwrap_or_default();
        let mut header = vec!["variant".to_string()];
        for s in &splits {
            header.push(format!("{s} J"));
            header.push(format!("{s} F"));
            if self.rows.iter().any(|r| r.splits[s].s.is_some()) {
                header.push(format!("{s} S"));
            }
        }
        let fmt =
            |st: &Stat, digits: usize| format!("{:.*} ± {:.*}", digits, st.mean, digits, st.std);
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.variant.clone()];
            for s in &splits {
                let st = &r.splits[s];
                cells.push(fmt(&st.j, 2));
                cells.push(fmt(&st.f, 2));
                if let Some(sv) = &st.s {
                    cells.push(fmt(sv, 4));
                }
            }
            lines.push(cells);
        }
        let cols = lines.iter().map(|l| l.len()).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                lines
                    .iter()
                    .filter_map(|l| l.get(c))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for l in &lines {
            let row: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s}{}", " ".repeat(widths[c] - s.chars().count())))
                .collect();
            out.push_str(row.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Train and score every (variant, seed) pair.
pub fn ablate(
    base: &RunConfig,
    spec: &SweepSpec,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    spec.validate()?;
    let scopes: Vec<Scope> = spec
        .splits
        .iter()
        .map(|s| Scope::parse(s))
        .collect::<Result<_>>()?;
    let filter = EvalFilter {
        audio_conflict_only: spec.audio_conflict_only,
    };
    let mut rows = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        let cfg = apply_overrides(base, &v.set)?;
        let mut runs = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let dir = out_dir.map(|d| d.join(&v.name).join(format!("seed_{seed}")));
            let outcome = train_on(&c, ds, dir.as_deref())?;
            let mut reports = BTreeMap::new();
            for &scope in &scopes {
                let r = evaluate(&outcome.model, ds, scope, filter, c.eval.tolerance_px)?;
                reports.insert(scope.name().to_string(), r);
            }
            runs.push(RunRecord { seed, reports });
        }
        let mut splits = BTreeMap::new();
        for &scope in &scopes {
            let name = scope.name().to_string();
            let col = |f: &dyn Fn(&MetricReport) -> f64| {
                Stat::of(
                    &runs
                        .iter()
                        .map(|r| f(&r.reports[&name]))
                        .collect::<Vec<_>>(),
                )
            };
            let s = runs[0].reports[&name]
                .s
                .is_some()
                .then(|| col(&|r| r.s.unwrap_or(0.0)));
            splits.insert(
                name.clone(),
                SplitStats {
                    j: col(&|r| r.j),
                    f: col(&|r| r.f),
                    s,
                },
            );
        }
        rows.push(VariantRow {
            variant: v.name.clone(),
            splits,
            runs,
        });
    }
    let table = AblationTable {
        seeds: spec.seeds.clone(),
        audio_conflict_only: spec.audio_conflict_only,
        rows,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("ablation.json"), &table)?;
        let p = dir.join("ablation.txt");
        std::fs::write(&p, table.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_validate() {
        let base = RunConfig::default();
        let mut set = BTreeMap::new();
        set.insert(
            "ablation.use_prior".to_string(),
            toml::Value::Boolean(false),
        );
        set.insert("model.num_tokens".to_string(), toml::Value::Integer(8));
        let c = apply_overrides(&base, &set).unwrap();
        assert!(!c.ablation.use_prior && c.model.num_tokens == 8);
        set.insert("model.num_tokens".to_string(), toml::Value::Integer(3));
        assert!(apply_overrides(&base, &set).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("ablation.use_prio".to_string(), toml::Value::Boolean(false));
        assert!(apply_overrides(&base, &bad).is_err());
        let mut wrong_type = BTreeMap::new();
        wrong_type.insert("ablation.use_prior".to_string(), toml::Value::Integer(1));
        assert!(apply_overrides(&base, &wrong_type).is_err());
    }

    #[test]
    fn sweep_spec_parsing_and_conflicts() {
        let spec = SweepSpec::from_toml(
            "[[variant]]\nname = \"full\"\n[[variant]]\nname = \"no_prior\"\nset = { \"ablation.use_prior\" = false }\n",
        )
        .unwrap();
        assert_eq!(spec.seeds, vec![0, 1, 2]);
        assert_eq!(spec.variants.len(), 2);
        assert!(
            SweepSpec::from_toml("[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"\n").is_err()
        );
        assert!(SweepSpec::from_toml(
            "[[variant]]\nname = \"a\"\nset = { \"ablation\" = {}, \"ablation.use_prior\" = false }\n"
        )
        .is_err());
        assert!(SweepSpec::from_toml("[[variant]]\nname = \"a\"\nset = { seed = 4 }\n").is_err());
    }

    #[test]
    fn stats_and_text_table() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let mut splits = BTreeMap::new();
        splits.insert(
            "val".to_string(),
            SplitStats {
                j: Stat::of(&[50.0]),
                f: Stat::of(&[60.0]),
                s: None,
            },
        );
        let row = |n: &str| VariantRow {
            variant: n.into(),
            splits: splits.clone(),
            runs: vec![],
        };
        let t = AblationTable {
            seeds: vec![0],
            audio_conflict_only: false,
            rows: vec![row("full"), row("no_prior")],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant "));
        assert_eq!(lines[1].find("50.00"), lines[2].find("50.00"));
    }
}
