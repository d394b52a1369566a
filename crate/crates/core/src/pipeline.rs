//! Config-driven runs: generation, training, evaluation and comparison.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_cohort, CohortConfig, Manifest};
use crate::encoders::{ModelBundle, ModelSpec};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, Regime};
use crate::ingest::formats::fmt_f64;
use crate::ingest::{PreparedData, Split, DEFAULT_MAX_BINS};
use crate::trainer::{train, write_history, Mode, TrainConfig, TrainOutcome};

pub const CONFIG_ECHO: &str = "config.json";
pub const HISTORY: &str = "history.csv";
pub const CHECKPOINT: &str = "best.ckpt";
pub const COMPARISON: &str = "comparison.csv";

fn default_max_bins() -> usize {
    DEFAULT_MAX_BINS
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Defaults to the regime of the checkpoint's training mode.
    #[serde(default)]
    pub regime: Option<Regime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_split")]
    pub split: Split,
    pub models: Vec<CompareEntry>,
}

/// One JSON file per run. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Cohort directory read by `train`, `eval` and `compare`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_max_bins")]
    pub max_bins: usize,
    #[serde(default)]
    pub generate: Option<CohortConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A parsed config with every path made absolute or relative to the
/// working directory, and the original text for echoing.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub out_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, overrides)
    }

    pub fn from_str(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let out_dir = match (&overrides.out_dir, &config.out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => resolve(o),
            (None, None) => return Err(Error::Config("out_dir is required (in the config or via --out)".into())),
        };
        config.data = config.data.as_deref().map(resolve);
        if let Some(e) = &mut config.eval {
            e.checkpoint = resolve(&e.checkpoint);
        }
        if let Some(c) = &mut config.compare {
            for m in &mut c.models {
                m.checkpoint = resolve(&m.checkpoint);
            }
        }
        if let Some(g) = &mut config.generate {
            g.seed = config.seed;
            g.validate()?;
        }
        if let Some(t) = &mut config.train {
            t.seed = config.seed;
            t.validate()?;
        }
        if config.max_bins == 0 {
            return Err(Error::Config("max_bins must be at least 1".into()));
        }
        Ok(Self {
            config,
            text: text.to_string(),
            out_dir,
        })
    }

    fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| Error::Config(format!("the config has no `{name}` section")))
    }

    fn data(&self) -> Result<PreparedData> {
        let dir = self
            .config
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("`data` (cohort directory) is required".into()))?;
        PreparedData::load(dir, self.config.max_bins)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let echo = self.out_dir.join(CONFIG_ECHO);
        fs::write(&echo, &self.text).map_err(|e| Error::io(&echo, e))
    }
}

/// Stored next to a checkpoint as `<checkpoint>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub mode: Mode,
    pub model: ModelSpec,
    pub seed: u64,
    pub best_iteration: usize,
    pub best_val: Option<f64>,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, meta: &CheckpointMeta) -> Result<()> {
    bundle.save(path)?;
    let meta_file = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes") + "\n";
    fs::write(&meta_file, json).map_err(|e| Error::io(&meta_file, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_file, e.to_string()))?;
    Ok((ModelBundle::load(&meta.model, path)?, meta))
}

/// Split counts in the layout of a modality-count table.
pub fn counts_table(manifest: &Manifest) -> String {
    let mut out = format!("{:<8}{:>8}{:>8}{:>8}\n", "split", "CXR", "EHR", "Pairs");
    for split in Split::ALL {
        let c = manifest.counts.get(&split).copied().unwrap_or_default();
        out.push_str(&format!("{:<8}{:>8}{:>8}{:>8}\n", split.as_str(), c.cxr, c.ehr, c.pairs));
    }
    let t = manifest.total();
    out.push_str(&format!("{:<8}{:>8}{:>8}{:>8}\n", "total", t.cxr, t.ehr, t.pairs));
    out
}

pub fn cmd_generate(cfg: &LoadedConfig) -> Result<Manifest> {
    let generate = cfg.section(&cfg.config.generate, "generate")?;
    cfg.prepare_out()?;
    generate_cohort(generate, &cfg.out_dir)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub val_report: Option<EvalReport>,
}

pub fn cmd_train(cfg: &LoadedConfig) -> Result<TrainSummary> {
    let train_cfg = cfg.section(&cfg.config.train, "train")?;
    let data = cfg.data()?;
    cfg.prepare_out()?;
    let outcome = train(&data, train_cfg)?;
    write_history(&cfg.out_dir.join(HISTORY), &outcome.history)?;
    let meta = CheckpointMeta {
        mode: train_cfg.mode,
        model: train_cfg.model.clone(),
        seed: train_cfg.seed,
        best_iteration: outcome.best_iteration,
        best_val: outcome.best_val,
    };
    save_checkpoint(&cfg.out_dir.join(CHECKPOINT), &outcome.bundle, &meta)?;
    let val_report = if data.pair_pool(Split::Val).is_empty() {
        None
    } else {
        let r = evaluate(&outcome.bundle, &data, Split::Val, train_cfg.mode.regime())?;
        r.write(&cfg.out_dir, "val_report")?;
        Some(r)
    };
    Ok(TrainSummary { outcome, val_report })
}

pub fn report_stem(split: Split, regime: Regime) -> String {
    format!("eval_{split}_{regime}")
}

pub fn cmd_eval(cfg: &LoadedConfig) -> Result<EvalReport> {
    let section = cfg.section(&cfg.config.eval, "eval")?;
    let (bundle, meta) = load_checkpoint(&section.checkpoint)?;
    let data = cfg.data()?;
    let regime = section.regime.unwrap_or(meta.mode.regime());
    let report = evaluate(&bundle, &data, section.split, regime)?;
    cfg.prepare_out()?;
    report.write(&cfg.out_dir, &report_stem(section.split, regime))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub mode: Mode,
    pub report: EvalReport,
}

pub const COMPARISON_HEADER: [&str; 7] = ["model", "mode", "regime", "all", "acute", "mixed", "chronic"];

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_HEADER).expect("in-memory write");
    for r in rows {
        let m = r.report.macro_auroc;
        let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        w.write_record([
            r.model.clone(),
            r.mode.to_string(),
            r.report.regime.to_string(),
            cell(m.all),
            cell(m.acute),
            cell(m.mixed),
            cell(m.chronic),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Evaluates each checkpoint in its mode's regime on the same split.
pub fn cmd_compare(cfg: &LoadedConfig) -> Result<Vec<ComparisonRow>> {
    let section = cfg.section(&cfg.config.compare, "compare")?;
    if section.models.is_empty() {
        return Err(Error::Config("compare.models must not be empty".into()));
    }
    let loaded = section
        .models
        .iter()
        .map(|m| load_checkpoint(&m.checkpoint).map(|b| (m, b)))
        .collect::<Result<Vec<_>>>()?;
    let data = cfg.data()?;
    cfg.prepare_out()?;
    let mut rows = Vec::new();
    for (entry, (bundle, meta)) in loaded {
        let report = evaluate(&bundle, &data, section.split, meta.mode.regime())?;
        report.write(&cfg.out_dir, &entry.name)?;
        rows.push(ComparisonRow {
            model: entry.name.clone(),
            mode: meta.mode,
            report,
        });
    }
    let path = cfg.out_dir.join(COMPARISON);
    fs::write(&path, comparison_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
