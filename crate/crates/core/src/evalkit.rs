//! AUROC, grouped macro averages and evaluation reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoders::{LabelGroup, LabelSpace, ModelBundle};
use crate::error::{Error, Result};
use crate::ingest::{PreparedData, Split};
use crate::trainer::predict_batch;

/// Stays scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Returned by [`auroc`] when only one class is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleClass {
    pub positives: usize,
    pub negatives: usize,
}

impl fmt::Display for SingleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "single class ({} positive, {} negative)",
            self.positives, self.negatives
        )
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> std::result::Result<f64, SingleClass> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let mid2 = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank_sum2 += mid2 * pos_in_tie;
        i = j;
    }
    let p = positives as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Unified head on paired samples.
    Paired,
    /// Images withheld; the sequence head scores the same stays.
    Fallback,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Paired => "paired",
            Regime::Fallback => "fallback",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Regime::Paired),
            "fallback" => Ok(Regime::Fallback),
            other => Err(Error::Config(format!("unknown regime {other:?}; expected paired or fallback"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub label: String,
    pub group: LabelGroup,
    pub auroc: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMacros {
    pub all: Option<f64>,
    pub acute: Option<f64>,
    pub mixed: Option<f64>,
    pub chronic: Option<f64>,
}

impl GroupMacros {
    pub fn get(&self, group: Option<LabelGroup>) -> Option<f64> {
        match group {
            None => self.all,
            Some(LabelGroup::Acute) => self.acute,
            Some(LabelGroup::Mixed) => self.mixed,
            Some(LabelGroup::Chronic) => self.chronic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub n_samples: usize,
    pub n_skipped: usize,
    pub macro_auroc: GroupMacros,
    pub per_label: Vec<LabelResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group_mean(per_label: &[LabelResult], group: Option<LabelGroup>) -> Option<f64> {
    mean(
        per_label
            .iter()
            .filter(|l| group.is_none_or(|g| l.group == g))
            .filter_map(|l| l.auroc),
    )
}

/// Arithmetic means of the non-skipped per-label values.
pub fn recompute_macros(per_label: &[LabelResult]) -> GroupMacros {
    GroupMacros {
        all: group_mean(per_label, None),
        acute: group_mean(per_label, Some(LabelGroup::Acute)),
        mixed: group_mean(per_label, Some(LabelGroup::Mixed)),
        chronic: group_mean(per_label, Some(LabelGroup::Chronic)),
    }
}

/// Per-label AUROC over the columns of `scores` and `targets` (`[n × labels]`)
/// with group means. Labels without both classes are skipped.
pub fn macro_auroc(scores: &Tensor, targets: &Tensor, labels: &LabelSpace, regime: Regime) -> Result<EvalReport> {
    if scores.shape() != targets.shape() || scores.rank() != 2 {
        return Err(Error::Shape(format!(
            "scores {:?} and targets {:?} must be equal-shape matrices",
            scores.shape(),
            targets.shape()
        )));
    }
    let (n, width) = (scores.shape()[0], scores.shape()[1]);
    if width != labels.task.len() {
        return Err(Error::Shape(format!("{width} score columns for {} labels", labels.task.len())));
    }
    let mut per_label = Vec::with_capacity(width);
    for (k, label) in labels.task.iter().enumerate() {
        let s: Vec<f64> = (0..n).map(|i| scores.data()[i * width + k]).collect();
        let y: Vec<u8> = (0..n).map(|i| u8::from(targets.data()[i * width + k] != 0.0)).collect();
        let (auroc, skipped) = match auroc(&s, &y) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        per_label.push(LabelResult {
            label: label.name.clone(),
            group: label.group,
            auroc,
            skipped,
        });
    }
    let n_skipped = per_label.iter().filter(|l| l.auroc.is_none()).count();
    if n_skipped == per_label.len() {
        return Err(Error::DegenerateEvaluation);
    }
    Ok(EvalReport {
        regime,
        n_samples: n,
        n_skipped,
        macro_auroc: recompute_macros(&per_label),
        per_label,
    })
}

/// Scores the split's paired stays in ascending stay id. The fallback regime
/// withholds every image.
pub fn evaluate(bundle: &ModelBundle, data: &PreparedData, split: Split, regime: Regime) -> Result<EvalReport> {
    let (scores, targets) = score_pairs(bundle, data, split, regime)?;
    macro_auroc(&scores, &targets, &data.labels, regime)
}

/// Predictions and targets (`[n × 25]` each) for the split's pairs.
pub fn score_pairs(bundle: &ModelBundle, data: &PreparedData, split: Split, regime: Regime) -> Result<(Tensor, Tensor)> {
    let pool = data.pair_pool(split);
    if pool.is_empty() {
        return Err(Error::Config(format!("the {split} split has no paired stays to evaluate")));
    }
    let width = bundle.spec.task_labels;
    let mut scores = Vec::with_capacity(pool.len() * width);
    for chunk in pool.chunks(EVAL_CHUNK) {
        let (episodes, images) = data.unzip_pairs(chunk);
        let seq = data.seq_batch(&episodes)?;
        let pred = match regime {
            Regime::Paired => predict_batch(bundle, &seq, Some(&data.image_batch(&images)?))?,
            Regime::Fallback => predict_batch(bundle, &seq, None)?,
        };
        scores.extend_from_slice(pred.data());
    }
    let (episodes, _) = data.unzip_pairs(&pool);
    Ok((Tensor::new(vec![pool.len(), width], scores)?, data.task_targets(&episodes)?))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "group", "auroc", "skipped"]).expect("in-memory write");
        for l in &self.per_label {
            let auroc = l.auroc.map(crate::ingest::formats::fmt_f64).unwrap_or_default();
            let skipped = if l.skipped.is_some() { "true" } else { "false" };
            w.write_record([l.label.as_str(), l.group.as_str(), &auroc, skipped])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
