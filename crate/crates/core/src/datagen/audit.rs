use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::generate::Manifest;
use super::sigmoid;
use crate::error::{Error, Result};
use crate::evalkit::auroc;
use crate::ingest::formats;
use crate::ingest::Split;

/// AUROC gain of the image-inclusive fit that flags a label as complementary.
pub const COMPLEMENTARY_GAIN: f64 = 0.05;

const RIDGE: f64 = 1e-2;
const NEWTON_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAudit {
    pub label: usize,
    /// Held-out AUROC of a logistic fit on the sequence-visible latents.
    pub seq_auroc: Option<f64>,
    /// Held-out AUROC of a logistic fit on all visible latents.
    pub full_auroc: Option<f64>,
    pub complementary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub labels: Vec<LabelAudit>,
    pub complementary: Vec<usize>,
    pub confirmed: bool,
}

/// Ridge-regularized logistic regression with intercept, fitted by Newton's
/// method. Returns `[intercept, weights...]`.
fn fit_logistic(x: &[Vec<f64>], y: &[u8]) -> DVector<f64> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len) + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    let mut w = DVector::zeros(p);
    for _ in 0..NEWTON_STEPS {
        let prob = (&design * &w).map(sigmoid);
        let mut grad = design.transpose() * (&target - &prob);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let s = prob[i] * (1.0 - prob[i]);
            let row = design.row(i);
            hess += row.transpose() * row * s;
        }
        for j in 1..p {
            grad[j] -= RIDGE * w[j];
            hess[(j, j)] += RIDGE;
        }
        hess[(0, 0)] += 1e-9;
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        w += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    w
}

fn scores(w: &DVector<f64>, x: &[Vec<f64>]) -> Vec<f64> {
    x.iter()
        .map(|r| w[0] + r.iter().zip(w.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn select(z: &[f64], coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&c| z[c]).collect()
}

/// Fits each task label on the training stays' latents restricted to the
/// sequence-visible coordinates and to all coordinates, and compares
/// held-out AUROCs on the validation and test stays.
pub fn planted_signal_audit(root: &Path) -> Result<AuditReport> {
    let manifest = Manifest::read(root)?;
    let cfg = &manifest.config;
    let path = root.join(&manifest.files.latents);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut stay_latents: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
        if &rec[0] != "stay" {
            continue;
        }
        let id: u64 = rec[1].parse().map_err(|_| Error::format(&path, "bad stay id"))?;
        let z = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| Error::format(&path, "bad latent value")))
            .collect::<Result<Vec<_>>>()?;
        if z.len() != cfg.latent_dim {
            return Err(Error::format(&path, "latent width does not match the manifest"));
        }
        stay_latents.insert(id, z);
    }
    let splits: BTreeMap<u64, Split> = formats::read_splits(&root.join(&manifest.files.splits))?.into_iter().collect();
    let entries = formats::read_listfile(&root.join(&manifest.files.listfile))?;

    let seq = cfg.seq_visible.clone();
    let mut all: Vec<usize> = cfg.seq_visible.iter().chain(&cfg.img_visible).copied().collect();
    all.sort_unstable();
    all.dedup();

    let mut train = Vec::new();
    let mut held = Vec::new();
    for e in &entries {
        let z = stay_latents
            .get(&e.stay_id)
            .ok_or_else(|| Error::format(&path, format!("no latent for stay {}", e.stay_id)))?;
        match splits.get(&e.subject_id) {
            Some(Split::Train) => train.push((z, &e.labels)),
            Some(_) => held.push((z, &e.labels)),
            None => return Err(Error::format(root.join(&manifest.files.splits), "subject without split")),
        }
    }

    let mut labels = Vec::new();
    let n_labels = entries.first().map_or(0, |e| e.labels.len());
    for k in 0..n_labels {
        let y_train: Vec<u8> = train.iter().map(|(_, l)| l[k]).collect();
        let y_held: Vec<u8> = held.iter().map(|(_, l)| l[k]).collect();
        let fit_eval = |coords: &[usize]| -> Option<f64> {
            let xt: Vec<Vec<f64>> = train.iter().map(|(z, _)| select(z, coords)).collect();
            let xh: Vec<Vec<f64>> = held.iter().map(|(z, _)| select(z, coords)).collect();
            let w = fit_logistic(&xt, &y_train);
            auroc(&scores(&w, &xh), &y_held).ok()
        };
        let seq_auroc = fit_eval(&seq);
        let full_auroc = if all == seq { seq_auroc } else { fit_eval(&all) };
        let complementary = matches!((seq_auroc, full_auroc), (Some(s), Some(f)) if f - s >= COMPLEMENTARY_GAIN);
        labels.push(LabelAudit {
            label: k,
            seq_auroc,
            full_auroc,
            complementary,
        });
    }
    let complementary: Vec<usize> = labels.iter().filter(|l| l.complementary).map(|l| l.label).collect();
    Ok(AuditReport {
        confirmed: !complementary.is_empty(),
        complementary,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_fit_recovers_the_direction_of_a_linear_rule() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 / 20.0).sin(), (i as f64 / 7.0).cos()]).collect();
        let y: Vec<u8> = x.iter().map(|r| u8::from(2.0 * r[0] - r[1] + 0.3 > 0.0)).collect();
        let w = fit_logistic(&x, &y);
        assert!(w[1] > 0.0 && w[2] < 0.0, "{w}");
        assert_eq!(auroc(&scores(&w, &x), &y).unwrap(), 1.0);
    }
}
