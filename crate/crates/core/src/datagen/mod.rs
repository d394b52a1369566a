//! Synthetic two-modality cohorts with a latent signal that only the images
//! reveal.

mod audit;
mod generate;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AUX_LABELS, TASK_LABELS};
use crate::error::{Error, Result};
use crate::ingest::NUM_FEATURES;

pub use audit::{planted_signal_audit, AuditReport, LabelAudit, COMPLEMENTARY_GAIN};
pub use generate::{generate_cohort, Manifest, ManifestFiles, LATENTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub min_stays: usize,
    pub max_stays: usize,
    /// Fraction of stays that also receive an image taken during the stay.
    pub pairing_rate: f64,
    /// Images per subject taken outside every stay.
    pub extra_images_per_subject: usize,
    pub latent_dim: usize,
    /// Latent coordinates the sequences are generated from.
    pub seq_visible: Vec<usize>,
    /// Latent coordinates the images are generated from.
    pub img_visible: Vec<usize>,
    /// Number of task labels that receive a weight on an image-only coordinate
    /// when `task_weights` is not given.
    pub complementary_labels: usize,
    /// `25 × latent_dim`; drawn from the seed when absent.
    pub task_weights: Option<Vec<Vec<f64>>>,
    /// `14 × |img_visible|`; drawn from the seed when absent.
    pub aux_weights: Option<Vec<Vec<f64>>>,
    pub require_complementary: bool,
    pub stay_hours: f64,
    /// Probability that a given hour of a stay has a row.
    pub row_rate: f64,
    /// Probability that a feature is missing from a row.
    pub dropout: f64,
    pub ar_coefficient: f64,
    pub seq_noise: f64,
    pub image_side: usize,
    /// Mean pixel value away from the blobs.
    pub image_background: f64,
    pub image_noise: f64,
    /// Peak blob height; each blob scales it by the sigmoid of its latent.
    pub blob_amplitude: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            min_stays: 1,
            max_stays: 3,
            pairing_rate: 0.25,
            extra_images_per_subject: 1,
            latent_dim: 8,
            seq_visible: (0..6).collect(),
            img_visible: (4..8).collect(),
            complementary_labels: 15,
            task_weights: None,
            aux_weights: None,
            require_complementary: true,
            stay_hours: 48.0,
            row_rate: 0.8,
            dropout: 0.3,
            ar_coefficient: 0.7,
            seq_noise: 0.6,
            image_side: 64,
            image_background: 0.1,
            image_noise: 0.05,
            blob_amplitude: 0.8,
            seed: 0,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("generate.{name} = {v} is outside [0, 1]")));
    }
    Ok(())
}

impl CohortConfig {
    /// Image-visible coordinates the sequences do not see.
    pub fn img_only(&self) -> Vec<usize> {
        let seq: BTreeSet<_> = self.seq_visible.iter().collect();
        self.img_visible.iter().copied().filter(|v| !seq.contains(v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        unit_interval("pairing_rate", self.pairing_rate)?;
        unit_interval("row_rate", self.row_rate)?;
        unit_interval("dropout", self.dropout)?;
        if self.dropout >= 1.0 {
            return Err(Error::Config("generate.dropout must be below 1".into()));
        }
        if self.n_subjects == 0 {
            return Err(Error::Config("generate.n_subjects must be positive".into()));
        }
        if self.min_stays == 0 || self.min_stays > self.max_stays {
            return Err(Error::Config(format!(
                "generate.min_stays/max_stays = {}/{} must satisfy 1 <= min <= max",
                self.min_stays, self.max_stays
            )));
        }
        if !(self.stay_hours > 0.0 && self.stay_hours.is_finite()) {
            return Err(Error::Config("generate.stay_hours must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient.abs()) {
            return Err(Error::Config("generate.ar_coefficient must lie in (-1, 1)".into()));
        }
        for (name, v) in [
            ("seq_noise", self.seq_noise),
            ("image_background", self.image_background),
            ("image_noise", self.image_noise),
            ("blob_amplitude", self.blob_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("generate.{name} must be finite and non-negative")));
            }
        }
        if self.image_side < 8 {
            return Err(Error::Config("generate.image_side must be at least 8".into()));
        }
        let d = self.latent_dim;
        if d == 0 {
            return Err(Error::Config("generate.latent_dim must be positive".into()));
        }
        for (name, set) in [("seq_visible", &self.seq_visible), ("img_visible", &self.img_visible)] {
            if set.is_empty() {
                return Err(Error::Config(format!("generate.{name} must not be empty")));
            }
            if let Some(v) = set.iter().find(|&&v| v >= d) {
                return Err(Error::Config(format!("generate.{name} contains {v}, latent_dim is {d}")));
            }
            if set.iter().collect::<BTreeSet<_>>().len() != set.len() {
                return Err(Error::Config(format!("generate.{name} has duplicate coordinates")));
            }
        }
        let covered: BTreeSet<_> = self.seq_visible.iter().chain(&self.img_visible).collect();
        if covered.len() != d {
            return Err(Error::Config(
                "generate.seq_visible and img_visible together must cover every latent coordinate".into(),
            ));
        }
        if self.complementary_labels > TASK_LABELS {
            return Err(Error::Config(format!(
                "generate.complementary_labels must be at most {TASK_LABELS}"
            )));
        }
        if let Some(w) = &self.task_weights {
            check_matrix("task_weights", w, TASK_LABELS, d)?;
        }
        if let Some(w) = &self.aux_weights {
            check_matrix("aux_weights", w, AUX_LABELS, self.img_visible.len())?;
        }
        Ok(())
    }
}

fn check_matrix(name: &str, w: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if w.len() != rows || w.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("generate.{name} must be {rows}×{cols}")));
    }
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("generate.{name} must be finite")));
    }
    Ok(())
}

/// A Gaussian spot whose brightness encodes one image-visible coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
}

/// Every fixed quantity of the generative process.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortModel {
    pub task_weights: Vec<Vec<f64>>,
    pub aux_weights: Vec<Vec<f64>>,
    /// `17 × |seq_visible|` readout of the sequence means.
    pub readout: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    pub blobs: Vec<Blob>,
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

impl CohortModel {
    pub fn new(config: &CohortConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let d = config.latent_dim;
        let seq = &config.seq_visible;
        let img = &config.img_visible;
        let img_only = config.img_only();

        let mut task = vec![vec![0.0; d]; TASK_LABELS];
        for (k, row) in task.iter_mut().enumerate() {
            let a = seq[k % seq.len()];
            row[a] = signed(&mut rng, 0.8, 1.6);
            if seq.len() > 1 {
                let b = seq[(k * 3 + 1) % seq.len()];
                let b = if b == a { seq[(k + 1) % seq.len()] } else { b };
                row[b] = signed(&mut rng, 0.8, 1.6);
            }
        }
        let mut order: Vec<usize> = (0..TASK_LABELS).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        if !img_only.is_empty() {
            for (i, &k) in order.iter().take(config.complementary_labels).enumerate() {
                task[k][img_only[i % img_only.len()]] = signed(&mut rng, 1.5, 2.5);
            }
        }
        let task = config.task_weights.clone().unwrap_or(task);

        let mut aux = vec![vec![0.0; img.len()]; AUX_LABELS];
        let primaries: Vec<usize> = if img_only.is_empty() { img.clone() } else { img_only.clone() };
        for (r, row) in aux.iter_mut().enumerate() {
            let primary = primaries[r % primaries.len()];
            for (c, &v) in img.iter().enumerate() {
                row[c] = if v == primary {
                    signed(&mut rng, 1.2, 2.0)
                } else if img_only.contains(&v) {
                    signed(&mut rng, 0.0, 0.6)
                } else {
                    signed(&mut rng, 0.0, 0.8)
                };
            }
        }
        let aux = config.aux_weights.clone().unwrap_or(aux);

        let mut readout = vec![vec![0.0; seq.len()]; NUM_FEATURES];
        for (j, row) in readout.iter_mut().enumerate() {
            for (c, w) in row.iter_mut().enumerate() {
                *w = if c == j % seq.len() {
                    signed(&mut rng, 0.8, 1.5)
                } else {
                    signed(&mut rng, 0.0, 0.3)
                };
            }
        }
        let offset = (0..NUM_FEATURES).map(|_| rng.random_range(0.0..100.0)).collect();
        let scale = (0..NUM_FEATURES).map(|_| rng.random_range(0.5..20.0)).collect();

        let side = config.image_side as f64;
        let blobs = img
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let angle = std::f64::consts::TAU * i as f64 / img.len() as f64;
                let radius = if img.len() == 1 { 0.0 } else { 0.28 * side };
                Blob {
                    cx: side / 2.0 + radius * angle.cos(),
                    cy: side / 2.0 + radius * angle.sin(),
                    sigma: if img_only.contains(v) { 0.10 * side } else { 0.06 * side },
                }
            })
            .collect();

        let model = Self {
            task_weights: task,
            aux_weights: aux,
            readout,
            offset,
            scale,
            blobs,
        };
        model.check(config)?;
        Ok(model)
    }

    fn check(&self, config: &CohortConfig) -> Result<()> {
        if let Some(k) = self.task_weights.iter().position(|r| r.iter().all(|&w| w == 0.0)) {
            return Err(Error::Config(format!("task label y{} depends on no latent coordinate", k + 1)));
        }
        if config.require_complementary && self.complementary_labels(config).is_empty() {
            return Err(Error::Config(
                "no task label depends on an image-only latent coordinate; set require_complementary to false \
                 for a cohort without planted signal"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Task labels with a nonzero weight on an image-only coordinate.
    pub fn complementary_labels(&self, config: &CohortConfig) -> Vec<usize> {
        let img_only = config.img_only();
        (0..self.task_weights.len())
            .filter(|&k| img_only.iter().any(|&v| self.task_weights[k][v] != 0.0))
            .collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
