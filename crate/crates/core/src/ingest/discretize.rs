//! Two-hour binning, carry-forward imputation and standardization.

use serde::{Deserialize, Serialize};

use super::types::{DiscretizedEpisode, EhrEpisode, EventRow, BIN_HOURS, NUM_FEATURES};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Minimum standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-feature moments and medians over the observed training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, feature: usize, raw: f64) -> f64 {
        (raw - self.mean[feature]) / self.std[feature]
    }

    /// Normalized value used before a feature's first observation.
    pub fn default_value(&self, feature: usize) -> f64 {
        self.normalize(feature, self.median[feature])
    }
}

/// Mean, population standard deviation (floored) and median per feature.
pub fn compute_norm_stats<'a>(episodes: impl IntoIterator<Item = &'a EhrEpisode>) -> Result<NormStats> {
    let mut observed: Vec<Vec<f64>> = vec![Vec::new(); NUM_FEATURES];
    for ep in episodes {
        for row in &ep.events {
            for (j, v) in row.values.iter().enumerate() {
                if let Some(x) = v {
                    observed[j].push(*x);
                }
            }
        }
    }
    let mut stats = NormStats {
        mean: Vec::with_capacity(NUM_FEATURES),
        std: Vec::with_capacity(NUM_FEATURES),
        median: Vec::with_capacity(NUM_FEATURES),
    };
    for (j, values) in observed.iter_mut().enumerate() {
        if values.is_empty() {
            return Err(Error::Config(format!(
                "feature f{} is never observed in the training split",
                j + 1
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        values.sort_by(f64::total_cmp);
        let mid = values.len() / 2;
        let median = if values.len() % 2 == 0 {
            (values[mid - 1] + values[mid]) / 2.0
        } else {
            values[mid]
        };
        stats.mean.push(mean);
        stats.std.push(var.sqrt().max(STD_FLOOR));
        stats.median.push(median);
    }
    Ok(stats)
}

/// Last raw observation per bin and feature, before imputation.
pub type RawBins = Vec<[Option<f64>; NUM_FEATURES]>;

/// Number of bins for a stay, capped at `max_bins`.
pub fn bin_count(length_h: f64, max_bins: usize) -> usize {
    natural_bins(length_h).min(max_bins)
}

fn natural_bins(length_h: f64) -> usize {
    ((length_h / BIN_HOURS).ceil() as usize).max(1)
}

/// Assigns each observation to bin `floor(hour / 2)`; later rows win.
///
/// An observation exactly at the stay end belongs to the last bin. Rows past
/// `max_bins` are dropped.
pub fn bin_events(episode: &EhrEpisode, max_bins: usize) -> Result<RawBins> {
    if episode.events.is_empty() {
        return Err(Error::EmptySequence(format!("stay {} has no rows", episode.stay_id)));
    }
    let natural = natural_bins(episode.length_h());
    let mut bins: RawBins = vec![[None; NUM_FEATURES]; natural.min(max_bins)];
    let mut order: Vec<&EventRow> = episode.events.iter().collect();
    order.sort_by(|a, b| a.hour.total_cmp(&b.hour));
    for row in order {
        let mut k = (row.hour.max(0.0) / BIN_HOURS).floor() as usize;
        if k >= natural {
            k = natural - 1;
        }
        let Some(bin) = bins.get_mut(k) else {
            continue;
        };
        for (slot, v) in bin.iter_mut().zip(&row.values) {
            if v.is_some() {
                *slot = *v;
            }
        }
    }
    Ok(bins)
}

/// Carry-forward imputation with masks and standardization of binned values.
pub fn impute(bins: &RawBins, stats: &NormStats) -> Result<DiscretizedEpisode> {
    let t = bins.len();
    let width = 2 * NUM_FEATURES;
    let mut data = vec![0.0; t * width];
    let mut carried: Vec<f64> = (0..NUM_FEATURES).map(|j| stats.default_value(j)).collect();
    for (k, bin) in bins.iter().enumerate() {
        let row = &mut data[k * width..(k + 1) * width];
        for j in 0..NUM_FEATURES {
            if let Some(raw) = bin[j] {
                carried[j] = stats.normalize(j, raw);
                row[NUM_FEATURES + j] = 1.0;
            }
            row[j] = carried[j];
        }
    }
    Ok(DiscretizedEpisode {
        data: Tensor::new(vec![t, width], data)?,
    })
}

pub fn discretize(episode: &EhrEpisode, stats: &NormStats, max_bins: usize) -> Result<DiscretizedEpisode> {
    impute(&bin_events(episode, max_bins)?, stats)
}
