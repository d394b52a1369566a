use std::collections::BTreeMap;
use std::path::Path;

use super::discretize::{compute_norm_stats, discretize, NormStats};
use super::formats;
use super::pairing::match_pairs;
use super::types::{CxrSample, DiscretizedEpisode, EhrEpisode, PairedSample, Split, SplitCounts, DEFAULT_MAX_BINS};
use crate::diffcore::Tensor;
use crate::encoders::{LabelSpace, SeqBatch};
use crate::error::{Error, Result};

/// Raw records as stored on disk, sorted by stay id and image id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub episodes: Vec<EhrEpisode>,
    pub images: Vec<CxrSample>,
    pub splits: BTreeMap<u64, Split>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let groups = formats::read_label_groups(&root.join(formats::LABEL_GROUPS))?;
        let labels = LabelSpace::with_groups(&groups)?;

        let mut episodes = Vec::new();
        for entry in formats::read_listfile(&root.join(formats::LISTFILE))? {
            let path = formats::episode_path(root, entry.stay_id);
            let events = formats::read_episode(&path)?;
            if entry.end_h < entry.start_h {
                return Err(Error::format(&path, "stay ends before it starts"));
            }
            let length = entry.end_h - entry.start_h;
            let slack = 1e-9 * length.abs().max(1.0);
            if let Some(row) = events.iter().find(|r| r.hour < -slack || r.hour > length + slack) {
                return Err(Error::format(&path, format!("hour {} outside the {length} h stay", row.hour)));
            }
            if !events.iter().any(|r| r.values.iter().any(Option::is_some)) {
                return Err(Error::format(&path, "episode has no observed value"));
            }
            episodes.push(EhrEpisode {
                stay_id: entry.stay_id,
                subject_id: entry.subject_id,
                start_h: entry.start_h,
                end_h: entry.end_h,
                events,
                labels: entry.labels,
            });
        }
        episodes.sort_by_key(|e| e.stay_id);

        let mut images = Vec::new();
        for meta in formats::read_image_metadata(&root.join(formats::IMAGE_METADATA))? {
            let path = formats::image_path(root, &meta.image_id);
            let (w, h, raster) = formats::read_pgm(&path)?;
            let pixels = raster.iter().map(|&b| b as f64 / 255.0).collect();
            images.push(CxrSample {
                image_id: meta.image_id,
                subject_id: meta.subject_id,
                taken_at_h: meta.taken_at_h,
                pixels: Tensor::new(vec![1, h, w], pixels)?,
                aux_labels: meta.labels,
            });
        }
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

        let path = root.join(formats::SPLITS);
        let mut splits = BTreeMap::new();
        for (subject, split) in formats::read_splits(&path)? {
            if splits.insert(subject, split).is_some() {
                return Err(Error::format(&path, format!("subject {subject} listed twice")));
            }
        }
        let subjects = episodes.iter().map(|e| e.subject_id).chain(images.iter().map(|i| i.subject_id));
        for s in subjects {
            if !splits.contains_key(&s) {
                return Err(Error::format(&path, format!("subject {s} has no split")));
            }
        }
        Ok(Self {
            labels,
            episodes,
            images,
            splits,
        })
    }
}

/// A loaded dataset with normalization fitted on the training split,
/// discretized episodes and matched pairs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub labels: LabelSpace,
    pub episodes: Vec<EhrEpisode>,
    pub images: Vec<CxrSample>,
    pub splits: BTreeMap<u64, Split>,
    pub stats: NormStats,
    pub inputs: Vec<DiscretizedEpisode>,
    pub pairs: Vec<PairedSample>,
}

impl PreparedData {
    pub fn load(root: &Path, max_bins: usize) -> Result<Self> {
        Self::prepare(Dataset::load(root)?, max_bins)
    }

    pub fn load_default(root: &Path) -> Result<Self> {
        Self::load(root, DEFAULT_MAX_BINS)
    }

    pub fn prepare(dataset: Dataset, max_bins: usize) -> Result<Self> {
        let Dataset {
            labels,
            episodes,
            images,
            splits,
        } = dataset;
        let train = episodes.iter().filter(|e| splits.get(&e.subject_id) == Some(&Split::Train));
        let stats = compute_norm_stats(train)?;
        let inputs = episodes
            .iter()
            .map(|e| discretize(e, &stats, max_bins))
            .collect::<Result<Vec<_>>>()?;
        let pairs = match_pairs(&episodes, &images);
        Ok(Self {
            labels,
            episodes,
            images,
            splits,
            stats,
            inputs,
            pairs,
        })
    }

    pub fn split_of(&self, subject: u64) -> Option<Split> {
        self.splits.get(&subject).copied()
    }

    /// Indices into `episodes`.
    pub fn ehr_pool(&self, split: Split) -> Vec<usize> {
        (0..self.episodes.len())
            .filter(|&i| self.split_of(self.episodes[i].subject_id) == Some(split))
            .collect()
    }

    /// Indices into `images`.
    pub fn cxr_pool(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.split_of(self.images[i].subject_id) == Some(split))
            .collect()
    }

    /// Indices into `pairs`, in ascending stay id.
    pub fn pair_pool(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len())
            .filter(|&i| self.split_of(self.episodes[self.pairs[i].episode].subject_id) == Some(split))
            .collect()
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        SplitCounts {
            cxr: self.cxr_pool(split).len(),
            ehr: self.ehr_pool(split).len(),
            pairs: self.pair_pool(split).len(),
        }
    }

    pub fn image_batch(&self, images: &[usize]) -> Result<Tensor> {
        let first = self.images.first().ok_or_else(|| Error::Config("dataset has no images".into()))?;
        let plane = first.pixels.shape().to_vec();
        let mut data = Vec::with_capacity(images.len() * first.pixels.len());
        for &i in images {
            let px = &self.images[i].pixels;
            if px.shape() != plane.as_slice() {
                return Err(Error::Shape(format!(
                    "image {} has shape {:?}, expected {:?}",
                    self.images[i].image_id,
                    px.shape(),
                    plane
                )));
            }
            data.extend_from_slice(px.data());
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&plane);
        Tensor::new(shape, data)
    }

    pub fn seq_batch(&self, episodes: &[usize]) -> Result<SeqBatch> {
        let refs: Vec<&Tensor> = episodes.iter().map(|&i| &self.inputs[i].data).collect();
        SeqBatch::from_episodes(&refs)
    }

    pub fn task_targets(&self, episodes: &[usize]) -> Result<Tensor> {
        label_matrix(episodes.iter().map(|&i| self.episodes[i].labels.as_slice()))
    }

    pub fn aux_targets(&self, images: &[usize]) -> Result<Tensor> {
        label_matrix(images.iter().map(|&i| self.images[i].aux_labels.as_slice()))
    }

    /// Episode and image indices behind a list of pair indices.
    pub fn unzip_pairs(&self, pairs: &[usize]) -> (Vec<usize>, Vec<usize>) {
        pairs.iter().map(|&p| (self.pairs[p].episode, self.pairs[p].image)).unzip()
    }
}

fn label_matrix<'a>(rows: impl Iterator<Item = &'a [u8]>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut width = None;
    for r in rows {
        if *width.get_or_insert(r.len()) != r.len() {
            return Err(Error::Shape("label rows of different widths".into()));
        }
        data.extend(r.iter().map(|&y| y as f64));
        n += 1;
    }
    Tensor::new(vec![n, width.unwrap_or(0)], data)
}
