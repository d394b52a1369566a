use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sigmoid, CohortConfig, CohortModel};
use crate::encoders::LabelSpace;
use crate::error::{Error, Result};
use crate::ingest::formats::{self, ImageMeta, ListEntry};
use crate::ingest::{EventRow, Split, SplitCounts, NUM_FEATURES};

/// Per-stay and per-image latent vectors, for auditing.
pub const LATENTS: &str = "latents.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub listfile: String,
    pub label_groups: String,
    pub image_metadata: String,
    pub splits: String,
    pub latents: String,
    pub episodes: Vec<String>,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: ManifestFiles,
    pub counts: BTreeMap<Split, SplitCounts>,
    pub config: CohortConfig,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.config.seed = manifest.seed;
        Ok(manifest)
    }

    pub fn total(&self) -> SplitCounts {
        self.counts.values().fold(SplitCounts::default(), |a, c| SplitCounts {
            cxr: a.cxr + c.cxr,
            ehr: a.ehr + c.ehr,
            pairs: a.pairs + c.pairs,
        })
    }
}

struct GenImage {
    taken_at_h: f64,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Present for images that do not belong to a stay.
    latent: Option<Vec<f64>>,
}

struct GenStay {
    start_h: f64,
    end_h: f64,
    latent: Vec<f64>,
    rows: Vec<EventRow>,
    labels: Vec<u8>,
    image: Option<GenImage>,
}

struct GenSubject {
    stays: Vec<GenStay>,
    extra: Vec<GenImage>,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn bernoulli_labels(rng: &mut ChaCha8Rng, weights: &[Vec<f64>], z: &[f64]) -> Vec<u8> {
    weights
        .iter()
        .map(|w| {
            let logit: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
            u8::from(rng.random::<f64>() < sigmoid(logit))
        })
        .collect()
}

fn episode_rows(rng: &mut ChaCha8Rng, cfg: &CohortConfig, model: &CohortModel, z: &[f64]) -> Vec<EventRow> {
    let zs: Vec<f64> = cfg.seq_visible.iter().map(|&v| z[v]).collect();
    let mean: Vec<f64> = model
        .readout
        .iter()
        .map(|r| r.iter().zip(&zs).map(|(a, b)| a * b).sum())
        .collect();
    let phi = cfg.ar_coefficient;
    let stationary = cfg.seq_noise / (1.0 - phi * phi).sqrt();
    let mut x: Vec<f64> = mean
        .iter()
        .map(|m| m + stationary * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let hours = cfg.stay_hours.ceil() as usize;
    let mut rows = Vec::new();
    for h in 0..hours {
        for (xj, m) in x.iter_mut().zip(&mean) {
            *xj = m + phi * (*xj - m) + cfg.seq_noise * rng.sample::<f64, _>(StandardNormal);
        }
        if rng.random::<f64>() >= cfg.row_rate {
            continue;
        }
        let hour = round_to((h as f64 + rng.random::<f64>()).min(cfg.stay_hours), 2);
        let mut values = [None; NUM_FEATURES];
        for (j, v) in values.iter_mut().enumerate() {
            if rng.random::<f64>() >= cfg.dropout {
                *v = Some(round_to(model.offset[j] + model.scale[j] * x[j], 4));
            }
        }
        if values.iter().any(Option::is_some) {
            rows.push(EventRow { hour, values });
        }
    }
    if rows.is_empty() {
        let mut values = [None; NUM_FEATURES];
        values[0] = Some(round_to(model.offset[0] + model.scale[0] * x[0], 4));
        rows.push(EventRow { hour: 0.0, values });
    }
    rows
}

fn render(rng: &mut ChaCha8Rng, cfg: &CohortConfig, model: &CohortModel, z: &[f64]) -> Vec<u8> {
    let side = cfg.image_side;
    let amps: Vec<f64> = cfg
        .img_visible
        .iter()
        .map(|&v| cfg.blob_amplitude * sigmoid(z[v]))
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let mut p = cfg.image_background + cfg.image_noise * rng.sample::<f64, _>(StandardNormal);
            for (b, a) in model.blobs.iter().zip(&amps) {
                let dx = x as f64 + 0.5 - b.cx;
                let dy = y as f64 + 0.5 - b.cy;
                p += a * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            }
            out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn image(rng: &mut ChaCha8Rng, cfg: &CohortConfig, model: &CohortModel, z: &[f64], taken_at_h: f64) -> GenImage {
    let zv: Vec<f64> = cfg.img_visible.iter().map(|&v| z[v]).collect();
    GenImage {
        taken_at_h,
        pixels: render(rng, cfg, model, z),
        labels: bernoulli_labels(rng, &model.aux_weights, &zv),
        latent: None,
    }
}

fn subject(cfg: &CohortConfig, model: &CohortModel, subject_id: u64) -> GenSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(subject_id);
    let n_stays = rng.random_range(cfg.min_stays..=cfg.max_stays);
    let mut t: f64 = rng.random_range(0.0..100.0);
    let mut stays = Vec::with_capacity(n_stays);
    for _ in 0..n_stays {
        let start_h = round_to(t, 2);
        let end_h = start_h + cfg.stay_hours;
        let latent = normal_vec(&mut rng, cfg.latent_dim);
        let labels = bernoulli_labels(&mut rng, &model.task_weights, &latent);
        let rows = episode_rows(&mut rng, cfg, model, &latent);
        let image = (rng.random::<f64>() < cfg.pairing_rate).then(|| {
            let at = round_to(start_h + rng.random_range(0.05..0.95) * cfg.stay_hours, 2);
            image(&mut rng, cfg, model, &latent, at)
        });
        stays.push(GenStay {
            start_h,
            end_h,
            latent,
            rows,
            labels,
            image,
        });
        t = end_h + rng.random_range(24.0..720.0);
    }
    let extra = (0..cfg.extra_images_per_subject)
        .map(|_| {
            let at = round_to(t, 2);
            t += rng.random_range(24.0..720.0);
            let latent = normal_vec(&mut rng, cfg.latent_dim);
            let mut img = image(&mut rng, cfg, model, &latent, at);
            img.latent = Some(latent);
            img
        })
        .collect();
    GenSubject { stays, extra }
}

fn assign_splits(n_subjects: usize, seed: u64) -> Vec<(u64, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut ids: Vec<u64> = (1..=n_subjects as u64).collect();
    ids.shuffle(&mut rng);
    let n_train = (n_subjects as f64 * 0.7).round() as usize;
    let n_val = (n_subjects as f64 * 0.1).round() as usize;
    let mut out: Vec<(u64, Split)> = ids
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect();
    out.sort();
    out
}

/// Writes a cohort in the ingestion formats plus `latents.csv` and
/// `manifest.json`. Identical configs produce byte-identical directories.
pub fn generate_cohort(config: &CohortConfig, out_dir: &Path) -> Result<Manifest> {
    let model = CohortModel::new(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let subjects: Vec<GenSubject> = (1..=config.n_subjects as u64)
        .into_par_iter()
        .map(|s| subject(config, &model, s))
        .collect();
    let splits = assign_splits(config.n_subjects, config.seed);
    let split_of: BTreeMap<u64, Split> = splits.iter().copied().collect();

    let mut counts: BTreeMap<Split, SplitCounts> = Split::ALL.iter().map(|&s| (s, SplitCounts::default())).collect();
    let mut list = Vec::new();
    let mut metas = Vec::new();
    let mut episodes: Vec<(u64, &[EventRow])> = Vec::new();
    let mut rasters: Vec<(String, &[u8])> = Vec::new();
    let mut latents = String::from("kind,id");
    for v in 1..=config.latent_dim {
        latents.push_str(&format!(",z{v}"));
    }
    latents.push('\n');
    let mut push_latent = |kind: &str, id: &str, z: &[f64]| {
        latents.push_str(kind);
        latents.push(',');
        latents.push_str(id);
        for v in z {
            latents.push(',');
            latents.push_str(&formats::fmt_f64(*v));
        }
        latents.push('\n');
    };

    let mut stay_id = 0u64;
    let mut image_no = 0usize;
    let mut next_image = |subject_id: u64, img: &GenImage| {
        image_no += 1;
        ImageMeta {
            image_id: format!("img{image_no:06}"),
            subject_id,
            taken_at_h: img.taken_at_h,
            labels: img.labels.clone(),
        }
    };
    for (s, subj) in subjects.iter().enumerate() {
        let subject_id = s as u64 + 1;
        let c = counts.get_mut(&split_of[&subject_id]).expect("every subject has a split");
        for stay in &subj.stays {
            stay_id += 1;
            list.push(ListEntry {
                stay_id,
                subject_id,
                start_h: stay.start_h,
                end_h: stay.end_h,
                labels: stay.labels.clone(),
            });
            episodes.push((stay_id, &stay.rows));
            push_latent("stay", &stay_id.to_string(), &stay.latent);
            c.ehr += 1;
            if let Some(img) = &stay.image {
                let meta = next_image(subject_id, img);
                rasters.push((meta.image_id.clone(), &img.pixels));
                metas.push(meta);
                c.cxr += 1;
                c.pairs += 1;
            }
        }
        for img in &subj.extra {
            let meta = next_image(subject_id, img);
            push_latent("image", &meta.image_id, img.latent.as_deref().expect("extra images carry a latent"));
            rasters.push((meta.image_id.clone(), &img.pixels));
            metas.push(meta);
            c.cxr += 1;
        }
    }

    let root = out_dir;
    formats::write_listfile(&root.join(formats::LISTFILE), &list)?;
    formats::write_label_groups(&root.join(formats::LABEL_GROUPS), &LabelSpace::phenotyping().groups())?;
    formats::write_image_metadata(&root.join(formats::IMAGE_METADATA), &metas)?;
    formats::write_splits(&root.join(formats::SPLITS), &splits)?;
    let latents_path = root.join(LATENTS);
    fs::write(&latents_path, latents).map_err(|e| Error::io(&latents_path, e))?;

    let dir = root.join(formats::EPISODE_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    episodes
        .par_iter()
        .try_for_each(|(id, rows)| formats::write_episode(&formats::episode_path(root, *id), rows))?;
    let dir = root.join(formats::IMAGE_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let side = config.image_side;
    rasters
        .par_iter()
        .try_for_each(|(id, px)| formats::write_pgm(&formats::image_path(root, id), side, side, px))?;

    let relative = |p: std::path::PathBuf| p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
    let manifest = Manifest {
        seed: config.seed,
        files: ManifestFiles {
            listfile: formats::LISTFILE.into(),
            label_groups: formats::LABEL_GROUPS.into(),
            image_metadata: formats::IMAGE_METADATA.into(),
            splits: formats::SPLITS.into(),
            latents: LATENTS.into(),
            episodes: episodes.iter().map(|(id, _)| relative(formats::episode_path(root, *id))).collect(),
            images: rasters.iter().map(|(id, _)| relative(formats::image_path(root, id))).collect(),
        },
        counts,
        config: config.clone(),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
