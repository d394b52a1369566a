#![allow(dead_code)]

use std::path::Path;

use modfuse::datagen::{generate_cohort, CohortConfig};
use modfuse::encoders::{ImgEncoderSpec, ImgStage, ModelSpec, SeqEncoderSpec};
use modfuse::ingest::{BatchSizes, PreparedData};
use modfuse::trainer::{Mode, TrainConfig};

pub const SMALL_SIDE: usize = 16;

pub fn small_spec() -> ModelSpec {
    ModelSpec {
        seq: SeqEncoderSpec {
            hidden_dim: 8,
            ..Default::default()
        },
        img: ImgEncoderSpec {
            in_channels: 1,
            image_side: SMALL_SIDE,
            stages: vec![ImgStage { channels: 4, blocks: 1 }, ImgStage { channels: 6, blocks: 1 }],
        },
        unified_hidden: 8,
        ..Default::default()
    }
}

pub fn small_cohort_config(n_subjects: usize, seed: u64) -> CohortConfig {
    CohortConfig {
        n_subjects,
        image_side: SMALL_SIDE,
        pairing_rate: 0.5,
        seed,
        ..Default::default()
    }
}

pub fn small_cohort(dir: &Path, n_subjects: usize, seed: u64) -> PreparedData {
    generate_cohort(&small_cohort_config(n_subjects, seed), dir).unwrap();
    PreparedData::load_default(dir).unwrap()
}

pub fn small_train(mode: Mode, iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        iterations,
        pretrain_iterations: Some(iterations / 2),
        batch: BatchSizes { cxr: 4, ehr: 4, pair: 4 },
        eval_interval: 10,
        model: small_spec(),
        seed,
        ..Default::default()
    }
}
