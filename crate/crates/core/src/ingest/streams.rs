//! Independently cycling mini-batch samplers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::PreparedData;
use super::types::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSizes {
    pub cxr: usize,
    pub ehr: usize,
    pub pair: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self {
            cxr: 16,
            ehr: 16,
            pair: 16,
        }
    }
}

/// RNG stream ids, one per sampler.
const CXR_STREAM: u64 = 1;
const EHR_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;

/// Reshuffles its pool at every epoch boundary. Batches may straddle
/// epochs.
#[derive(Debug, Clone)]
pub struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epochs: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(pool: Vec<usize>, seed: u64, stream: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("cannot sample from an empty pool".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            order: Vec::new(),
            pool,
            cursor: 0,
            epochs: 0,
            rng,
        })
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// Number of epochs started so far.
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epochs += 1;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRequest {
    pub cxr: bool,
    pub ehr: bool,
    pub pairs: bool,
}

impl StreamRequest {
    pub const ALL: StreamRequest = StreamRequest {
        cxr: true,
        ehr: true,
        pairs: true,
    };
}

/// The three sampling streams of one split. Unrequested streams are `None`.
#[derive(Debug, Clone)]
pub struct Streams {
    pub batch: BatchSizes,
    pub cxr: Option<Sampler>,
    pub ehr: Option<Sampler>,
    pub pairs: Option<Sampler>,
}

pub fn make_streams(data: &PreparedData, split: Split, batch: BatchSizes, seed: u64, request: StreamRequest) -> Result<Streams> {
    if batch.cxr == 0 || batch.ehr == 0 || batch.pair == 0 {
        return Err(Error::Config("batch sizes must be at least 1".into()));
    }
    let build = |wanted: bool, pool: Vec<usize>, stream: u64, what: &str| -> Result<Option<Sampler>> {
        if !wanted {
            return Ok(None);
        }
        if pool.is_empty() {
            return Err(Error::Config(format!("the {split} split has no {what} samples")));
        }
        Sampler::new(pool, seed, stream).map(Some)
    };
    Ok(Streams {
        batch,
        cxr: build(request.cxr, data.cxr_pool(split), CXR_STREAM, "CXR")?,
        ehr: build(request.ehr, data.ehr_pool(split), EHR_STREAM, "EHR")?,
        pairs: build(request.pairs, data.pair_pool(split), PAIR_STREAM, "paired")?,
    })
}
