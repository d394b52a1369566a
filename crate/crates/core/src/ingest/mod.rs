//! Loading, discretization, pairing and sampling of the two modalities.

mod dataset;
mod discretize;
pub mod formats;
mod pairing;
mod streams;
mod types;

pub use dataset::{Dataset, PreparedData};
pub use discretize::{bin_count, bin_events, compute_norm_stats, discretize, impute, NormStats, RawBins, STD_FLOOR};
pub use pairing::match_pairs;
pub use streams::{make_streams, BatchSizes, Sampler, StreamRequest, Streams};
pub use types::{
    CxrSample, DiscretizedEpisode, EhrEpisode, EventRow, PairedSample, Split, SplitCounts, BIN_HOURS, DEFAULT_MAX_BINS,
    NUM_FEATURES,
};
