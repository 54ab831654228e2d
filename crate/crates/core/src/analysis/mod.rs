//! Diagnostics and desk-scale checks around the cache pipeline.

pub mod channels;
pub mod consistency;
pub mod covering;
pub mod memory;
pub mod synthetic;
pub mod variance;

pub use channels::{channel_stats, ChannelStats, DEFAULT_OUTLIER_FACTOR};
pub use consistency::{consistency_metric, ConsistencyReport};
pub use covering::{covering_bound_check, CoveringReport};
pub use memory::{bits_per_token, FootprintParams};
pub use synthetic::{generate_synthetic_stream, SyntheticStream, SyntheticStreamSpec};
pub use variance::{decompose, variance_decomposition, VarianceReport};
