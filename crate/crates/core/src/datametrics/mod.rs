//! Feature files, manifests, batching, the synthetic task and error-rate metrics.

mod data;
mod metrics;
mod synth;

pub use data::{load_dataset, make_batches, read_features, write_dataset, write_features, Utterance, FEAT_MAGIC, FEAT_VERSION};
pub use metrics::{edit_distance, error_rate, error_rate_ids, unit_tokens, Unit};
pub use synth::{gen_synthetic, SyntheticData, SyntheticTaskSpec};
