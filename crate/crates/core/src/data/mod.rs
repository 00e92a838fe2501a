//! Dataset ingestion, the synthetic corpus and preprocessed window stores.

mod ingest;
mod manifest;
mod store;
pub mod synthetic;

pub use ingest::{ingest, parse_csv, write_csv};
pub use manifest::{
    ColumnMap, ColumnRef, DatasetId, DatasetManifest, RatePolicy, HHAR_CLASSES, NOTCH_CLASSES,
};
pub use store::{preprocess_and_store, PrepParams, Provenance, WindowStore};
pub use synthetic::SyntheticConfig;

use crate::signal::Sample;

/// Time-sorted samples of one (user, device) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub user_id: String,
    pub device_id: String,
    pub rate_hz: f64,
    pub samples: Vec<Sample>,
}

/// Parsed corpus: streams sorted by (user, device).
#[derive(Clone, Debug, PartialEq)]
pub struct RawStreams {
    pub classes: Vec<String>,
    pub streams: Vec<Stream>,
    /// Rows dropped as malformed.
    pub skipped_rows: usize,
}

impl RawStreams {
    pub fn users(&self) -> Vec<&str> {
        let mut u: Vec<&str> = self.streams.iter().map(|s| s.user_id.as_str()).collect();
        u.dedup();
        u
    }
}
