//! Check-in ingestion: parsing, filtering, segmentation and dataset splits.

mod bundle;
mod filter;
mod parse;
mod store;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use bundle::{build_bundle, BundleConfig, DatasetBundle, SocialGraph, Split, Vocabulary, UNK_LOCATION};
pub use filter::{filter_and_segment, FilterConfig};
pub use parse::{parse_checkins, parse_reader, read_edge_list, ColumnMapping, LogFormat, ParseReport};
pub use store::{load_bundle, save_bundle, BundleManifest, BUNDLE_FORMAT_VERSION};

/// One POI visit. Before bundling, `user` and `lid` carry raw dataset ids;
/// inside a [`DatasetBundle`] they are vocabulary indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInRecord {
    pub user: u64,
    pub lid: u64,
    pub lon: f64,
    pub lat: f64,
    /// Seconds since the Unix epoch, UTC.
    pub t: i64,
    pub cat: String,
}

/// A time-ordered run of check-ins by one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInSequence {
    pub user: u64,
    pub records: Vec<CheckInRecord>,
}

impl CheckInSequence {
    /// Validates length ≥ 2, a single user, and non-decreasing timestamps.
    pub fn new(records: Vec<CheckInRecord>) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a check-in sequence needs at least 2 records, got {}",
                records.len()
            )));
        }
        let user = records[0].user;
        if records.iter().any(|r| r.user != user) {
            return Err(Error::InvalidArgument("sequence mixes users".into()));
        }
        if records.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidArgument("sequence timestamps decrease".into()));
        }
        Ok(Self { user, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn start_time(&self) -> i64 {
        self.records.first().map_or(0, |r| r.t)
    }

    /// Sequence without its final record, if it still has ≥ 2 records.
    pub fn prefix(&self) -> Option<CheckInSequence> {
        (self.records.len() >= 3).then(|| CheckInSequence {
            user: self.user,
            records: self.records[..self.records.len() - 1].to_vec(),
        })
    }
}
