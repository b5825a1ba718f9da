use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::geocode::{char_positions, geohash_encode, time_slot, NUM_TIME_SLOTS};
use crate::ingest::{CheckInSequence, DatasetBundle};
use crate::nn::{device, DTYPE};
use crate::{Error, Result};

/// Everything needed to turn index-encoded sequences into tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub num_users: usize,
    pub num_locations: usize,
    /// Sorted category vocabulary; index 0 is the empty category.
    pub categories: Vec<String>,
    pub geohash_bits: usize,
    pub tz_offset_hours: f64,
    pub log_dt_mean: f64,
    pub log_dt_std: f64,
}

impl FeatureSpace {
    pub fn from_bundle(bundle: &DatasetBundle, geohash_bits: usize) -> Self {
        Self {
            num_users: bundle.vocab.num_users(),
            num_locations: bundle.vocab.num_locations(),
            categories: bundle.vocab.categories.clone(),
            geohash_bits,
            tz_offset_hours: bundle.config.tz_offset_hours,
            log_dt_mean: bundle.log_dt_mean,
            log_dt_std: bundle.log_dt_std,
        }
    }

    pub fn geohash_positions(&self) -> usize {
        char_positions(self.geohash_bits)
    }

    pub fn category_index(&self, text: &str) -> usize {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(text))
            .unwrap_or(0)
    }

    pub fn standardize_dt(&self, dt_seconds: f64) -> f64 {
        (dt_seconds.max(1.0).ln() - self.log_dt_mean) / self.log_dt_std
    }

    /// Errors if `seq` references users or locations outside the vocabulary.
    pub fn check(&self, seq: &CheckInSequence) -> Result<()> {
        if seq.user as usize >= self.num_users {
            return Err(Error::UnknownId {
                kind: "user",
                id: seq.user as usize,
                size: self.num_users,
            });
        }
        for r in &seq.records {
            if r.lid as usize >= self.num_locations {
                return Err(Error::UnknownId {
                    kind: "location",
                    id: r.lid as usize,
                    size: self.num_locations,
                });
            }
        }
        Ok(())
    }
}

/// A right-padded batch of sequences as index and feature tensors.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// `[B, T, 1]`, 1 on real steps.
    pub mask: Tensor,
    /// `[B*T*P]` geohash character ids, pre-offset by `32 * position`.
    pub geohash_chars: Tensor,
    /// `[B*T]` location indices.
    pub locations: Tensor,
    /// `[B*T]` category indices.
    pub categories: Tensor,
    /// `[B*T]` time-slot indices.
    pub slots: Tensor,
    /// `[B, T, 48]` one-hot time slots.
    pub slot_onehot: Tensor,
    /// `[B, T, 1]` standardized log gap to the previous check-in (0 on the first step).
    pub gaps: Tensor,
    pub users: Vec<usize>,
    /// `[B]` user indices.
    pub user_index: Tensor,
}

impl SeqBatch {
    pub fn new(seqs: &[&CheckInSequence], space: &FeatureSpace) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("sequence batch"));
        }
        let b = seqs.len();
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let p = space.geohash_positions();
        let mut mask = vec![0.0; b * t];
        let mut chars = vec![0u32; b * t * p];
        let mut locations = vec![0u32; b * t];
        let mut categories = vec![0u32; b * t];
        let mut slots = vec![0u32; b * t];
        let mut onehot = vec![0.0; b * t * NUM_TIME_SLOTS];
        let mut gaps = vec![0.0; b * t];
        for (i, seq) in seqs.iter().enumerate() {
            space.check(seq)?;
            for (j, r) in seq.records.iter().enumerate() {
                let k = i * t + j;
                mask[k] = 1.0;
                let code = geohash_encode(r.lat, r.lon, space.geohash_bits)?;
                for (pos, c) in code.char_indices().into_iter().enumerate() {
                    chars[k * p + pos] = (pos * 32) as u32 + c;
                }
                locations[k] = r.lid as u32;
                categories[k] = space.category_index(&r.cat) as u32;
                let slot = time_slot(r.t, space.tz_offset_hours).index();
                slots[k] = slot as u32;
                onehot[k * NUM_TIME_SLOTS + slot] = 1.0;
                if j > 0 {
                    gaps[k] = space.standardize_dt((r.t - seq.records[j - 1].t) as f64);
                }
            }
        }
        let dev = device();
        let users: Vec<usize> = seqs.iter().map(|s| s.user as usize).collect();
        Ok(Self {
            lengths: seqs.iter().map(|s| s.len()).collect(),
            max_len: t,
            mask: Tensor::from_vec(mask, (b, t, 1), &dev)?,
            geohash_chars: Tensor::from_vec(chars, b * t * p, &dev)?,
            locations: Tensor::from_vec(locations, b * t, &dev)?,
            categories: Tensor::from_vec(categories, b * t, &dev)?,
            slots: Tensor::from_vec(slots, b * t, &dev)?,
            slot_onehot: Tensor::from_vec(onehot, (b, t, NUM_TIME_SLOTS), &dev)?,
            gaps: Tensor::from_vec(gaps, (b, t, 1), &dev)?.to_dtype(DTYPE)?,
            user_index: Tensor::from_vec(users.iter().map(|&u| u as u32).collect::<Vec<_>>(), b, &dev)?,
            users,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}
