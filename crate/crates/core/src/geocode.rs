//! Deterministic featurization of coordinates and timestamps.
//!
//! Coordinates become geohash codes built by recursive bisection of the
//! latitude and longitude ranges; timestamps become one of 48 hour slots
//! (24 weekday hours followed by 24 weekend hours).

use chrono::{DateTime, Datelike, FixedOffset, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Base32 alphabet used by geohash strings.
pub const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// Default total number of interleaved bits (16 per axis).
pub const DEFAULT_GEOHASH_BITS: usize = 32;

/// Number of distinct time slots.
pub const NUM_TIME_SLOTS: usize = 48;

const LAT_RANGE: (f64, f64) = (-90.0, 90.0);
const LON_RANGE: (f64, f64) = (-180.0, 180.0);

/// A geohash cell code.
///
/// `bits` is the interleaved sequence with latitude bits at even positions
/// and longitude bits at odd positions. `text` is the conventional Base32
/// geohash (longitude-first interleave) of the same cell, truncated to whole
/// 5-bit characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeohashCode {
    pub bits: Vec<bool>,
    pub text: String,
}

/// A rectangular lat/lon cell, half-open on the upper side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub lat: (f64, f64),
    pub lon: (f64, f64),
}

impl Cell {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.lat.0 <= lat && lat <= self.lat.1 && self.lon.0 <= lon && lon <= self.lon.1
    }

    pub fn contains_cell(&self, other: &Cell) -> bool {
        self.lat.0 <= other.lat.0
            && other.lat.1 <= self.lat.1
            && self.lon.0 <= other.lon.0
            && other.lon.1 <= self.lon.1
    }
}

/// Checks the open coordinate domain lat ∈ (−90, 90), lon ∈ (−180, 180).
pub fn validate_coordinate(lat: f64, lon: f64) -> Result<()> {
    let ok = lat.is_finite()
        && lon.is_finite()
        && lat > LAT_RANGE.0
        && lat < LAT_RANGE.1
        && lon > LON_RANGE.0
        && lon < LON_RANGE.1;
    if ok {
        Ok(())
    } else {
        Err(Error::CoordinateOutOfRange { lat, lon })
    }
}

/// Recursive bisection: '1' when the value lies in the upper half, with the
/// midpoint itself assigned to the upper half.
fn bisect(value: f64, range: (f64, f64), n: usize) -> Vec<bool> {
    let (mut lo, mut hi) = range;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mid = (lo + hi) / 2.0;
        if value >= mid {
            out.push(true);
            lo = mid;
        } else {
            out.push(false);
            hi = mid;
        }
    }
    out
}

fn narrow(range: (f64, f64), bits: impl Iterator<Item = bool>) -> (f64, f64) {
    let (mut lo, mut hi) = range;
    for b in bits {
        let mid = (lo + hi) / 2.0;
        if b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

fn pack5(bits: &[bool]) -> usize {
    bits.iter()
        .enumerate()
        .fold(0usize, |acc, (i, &b)| acc | ((b as usize) << (4 - i)))
}

/// Encodes a coordinate into `precision_bits` interleaved bits.
pub fn geohash_encode(lat: f64, lon: f64, precision_bits: usize) -> Result<GeohashCode> {
    validate_coordinate(lat, lon)?;
    if precision_bits == 0 || precision_bits % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "geohash precision must be a positive even bit count, got {precision_bits}"
        )));
    }
    let per_axis = precision_bits / 2;
    let lat_bits = bisect(lat, LAT_RANGE, per_axis);
    let lon_bits = bisect(lon, LON_RANGE, per_axis);

    let bits: Vec<bool> = lat_bits
        .iter()
        .zip(&lon_bits)
        .flat_map(|(&a, &o)| [a, o])
        .collect();

    // Conventional geohash text interleaves longitude first.
    let classic: Vec<bool> = lon_bits
        .iter()
        .zip(&lat_bits)
        .flat_map(|(&o, &a)| [o, a])
        .collect();
    let text = classic
        .chunks_exact(5)
        .map(|c| BASE32[pack5(c)] as char)
        .collect();

    Ok(GeohashCode { bits, text })
}

impl GeohashCode {
    pub fn lat_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().step_by(2).copied()
    }

    pub fn lon_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().skip(1).step_by(2).copied()
    }

    /// The cell described by the full bit sequence.
    pub fn cell(&self) -> Cell {
        Cell {
            lat: narrow(LAT_RANGE, self.lat_bits()),
            lon: narrow(LON_RANGE, self.lon_bits()),
        }
    }

    /// 5-bit groups of the interleaved sequence, last group zero-padded.
    /// These are the per-position "characters" fed to the embedding tables.
    pub fn char_indices(&self) -> Vec<u32> {
        self.bits
            .chunks(5)
            .map(|c| {
                let mut padded = [false; 5];
                padded[..c.len()].copy_from_slice(c);
                pack5(&padded) as u32
            })
            .collect()
    }
}

/// Number of 5-bit character positions for a bit precision.
pub fn char_positions(precision_bits: usize) -> usize {
    precision_bits.div_ceil(5)
}

/// Decodes a conventional Base32 geohash string into its cell.
pub fn geohash_decode(text: &str) -> Result<Cell> {
    let mut lon_bits = Vec::new();
    let mut lat_bits = Vec::new();
    let mut even = true;
    for ch in text.bytes() {
        let v = BASE32
            .iter()
            .position(|&b| b == ch.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("invalid geohash character {:?}", ch as char)))?;
        for shift in (0..5).rev() {
            let bit = (v >> shift) & 1 == 1;
            if even {
                lon_bits.push(bit);
            } else {
                lat_bits.push(bit);
            }
            even = !even;
        }
    }
    Ok(Cell {
        lat: narrow(LAT_RANGE, lat_bits.into_iter()),
        lon: narrow(LON_RANGE, lon_bits.into_iter()),
    })
}

/// Hour-of-week slot in local civic time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeSlot(u8);

impl TimeSlot {
    pub fn new(index: u8) -> Option<Self> {
        ((index as usize) < NUM_TIME_SLOTS).then_some(Self(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_weekend(self) -> bool {
        self.0 >= 24
    }
}

/// Converts a UTC timestamp into local time with a fixed hour offset.
pub fn local_time(t: i64, tz_offset_hours: f64) -> DateTime<FixedOffset> {
    let offset_secs = (tz_offset_hours * 3600.0).round() as i32;
    let offset = FixedOffset::east_opt(offset_secs).unwrap_or_else(|| FixedOffset::east_opt(0).unwrap());
    DateTime::from_timestamp(t, 0)
        .unwrap_or_default()
        .with_timezone(&offset)
}

/// Slot index: weekday hours map to 0..24, Saturday/Sunday hours to 24..48.
pub fn time_slot(t: i64, tz_offset_hours: f64) -> TimeSlot {
    let local = local_time(t, tz_offset_hours);
    let hour = local.hour() as u8;
    let weekend = matches!(local.weekday(), Weekday::Sat | Weekday::Sun);
    TimeSlot(if weekend { 24 + hour } else { hour })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(y: i32, m: u32, d: u32, h: u32, min: u32) -> i64 {
        NaiveDate::from_ymd_opt(y, m, d)
            .unwrap()
            .and_hms_opt(h, min, 0)
            .unwrap()
            .and_utc()
            .timestamp()
    }

    #[test]
    fn classic_vector() {
        let code = geohash_encode(57.64911, 10.40744, 30).unwrap();
        assert!(code.text.starts_with("u4pru"), "{}", code.text);
        assert_eq!(code.text.len(), 6);
    }

    #[test]
    fn first_bisection_step_uses_upper_half_at_midpoint() {
        let code = geohash_encode(45.0, 0.0, 2).unwrap();
        assert_eq!(code.bits, vec![true, true]);
    }

    #[test]
    fn rejects_out_of_range_and_odd_precision() {
        assert!(matches!(
            geohash_encode(95.0, 0.0, 32),
            Err(Error::CoordinateOutOfRange { .. })
        ));
        assert!(geohash_encode(90.0, 0.0, 32).is_err());
        assert!(geohash_encode(0.0, -180.0, 32).is_err());
        assert!(geohash_encode(10.0, 10.0, 31).is_err());
        assert!(geohash_encode(f64::NAN, 10.0, 32).is_err());
    }

    #[test]
    fn text_and_bits_describe_the_same_cell() {
        let code = geohash_encode(40.7359, -73.9905, 30).unwrap();
        assert_eq!(geohash_decode(&code.text).unwrap(), code.cell());
        assert!(code.cell().contains(40.7359, -73.9905));
    }

    #[test]
    fn char_indices_cover_all_bits() {
        let code = geohash_encode(40.7359, -73.9905, 32).unwrap();
        let idx = code.char_indices();
        assert_eq!(idx.len(), char_positions(32));
        assert_eq!(idx.len(), 7);
        assert!(idx.iter().all(|&i| i < 32));
        // Last group holds 2 real bits, left aligned.
        assert_eq!(idx[6] & 0b00111, 0);
    }

    #[test]
    fn slots_for_weekdays_and_weekends() {
        // 2024-01-02 is a Tuesday, 2024-01-06 a Saturday, 2024-01-01 a Monday.
        assert_eq!(time_slot(ts(2024, 1, 2, 13, 30), 0.0).index(), 13);
        assert_eq!(time_slot(ts(2024, 1, 6, 13, 30), 0.0).index(), 37);
        assert_eq!(time_slot(ts(2024, 1, 1, 0, 0), 0.0).index(), 0);
        // Tuesday 23:30 UTC is Wednesday 08:30 at +9.
        assert_eq!(time_slot(ts(2024, 1, 2, 23, 30), 9.0).index(), 8);
        // Friday 20:00 UTC is Saturday 05:00 at +9.
        assert_eq!(time_slot(ts(2024, 1, 5, 20, 0), 9.0).index(), 29);
    }

    #[test]
    fn week_sweep_covers_every_slot() {
        let start = ts(2024, 1, 1, 0, 0);
        let mut seen = [false; NUM_TIME_SLOTS];
        for h in 0..(7 * 24) {
            seen[time_slot(start + h * 3600, 0.0).index()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
