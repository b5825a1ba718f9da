use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CheckInRecord, CheckInSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_user_records: usize,
    pub min_loc_visits: usize,
    /// Per-user look-back window ending at the user's latest check-in.
    /// `None` keeps the full history.
    pub history_days: Option<f64>,
    /// A gap strictly longer than this starts a new sequence.
    pub gap_hours: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_user_records: 10,
            min_loc_visits: 10,
            history_days: Some(120.0),
            gap_hours: 24.0,
        }
    }
}

fn truncate_history(records: Vec<CheckInRecord>, days: f64) -> Vec<CheckInRecord> {
    let window = (days * 86_400.0) as i64;
    let mut latest: HashMap<u64, i64> = HashMap::new();
    for r in &records {
        let e = latest.entry(r.user).or_insert(r.t);
        *e = (*e).max(r.t);
    }
    records
        .into_iter()
        .filter(|r| r.t >= latest[&r.user] - window)
        .collect()
}

fn filter_by_count(records: Vec<CheckInRecord>, min: usize, key: impl Fn(&CheckInRecord) -> u64) -> Vec<CheckInRecord> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for r in &records {
        *counts.entry(key(r)).or_default() += 1;
    }
    records.into_iter().filter(|r| counts[&key(r)] >= min).collect()
}

/// Splits (user, t)-sorted records at user changes and at gaps > `gap_hours`.
fn segment(records: &[CheckInRecord], gap_hours: f64) -> Vec<Vec<CheckInRecord>> {
    let gap = gap_hours * 3600.0;
    let mut out: Vec<Vec<CheckInRecord>> = Vec::new();
    for r in records {
        let start_new = match out.last().and_then(|s| s.last()) {
            Some(prev) => prev.user != r.user || (r.t - prev.t) as f64 > gap,
            None => true,
        };
        if start_new {
            out.push(Vec::new());
        }
        out.last_mut().unwrap().push(r.clone());
    }
    out
}

/// Filters users and locations by frequency, truncates each user's history
/// and segments the streams into sequences.
///
/// All stages only remove records, so they are repeated until nothing
/// changes. The output is therefore a fixed point: feeding its flattened
/// records back in returns the same sequences.
pub fn filter_and_segment(records: &[CheckInRecord], cfg: &FilterConfig) -> Vec<CheckInSequence> {
    let mut current: Vec<CheckInRecord> = records.to_vec();
    current.sort_by_key(|r| (r.user, r.t));
    loop {
        let before = current.len();
        if let Some(days) = cfg.history_days {
            current = truncate_history(current, days);
        }
        current = filter_by_count(current, cfg.min_user_records, |r| r.user);
        current = filter_by_count(current, cfg.min_loc_visits, |r| r.lid);
        let segments = segment(&current, cfg.gap_hours);
        current = segments.into_iter().filter(|s| s.len() >= 2).flatten().collect();
        if current.len() == before {
            break;
        }
    }
    segment(&current, cfg.gap_hours)
        .into_iter()
        .map(|records| CheckInSequence {
            user: records[0].user,
            records,
        })
        .collect()
}
