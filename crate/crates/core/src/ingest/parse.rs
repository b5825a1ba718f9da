use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::CheckInRecord;
use crate::geocode::validate_coordinate;
use crate::{Error, Result};

/// Column layout of a delimited check-in log (0-based column indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub delimiter: char,
    pub has_header: bool,
    pub user: usize,
    pub time: usize,
    pub lat: usize,
    pub lon: usize,
    pub lid: usize,
    #[serde(default)]
    pub cat: Option<usize>,
}

/// Supported raw log layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LogFormat {
    /// `user \t time \t lat \t lon \t lid [\t category]`, no header.
    Gowalla,
    /// `userid,placeid,datetime,lat,lon,city,category` with a header row.
    Weeplace,
    GenericCsv(ColumnMapping),
}

impl LogFormat {
    pub fn mapping(&self) -> ColumnMapping {
        match self {
            LogFormat::Gowalla => ColumnMapping {
                delimiter: '\t',
                has_header: false,
                user: 0,
                time: 1,
                lat: 2,
                lon: 3,
                lid: 4,
                cat: Some(5),
            },
            LogFormat::Weeplace => ColumnMapping {
                delimiter: ',',
                has_header: true,
                user: 0,
                lid: 1,
                time: 2,
                lat: 3,
                lon: 4,
                cat: Some(6),
            },
            LogFormat::GenericCsv(m) => m.clone(),
        }
    }
}

/// Parsed records plus line-level diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    /// Sorted by (user, t); ties keep file order.
    pub records: Vec<CheckInRecord>,
    /// Lines that could not be parsed at all.
    pub malformed: usize,
    /// Lines rejected because a coordinate fell outside its range.
    pub rejected_coordinates: usize,
    /// Non-numeric raw ids and the integer ids they were given.
    pub interned_ids: Vec<(String, u64)>,
}

impl ParseReport {
    pub fn warnings(&self) -> usize {
        self.malformed + self.rejected_coordinates
    }
}

const INTERNED_ID_BASE: u64 = 1 << 62;

#[derive(Default)]
struct IdInterner {
    ids: HashMap<String, u64>,
    order: Vec<(String, u64)>,
}

impl IdInterner {
    /// Numeric ids map to themselves; anything else gets a stable id in
    /// first-seen order above [`INTERNED_ID_BASE`].
    fn id(&mut self, raw: &str) -> u64 {
        let raw = raw.trim();
        if let Ok(v) = raw.parse::<u64>() {
            return v;
        }
        if let Some(&id) = self.ids.get(raw) {
            return id;
        }
        let id = INTERNED_ID_BASE + self.order.len() as u64;
        self.ids.insert(raw.to_string(), id);
        self.order.push((raw.to_string(), id));
        id
    }
}

/// Accepts RFC 3339, naive ISO date-times (taken as UTC) and epoch seconds.
fn parse_time(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%SZ"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    raw.parse::<i64>().ok()
}

pub fn parse_checkins(path: &Path, format: &LogFormat) -> Result<ParseReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, format)
}

pub fn parse_reader<R: Read>(reader: R, format: &LogFormat) -> Result<ParseReport> {
    let mapping = format.mapping();
    let delimiter = u8::try_from(mapping.delimiter)
        .map_err(|_| Error::Config(format!("non-ASCII delimiter {:?}", mapping.delimiter)))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(mapping.has_header)
        .flexible(true)
        .quoting(delimiter != b'\t')
        .from_reader(reader);

    let mut report = ParseReport::default();
    let mut interner = IdInterner::default();
    for (line, row) in rdr.records().enumerate() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(e.into());
                }
                log::warn!("line {}: {e}", line + 1);
                report.malformed += 1;
                continue;
            }
        };
        if row.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let field = |i: usize| row.get(i).map(str::trim);
        let parsed = (|| {
            let user = field(mapping.user).filter(|s| !s.is_empty())?;
            let lid = field(mapping.lid).filter(|s| !s.is_empty())?;
            let t = parse_time(field(mapping.time)?)?;
            let lat: f64 = field(mapping.lat)?.parse().ok()?;
            let lon: f64 = field(mapping.lon)?.parse().ok()?;
            let cat = mapping
                .cat
                .and_then(|i| field(i))
                .unwrap_or_default()
                .to_string();
            Some((user.to_string(), lid.to_string(), t, lat, lon, cat))
        })();
        let Some((user, lid, t, lat, lon, cat)) = parsed else {
            log::warn!("line {}: malformed check-in", line + 1);
            report.malformed += 1;
            continue;
        };
        if validate_coordinate(lat, lon).is_err() {
            log::warn!("line {}: coordinate out of range ({lat}, {lon})", line + 1);
            report.rejected_coordinates += 1;
            continue;
        }
        report.records.push(CheckInRecord {
            user: interner.id(&user),
            lid: interner.id(&lid),
            lon,
            lat,
            t,
            cat,
        });
    }
    report.records.sort_by_key(|r| (r.user, r.t));
    report.interned_ids = interner.order;
    Ok(report)
}

/// Reads a two-column whitespace/tab separated friendship list.
pub fn read_edge_list(path: &Path) -> Result<Vec<(u64, u64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut interner = IdInterner::default();
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next()) {
            (Some(a), Some(b)) => edges.push((interner.id(a), interner.id(b))),
            (None, _) => {}
            _ => log::warn!("edge list line {}: expected two columns", i + 1),
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, format: LogFormat) -> ParseReport {
        parse_reader(text.as_bytes(), &format).unwrap()
    }

    #[test]
    fn gowalla_line_maps_fields() {
        let r = parse("42\t2010-10-19T23:55:27Z\t40.7359\t-73.9905\t16442\tfood\n", LogFormat::Gowalla);
        assert_eq!(r.warnings(), 0);
        assert_eq!(
            r.records,
            vec![CheckInRecord {
                user: 42,
                t: 1287532527,
                lat: 40.7359,
                lon: -73.9905,
                lid: 16442,
                cat: "food".into(),
            }]
        );
    }

    #[test]
    fn out_of_range_latitude_is_rejected() {
        let r = parse("42\t2010-10-19T23:55:27Z\t95.0\t-73.9905\t16442\n", LogFormat::Gowalla);
        assert!(r.records.is_empty());
        assert_eq!(r.rejected_coordinates, 1);
        assert_eq!(r.warnings(), 1);
    }

    #[test]
    fn empty_input() {
        let r = parse("", LogFormat::Gowalla);
        assert!(r.records.is_empty());
        assert_eq!(r.warnings(), 0);
    }

    #[test]
    fn malformed_lines_are_counted() {
        let text = "1\tnot-a-time\t1\t1\t5\n2\t2010-10-19T23:55:27Z\t1.0\n3\t2010-10-19T23:55:27Z\t1\t1\t7\n";
        let r = parse(text, LogFormat::Gowalla);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.malformed, 2);
    }

    #[test]
    fn sorted_by_user_then_time() {
        let text = "2\t2010-10-19T10:00:00Z\t1\t1\t5\n1\t2010-10-19T12:00:00Z\t1\t1\t5\n1\t2010-10-19T11:00:00Z\t1\t1\t6\n";
        let r = parse(text, LogFormat::Gowalla);
        let keys: Vec<_> = r.records.iter().map(|r| (r.user, r.lid)).collect();
        assert_eq!(keys, vec![(1, 6), (1, 5), (2, 5)]);
    }

    #[test]
    fn weeplace_with_string_ids() {
        let text = "userid,placeid,datetime,lat,lon,city,category\n\
                    alice,joes-diner,2010-10-19T23:55:27,40.7,-73.9,New York,\"Food, Diner\"\n\
                    alice,central-park,2010-10-20T10:00:00,40.78,-73.96,New York,Parks\n";
        let r = parse(text, LogFormat::Weeplace);
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.records[0].cat, "Food, Diner");
        assert_eq!(r.records[0].user, r.records[1].user);
        assert_ne!(r.records[0].lid, r.records[1].lid);
        assert_eq!(r.interned_ids.len(), 3);
    }

    #[test]
    fn generic_mapping_and_epoch_times() {
        let mapping = ColumnMapping {
            delimiter: ';',
            has_header: true,
            user: 1,
            time: 0,
            lat: 3,
            lon: 4,
            lid: 2,
            cat: None,
        };
        let text = "ts;uid;poi;lat;lon\n1287532527;7;99;10.5;20.25\n";
        let r = parse(text, LogFormat::GenericCsv(mapping));
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].t, 1287532527);
        assert_eq!(r.records[0].user, 7);
        assert_eq!(r.records[0].cat, "");
    }
}
