//! On-disk bundle layout:
//!
//! ```text
//! <dir>/manifest.json   vocabularies, social edges, log Δt statistics, config
//! <dir>/train.csv       seq,user,lid,t,lat,lon,cat   (integer-encoded rows)
//! <dir>/val.csv
//! <dir>/test.csv
//! ```
//!
//! `cat` is an index into the manifest's category vocabulary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BundleConfig, CheckInRecord, CheckInSequence, DatasetBundle, SocialGraph, Vocabulary};
use crate::{Error, Result};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub vocab: Vocabulary,
    pub social_edges: Vec<(usize, usize)>,
    pub log_dt_mean: f64,
    pub log_dt_std: f64,
    pub config: BundleConfig,
    pub counts: BundleCounts,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleCounts {
    pub users: usize,
    pub locations: usize,
    pub checkins: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    seq: usize,
    user: u64,
    lid: u64,
    t: i64,
    lat: f64,
    lon: f64,
    cat: usize,
}

impl BundleManifest {
    pub fn of(bundle: &DatasetBundle) -> Self {
        Self {
            format_version: BUNDLE_FORMAT_VERSION,
            vocab: bundle.vocab.clone(),
            social_edges: bundle.social.edges(),
            log_dt_mean: bundle.log_dt_mean,
            log_dt_std: bundle.log_dt_std,
            config: bundle.config.clone(),
            counts: BundleCounts {
                users: bundle.vocab.num_users(),
                // UNK is not a real location.
                locations: bundle.vocab.num_locations() - 1,
                checkins: bundle.num_checkins(),
                train_sequences: bundle.train.len(),
                val_sequences: bundle.val.len(),
                test_sequences: bundle.test.len(),
            },
            warnings: bundle.warnings.clone(),
        }
    }
}

fn write_split(path: &Path, seqs: &[CheckInSequence], vocab: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in seqs.iter().enumerate() {
        for r in &s.records {
            w.serialize(Row {
                seq: i,
                user: r.user,
                lid: r.lid,
                t: r.t,
                lat: r.lat,
                lon: r.lon,
                cat: vocab.category_index(&r.cat),
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_split(path: &Path, vocab: &Vocabulary) -> Result<Vec<CheckInSequence>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<CheckInSequence> = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        let cat = vocab
            .categories
            .get(row.cat)
            .cloned()
            .ok_or(Error::UnknownId {
                kind: "category",
                id: row.cat,
                size: vocab.categories.len(),
            })?;
        let record = CheckInRecord {
            user: row.user,
            lid: row.lid,
            lon: row.lon,
            lat: row.lat,
            t: row.t,
            cat,
        };
        if row.seq == out.len() {
            out.push(CheckInSequence {
                user: row.user,
                records: Vec::new(),
            });
        } else if row.seq + 1 != out.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: sequence ids must be contiguous, saw {}",
                path.display(),
                row.seq
            )));
        }
        out.last_mut().unwrap().records.push(record);
    }
    out.into_iter().map(|s| CheckInSequence::new(s.records)).collect()
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = BundleManifest::of(bundle);
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    write_split(&dir.join("train.csv"), &bundle.train, &bundle.vocab)?;
    write_split(&dir.join("val.csv"), &bundle.val, &bundle.vocab)?;
    write_split(&dir.join("test.csv"), &bundle.test, &bundle.vocab)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported bundle format version {}",
            manifest.format_version
        )));
    }
    let vocab = manifest.vocab;
    Ok(DatasetBundle {
        train: read_split(&dir.join("train.csv"), &vocab)?,
        val: read_split(&dir.join("val.csv"), &vocab)?,
        test: read_split(&dir.join("test.csv"), &vocab)?,
        social: SocialGraph::from_edges(vocab.num_users(), manifest.social_edges),
        vocab,
        log_dt_mean: manifest.log_dt_mean,
        log_dt_std: manifest.log_dt_std,
        config: manifest.config,
        warnings: manifest.warnings,
    })
}
