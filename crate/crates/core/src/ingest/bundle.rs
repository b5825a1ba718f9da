use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{CheckInRecord, CheckInSequence, FilterConfig};
use crate::{Error, Result};

/// Location index reserved for locations never seen in the train split.
pub const UNK_LOCATION: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Index ↔ raw-id tables, built from the train split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Raw user id per user index.
    pub users: Vec<u64>,
    /// Raw location id per location index; index 0 is the UNK slot.
    pub locations: Vec<Option<u64>>,
    /// Category text per category index; index 0 is the empty category.
    pub categories: Vec<String>,
}

impl Vocabulary {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn category_index(&self, text: &str) -> usize {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(text))
            .ok()
            .filter(|&i| i > 0 || text.is_empty())
            .unwrap_or(0)
    }
}

/// Undirected user graph without self-loops.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SocialGraph {
    adjacency: Vec<Vec<usize>>,
}

impl SocialGraph {
    /// Builds a symmetric graph, dropping self-loops, duplicates and
    /// endpoints outside `0..num_nodes`.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a != b && a < num_nodes && b < num_nodes {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self { adjacency }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// Each undirected edge once, as (low, high).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, list)| list.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    /// Users sharing at least this many distinct train locations are linked
    /// when no friendship edges are supplied.
    pub colocation_min_shared: usize,
    /// Dataset-level offset from UTC to local civic time.
    pub tz_offset_hours: f64,
    /// Filtering parameters, recorded in the manifest.
    pub filter: FilterConfig,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            colocation_min_shared: 3,
            tz_offset_hours: 0.0,
            filter: FilterConfig::default(),
        }
    }
}

/// Chronological splits plus everything needed to featurize them.
/// Records inside the splits carry vocabulary indices, not raw ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Vec<CheckInSequence>,
    pub val: Vec<CheckInSequence>,
    pub test: Vec<CheckInSequence>,
    pub vocab: Vocabulary,
    pub social: SocialGraph,
    /// Mean of log inter-event seconds over the train split.
    pub log_dt_mean: f64,
    /// Standard deviation of log inter-event seconds over the train split.
    pub log_dt_std: f64,
    pub config: BundleConfig,
    pub warnings: Vec<String>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[CheckInSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_checkins(&self) -> usize {
        [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|s| s.iter())
            .map(|s| s.len())
            .sum()
    }

    /// Standardizes an inter-event time: (log Δt − mean) / std.
    pub fn standardize_dt(&self, dt_seconds: f64) -> f64 {
        (dt_seconds.max(1.0).ln() - self.log_dt_mean) / self.log_dt_std
    }
}

fn log_dt_stats(train: &[CheckInSequence], warnings: &mut Vec<String>) -> (f64, f64) {
    let dts = train
        .iter()
        .flat_map(|s| s.records.windows(2).map(|w| (w[1].t - w[0].t) as f64));
    log_moments(dts, warnings)
}

/// Mean and population std of log Δt over the positive Δt values.
fn log_moments(dts: impl Iterator<Item = f64>, warnings: &mut Vec<String>) -> (f64, f64) {
    let logs: Vec<f64> = dts.filter(|&dt| dt > 0.0).map(f64::ln).collect();
    if logs.is_empty() {
        warnings.push("no positive inter-event times in train split; using mean 0, std 1".into());
        return (0.0, 1.0);
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Rounding can leave a tiny positive std for constant data.
    if !std.is_finite() || std <= 1e-12 * mean.abs().max(1.0) {
        warnings.push(format!("degenerate log inter-event std {std}; substituting 1"));
        return (mean, 1.0);
    }
    (mean, std)
}

fn colocation_edges(train: &[CheckInSequence], min_shared: usize) -> Vec<(usize, usize)> {
    let mut visitors: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
    for seq in train {
        for r in &seq.records {
            if r.lid != UNK_LOCATION {
                visitors.entry(r.lid).or_default().insert(r.user as usize);
            }
        }
    }
    let mut shared: HashMap<(usize, usize), usize> = HashMap::new();
    for users in visitors.values() {
        let users: Vec<usize> = users.iter().copied().collect();
        for (i, &a) in users.iter().enumerate() {
            for &b in &users[i + 1..] {
                *shared.entry((a, b)).or_default() += 1;
            }
        }
    }
    let mut edges: Vec<_> = shared
        .into_iter()
        .filter(|&(_, n)| n >= min_shared.max(1))
        .map(|(e, _)| e)
        .collect();
    edges.sort_unstable();
    edges
}

/// Splits sequences 6:2:2 per user chronologically, builds train-only
/// vocabularies, re-encodes records to indices and assembles the social graph.
///
/// `social_edges` holds raw user-id pairs; edges touching users outside the
/// vocabulary are ignored.
pub fn build_bundle(
    sequences: Vec<CheckInSequence>,
    social_edges: Option<&[(u64, u64)]>,
    cfg: &BundleConfig,
) -> Result<DatasetBundle> {
    let mut warnings = Vec::new();
    let usable: Vec<CheckInSequence> = sequences.into_iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config(
            "no check-in sequence with at least 2 records; nothing to split".into(),
        ));
    }

    let mut per_user: BTreeMap<u64, Vec<CheckInSequence>> = BTreeMap::new();
    for seq in usable {
        per_user.entry(seq.user).or_default().push(seq);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut seqs) in per_user {
        seqs.sort_by_key(|s| s.start_time());
        let n = seqs.len();
        let n_eval = n / 5;
        let n_train = n - 2 * n_eval;
        let mut it = seqs.into_iter();
        train.extend(it.by_ref().take(n_train));
        val.extend(it.by_ref().take(n_eval));
        test.extend(it);
    }

    let users: Vec<u64> = train.iter().map(|s| s.user).collect::<BTreeSet<_>>().into_iter().collect();
    let raw_locations: BTreeSet<u64> = train.iter().flat_map(|s| s.records.iter().map(|r| r.lid)).collect();
    let raw_categories: BTreeSet<String> = train
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.cat.clone()))
        .filter(|c| !c.is_empty())
        .collect();

    let user_index: HashMap<u64, u64> = users.iter().enumerate().map(|(i, &u)| (u, i as u64)).collect();
    let loc_index: HashMap<u64, u64> = raw_locations
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as u64 + 1))
        .collect();
    let mut categories = vec![String::new()];
    categories.extend(raw_categories);
    let vocab = Vocabulary {
        users,
        locations: std::iter::once(None).chain(raw_locations.iter().map(|&l| Some(l))).collect(),
        categories,
    };

    let mut unk_hits = 0usize;
    let encode = |seqs: Vec<CheckInSequence>, unk_hits: &mut usize| -> Vec<CheckInSequence> {
        seqs.into_iter()
            .map(|s| {
                let user = user_index[&s.user];
                let records = s
                    .records
                    .into_iter()
                    .map(|r| {
                        let lid = loc_index.get(&r.lid).copied().unwrap_or_else(|| {
                            *unk_hits += 1;
                            UNK_LOCATION
                        });
                        let cat = if vocab.category_index(&r.cat) > 0 { r.cat } else { String::new() };
                        CheckInRecord { user, lid, cat, ..r }
                    })
                    .collect();
                CheckInSequence { user, records }
            })
            .collect()
    };
    let train = encode(train, &mut unk_hits);
    let val = encode(val, &mut unk_hits);
    let test = encode(test, &mut unk_hits);
    if unk_hits > 0 {
        warnings.push(format!("{unk_hits} val/test check-ins at locations unseen in train mapped to UNK"));
    }

    let (log_dt_mean, log_dt_std) = log_dt_stats(&train, &mut warnings);

    let n_users = vocab.num_users();
    let social = match social_edges {
        Some(edges) => SocialGraph::from_edges(
            n_users,
            edges.iter().filter_map(|(a, b)| {
                Some((*user_index.get(a)? as usize, *user_index.get(b)? as usize))
            }),
        ),
        None => SocialGraph::from_edges(n_users, colocation_edges(&train, cfg.colocation_min_shared)),
    };

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DatasetBundle {
        train,
        val,
        test,
        vocab,
        social,
        log_dt_mean,
        log_dt_std,
        config: cfg.clone(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: u64, start_h: i64, lids: &[u64], step_s: i64) -> CheckInSequence {
        CheckInSequence {
            user,
            records: lids
                .iter()
                .enumerate()
                .map(|(i, &lid)| CheckInRecord {
                    user,
                    lid,
                    lon: 1.0,
                    lat: 1.0,
                    t: start_h * 3600 + i as i64 * step_s,
                    cat: if lid % 2 == 0 { "even".into() } else { String::new() },
                })
                .collect(),
        }
    }

    #[test]
    fn ten_sequences_split_six_two_two_chronologically() {
        let seqs: Vec<_> = (0..10).rev().map(|d| seq(5, d * 48, &[1, 2], 600)).collect();
        let b = build_bundle(seqs, None, &BundleConfig::default()).unwrap();
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (6, 2, 2));
        let last_train = b.train.iter().map(|s| s.start_time()).max().unwrap();
        let first_val = b.val.iter().map(|s| s.start_time()).min().unwrap();
        let last_val = b.val.iter().map(|s| s.start_time()).max().unwrap();
        let first_test = b.test.iter().map(|s| s.start_time()).min().unwrap();
        assert!(last_train <= first_val && last_val <= first_test);
    }

    #[test]
    fn euler_dt_gives_unit_mean_and_substituted_std() {
        let mut warnings = Vec::new();
        let (a, b) = log_moments(std::iter::repeat(std::f64::consts::E).take(5), &mut warnings);
        assert!((a - 1.0).abs() < 1e-12);
        assert_eq!(b, 1.0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn constant_log_dt_falls_back_to_unit_std() {
        // Δt = e seconds cannot be represented with integer timestamps, so use
        // a constant Δt: the log std is zero either way.
        let seqs: Vec<_> = (0..3).map(|d| seq(1, d * 48, &[1, 2, 3], 3)).collect();
        let b = build_bundle(seqs, None, &BundleConfig::default()).unwrap();
        assert!((b.log_dt_mean - 3f64.ln()).abs() < 1e-12);
        assert_eq!(b.log_dt_std, 1.0);
        assert!(b.warnings.iter().any(|w| w.contains("degenerate")));
    }

    #[test]
    fn unseen_locations_map_to_unk() {
        let mut seqs: Vec<_> = (0..4).map(|d| seq(1, d * 48, &[1, 2], 60)).collect();
        seqs.push(seq(1, 10_000, &[77, 2], 60));
        let b = build_bundle(seqs, None, &BundleConfig::default()).unwrap();
        assert_eq!(b.test.len(), 1);
        assert_eq!(b.test[0].records[0].lid, UNK_LOCATION);
        assert_eq!(b.vocab.num_locations(), 3);
    }

    #[test]
    fn duplicate_reversed_edges_collapse() {
        let seqs = vec![seq(10, 0, &[1, 2], 60), seq(20, 0, &[3, 4], 60)];
        let edges = [(10, 20), (20, 10), (10, 10), (10, 99)];
        let b = build_bundle(seqs, Some(&edges), &BundleConfig::default()).unwrap();
        assert_eq!(b.social.edges(), vec![(0, 1)]);
        assert_eq!(b.social.neighbors(1), &[0]);
    }

    #[test]
    fn colocation_graph_needs_enough_shared_places() {
        let seqs = vec![
            seq(1, 0, &[1, 2, 3], 60),
            seq(2, 0, &[1, 2, 3], 60),
            seq(3, 0, &[1, 2, 9], 60),
        ];
        let b = build_bundle(seqs, None, &BundleConfig::default()).unwrap();
        assert_eq!(b.social.edges(), vec![(0, 1)]);
    }

    #[test]
    fn all_short_sequences_is_fatal() {
        let s = CheckInSequence {
            user: 1,
            records: seq(1, 0, &[1], 1).records,
        };
        assert!(matches!(
            build_bundle(vec![s], None, &BundleConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
