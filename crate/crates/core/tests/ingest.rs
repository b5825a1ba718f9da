use std::collections::BTreeMap;

use proptest::prelude::*;
use stcl::ingest::{
    build_bundle, filter_and_segment, load_bundle, parse_reader, save_bundle, BundleConfig, CheckInRecord,
    CheckInSequence, FilterConfig, LogFormat, UNK_LOCATION,
};

fn record(user: u64, lid: u64, t: i64) -> CheckInRecord {
    CheckInRecord {
        user,
        lid,
        lon: -73.9 + lid as f64 * 1e-3,
        lat: 40.7,
        t,
        cat: format!("c{}", lid % 3),
    }
}

/// Three users, two check-ins per day for 20 days over 4 locations.
fn daily_sequences() -> Vec<CheckInSequence> {
    let mut out = Vec::new();
    for user in [7u64, 3, 11] {
        for day in 0..20i64 {
            let t0 = 1_700_000_000 + day * 86_400 + user as i64 * 60;
            let lid = (user + day as u64) % 4;
            out.push(CheckInSequence::new(vec![record(user, lid, t0), record(user, lid + 1, t0 + 3_600)]).unwrap());
        }
    }
    out
}

#[test]
fn splits_are_chronological_six_two_two_per_user() {
    let bundle = build_bundle(daily_sequences(), None, &BundleConfig::default()).unwrap();
    assert_eq!((bundle.train.len(), bundle.val.len(), bundle.test.len()), (36, 12, 12));
    let mut last_train: BTreeMap<u64, i64> = BTreeMap::new();
    for s in &bundle.train {
        let e = last_train.entry(s.user).or_insert(i64::MIN);
        *e = (*e).max(s.start_time());
    }
    let first_val: BTreeMap<u64, i64> = bundle.val.iter().fold(BTreeMap::new(), |mut m, s| {
        let e = m.entry(s.user).or_insert(i64::MAX);
        *e = (*e).min(s.start_time());
        m
    });
    for (u, t) in &first_val {
        assert!(last_train[u] < *t);
    }
    for s in bundle.val.iter().chain(&bundle.test) {
        let val_end = bundle.val.iter().filter(|v| v.user == s.user).map(|v| v.start_time()).max().unwrap();
        if bundle.test.contains(s) {
            assert!(s.start_time() > val_end);
        }
    }
    assert_eq!(bundle.vocab.users, vec![3, 7, 11]);
}

#[test]
fn unseen_locations_map_to_unk() {
    let mut seqs = daily_sequences();
    // The last day of user 3 goes somewhere new.
    let last = seqs.iter_mut().filter(|s| s.user == 3).last().unwrap();
    last.records[1].lid = 999;
    let bundle = build_bundle(seqs, None, &BundleConfig::default()).unwrap();
    assert!(bundle.vocab.locations.iter().all(|l| *l != Some(999)));
    let user = bundle.vocab.users.iter().position(|&u| u == 3).unwrap() as u64;
    let last = bundle.test.iter().filter(|s| s.user == user).last().unwrap();
    assert_eq!(last.records[1].lid, UNK_LOCATION);
    assert!(bundle.warnings.iter().any(|w| w.contains("UNK")));
}

#[test]
fn saved_bundle_loads_back_identically() {
    let bundle = build_bundle(daily_sequences(), Some(&[(3, 7), (7, 11), (3, 42)]), &BundleConfig::default()).unwrap();
    assert_eq!(bundle.social.num_edges(), 2);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded, bundle);
}

#[test]
fn parser_counts_bad_lines() {
    let text = "1\t2024-01-01T10:00:00Z\t40.7\t-73.9\t5\tCafe\n\
                2\tnot a time\t40.7\t-73.9\t5\tCafe\n\
                3\t2024-01-01T10:00:00Z\t95.0\t-73.9\t5\tCafe\n\
                \n\
                alice\t1704103200\t40.7\t-73.9\tvenue-x\n\
                1\t2024-01-01 09:00:00\t40.7\t-73.9\t6\tBar\n";
    let report = parse_reader(text.as_bytes(), &LogFormat::Gowalla).unwrap();
    assert_eq!(report.malformed, 1);
    assert_eq!(report.rejected_coordinates, 1);
    assert_eq!(report.records.len(), 3);
    // Sorted by user then time.
    assert_eq!(report.records[0].lid, 6);
    assert_eq!(report.records[1].lid, 5);
    assert_eq!(report.interned_ids.len(), 2);
    assert_eq!(report.records[2].cat, "");

    let weeplace = "userid,placeid,datetime,lat,lon,city,category\n\
                    u1,p1,2024-01-01T10:00:00,40.7,-73.9,NYC,\"Food, Cafe\"\n";
    let report = parse_reader(weeplace.as_bytes(), &LogFormat::Weeplace).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].cat, "Food, Cafe");
}

fn records_strategy() -> impl Strategy<Value = Vec<CheckInRecord>> {
    proptest::collection::vec((0u64..5, 0u64..8, 0i64..200), 0..300).prop_map(|v| {
        v.into_iter()
            .map(|(user, lid, hour)| record(user, lid, hour * 3_600 + user as i64))
            .collect()
    })
}

proptest! {
    #[test]
    fn filtering_is_a_fixed_point(records in records_strategy(), min_user in 1usize..12, min_loc in 1usize..12, gap in 1.0f64..30.0) {
        let cfg = FilterConfig { min_user_records: min_user, min_loc_visits: min_loc, history_days: Some(6.0), gap_hours: gap };
        let seqs = filter_and_segment(&records, &cfg);
        let flat: Vec<CheckInRecord> = seqs.iter().flat_map(|s| s.records.clone()).collect();
        prop_assert_eq!(filter_and_segment(&flat, &cfg), seqs.clone());

        let mut per_user: BTreeMap<u64, usize> = BTreeMap::new();
        let mut per_loc: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &flat {
            *per_user.entry(r.user).or_default() += 1;
            *per_loc.entry(r.lid).or_default() += 1;
        }
        prop_assert!(per_user.values().all(|&n| n >= min_user));
        prop_assert!(per_loc.values().all(|&n| n >= min_loc));
        for s in &seqs {
            prop_assert!(s.len() >= 2);
            prop_assert!(s.records.iter().all(|r| r.user == s.user));
            prop_assert!(s.records.windows(2).all(|w| w[0].t <= w[1].t && (w[1].t - w[0].t) as f64 <= gap * 3600.0));
        }
        let latest: BTreeMap<u64, i64> = flat.iter().fold(BTreeMap::new(), |mut m, r| {
            let e = m.entry(r.user).or_insert(r.t);
            *e = (*e).max(r.t);
            m
        });
        prop_assert!(flat.iter().all(|r| r.t >= latest[&r.user] - 6 * 86_400));
    }
}

#[test]
fn sequences_need_two_records() {
    assert!(CheckInSequence::new(vec![record(1, 1, 0)]).is_err());
    let short = CheckInSequence {
        user: 1,
        records: vec![record(1, 1, 0)],
    };
    assert!(build_bundle(vec![short], None, &BundleConfig::default()).is_err());
}
