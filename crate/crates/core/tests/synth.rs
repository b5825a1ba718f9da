use std::collections::{BTreeMap, BTreeSet};

use stcl::ingest::{parse_checkins, LogFormat};
use stcl::synth::{generate, SynthSpec, DEFAULT_START};

/// Signed difference on the 24 h circle, in `[-12, 12)`.
fn circular_diff(a: f64, b: f64) -> f64 {
    (a - b + 12.0).rem_euclid(24.0) - 12.0
}

#[test]
fn jitter_std_within_five_percent() {
    for jitter in [0.5, 1.5] {
        let out = generate(&SynthSpec::planted(50, 4, 20, jitter, 0.0, 50, 3)).unwrap();
        let diffs: Vec<f64> = out
            .labels
            .sequences
            .iter()
            .flat_map(|s| s.events.iter().map(|e| circular_diff(e.observed_hour, e.intended_hour)))
            .collect();
        assert!(diffs.len() >= 10_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / jitter - 1.0).abs() < 0.05, "jitter {jitter}: empirical std {std}");
    }
}

#[test]
fn zero_jitter_and_noise_hit_intended_hours() {
    let out = generate(&SynthSpec::planted(5, 4, 8, 0.0, 0.0, 10, 1)).unwrap();
    for (seq, label) in out.sequences.iter().zip(&out.labels.sequences) {
        let day_start = DEFAULT_START + 86_400 * label.day as i64;
        for (r, e) in seq.records.iter().zip(&label.events) {
            assert_eq!(e.observed_hour, e.intended_hour);
            assert!(!e.noisy);
            assert_eq!(r.t - day_start, (e.intended_hour * 3600.0).round() as i64);
        }
    }
}

#[test]
fn noise_rate_is_respected() {
    let out = generate(&SynthSpec::planted(50, 4, 20, 0.5, 0.1, 50, 4)).unwrap();
    let events: Vec<bool> = out.labels.sequences.iter().flat_map(|s| s.events.iter().map(|e| e.noisy)).collect();
    let n = events.len() as f64;
    let rate = events.iter().filter(|&&x| x).count() as f64 / n;
    let se = (0.1 * 0.9 / n).sqrt();
    assert!((rate - 0.1).abs() < 4.0 * se, "noise rate {rate}");
}

#[test]
fn deterministic_under_seed() {
    let spec = SynthSpec::planted(8, 3, 9, 0.7, 0.2, 9, 12);
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.sequences, b.sequences);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.friendships, b.friendships);
    let c = generate(&SynthSpec { seed: 13, ..spec }).unwrap();
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn sequences_follow_their_day_type_topic() {
    let out = generate(&SynthSpec::planted(12, 4, 20, 1.0, 0.1, 14, 5)).unwrap();
    let labels = &out.labels;
    let mut by_topic: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for p in &labels.pois {
        by_topic.entry(p.topic).or_default().insert(p.id);
    }
    let all: Vec<&BTreeSet<u64>> = by_topic.values().collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            assert!(a.is_disjoint(b));
        }
    }
    for (seq, label) in out.sequences.iter().zip(&labels.sequences) {
        let expected = if label.weekend {
            labels.weekend_topics[label.user as usize]
        } else {
            labels.weekday_topics[label.user as usize]
        };
        assert_eq!(label.topic, expected);
        assert_eq!(label.weekend, label.day % 7 >= 5);
        assert_eq!(seq.records.len(), 4);
        assert!(seq.records.iter().all(|r| by_topic[&label.topic].contains(&r.lid)));
        assert!(seq.records.windows(2).all(|w| w[0].t <= w[1].t));
    }
    for &(a, b) in &out.friendships {
        assert_eq!(labels.weekday_topics[a as usize], labels.weekday_topics[b as usize]);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SynthSpec::planted(3, 2, 8, 0.5, 0.0, 3, 1);
    spec.topics[0].activities[0].jitter_std_hours = -1.0;
    assert!(generate(&spec).is_err());
    let mut spec = SynthSpec::planted(3, 2, 8, 0.5, 0.0, 3, 1);
    spec.topics[1].center = spec.topics[0].center;
    assert!(generate(&spec).is_err());
    let mut spec = SynthSpec::planted(3, 2, 8, 0.5, 0.0, 3, 1);
    spec.noise_rate = 1.5;
    assert!(generate(&spec).is_err());
}

#[test]
fn written_corpus_parses_back() {
    let out = generate(&SynthSpec::planted(4, 2, 8, 0.5, 0.1, 5, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let report = parse_checkins(&dir.path().join("checkins.tsv"), &LogFormat::Gowalla).unwrap();
    assert_eq!(report.warnings(), 0);
    let original: Vec<_> = out.records().collect();
    assert_eq!(report.records.len(), original.len());
    for (a, b) in report.records.iter().zip(original) {
        assert_eq!((a.user, a.lid, a.t, &a.cat), (b.user, b.lid, b.t, &b.cat));
        assert!((a.lat - b.lat).abs() < 1e-6 && (a.lon - b.lon).abs() < 1e-6);
    }
    let labels: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["sequences"].as_array().unwrap().len(), 20);
}
