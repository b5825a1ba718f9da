//! Synthetic check-in generator with planted spatial topics and temporal
//! intentions.
//!
//! Every user has one topic for weekdays and one for weekends. Each day
//! produces one sequence: the day-type topic's activities in order, each at
//! its intended hour plus Gaussian jitter (wrapped into the same day), at a
//! POI drawn from the activity's share of the topic pool. A `noise_rate`
//! fraction of events get a uniformly random hour instead.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{CheckInRecord, CheckInSequence};
use crate::nn::seeded_rng;
use crate::{Error, Result};

/// Monday 2024-01-01 00:00:00 UTC.
pub const DEFAULT_START: i64 = 1_704_067_200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    /// Intended local hour in `[0, 24)`.
    pub hour: f64,
    pub jitter_std_hours: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    /// Centre of the topic's area (lat, lon).
    pub center: (f64, f64),
    /// Half-width of the square area, in degrees.
    pub radius_deg: f64,
    pub num_pois: usize,
    pub activities: Vec<Activity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub topics: Vec<TopicSpec>,
    /// Topic index per user for weekdays and weekends; drawn at random when empty.
    #[serde(default)]
    pub weekday_topics: Vec<usize>,
    #[serde(default)]
    pub weekend_topics: Vec<usize>,
    pub days: usize,
    /// Unix time of local midnight on the first day.
    pub start: i64,
    pub noise_rate: f64,
    /// Probability that a user goes to their own usual POI for an activity
    /// instead of a random one from the activity's pool.
    pub habit: f64,
    /// Friends per user, drawn among users sharing the weekday topic.
    pub friends: usize,
    pub seed: u64,
}

const TOPIC_TEMPLATES: [(&str, [(f64, &str); 4]); 4] = [
    ("work", [(8.5, "Office"), (12.5, "Cafeteria"), (15.0, "Coworking Space"), (18.5, "Train Station")]),
    ("dining", [(10.0, "Bakery"), (13.0, "Noodle House"), (17.0, "Tea Room"), (20.0, "Steakhouse")]),
    ("leisure", [(9.5, "Park"), (12.0, "Museum"), (16.0, "Shopping Mall"), (21.0, "Cinema")]),
    ("home", [(7.0, "Gym"), (11.0, "Supermarket"), (14.5, "Library"), (19.5, "Residential Building")]),
];

impl SynthSpec {
    /// `topics` planted topics in disjoint areas, each with four activities,
    /// sharing one jitter std.
    pub fn planted(
        users: usize,
        topics: usize,
        pois_per_topic: usize,
        jitter_std_hours: f64,
        noise_rate: f64,
        days: usize,
        seed: u64,
    ) -> Self {
        let topics = (0..topics)
            .map(|i| {
                let (name, acts) = TOPIC_TEMPLATES[i % TOPIC_TEMPLATES.len()];
                let round = i / TOPIC_TEMPLATES.len();
                TopicSpec {
                    name: if round == 0 { name.to_string() } else { format!("{name}-{round}") },
                    center: (40.0 + 0.3 * (i % 3) as f64, -74.5 + 0.3 * (i / 3) as f64),
                    radius_deg: 0.05,
                    num_pois: pois_per_topic,
                    activities: acts
                        .iter()
                        .map(|&(hour, cat)| Activity {
                            hour,
                            jitter_std_hours,
                            category: cat.to_string(),
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            users,
            topics,
            weekday_topics: Vec::new(),
            weekend_topics: Vec::new(),
            days,
            start: DEFAULT_START,
            noise_rate,
            habit: 0.5,
            friends: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.topics.is_empty() {
            return bad("synthetic spec has no topics".into());
        }
        for t in &self.topics {
            if t.num_pois == 0 {
                return bad(format!("topic {} has an empty POI pool", t.name));
            }
            if t.activities.len() < 2 {
                return bad(format!("topic {} needs at least two activities", t.name));
            }
            if t.num_pois < t.activities.len() {
                return bad(format!("topic {} has fewer POIs than activities", t.name));
            }
            for a in &t.activities {
                if !(a.jitter_std_hours >= 0.0) || !(0.0..24.0).contains(&a.hour) {
                    return bad(format!("topic {} has an invalid activity {a:?}", t.name));
                }
            }
        }
        for (i, a) in self.topics.iter().enumerate() {
            for b in &self.topics[i + 1..] {
                let gap_lat = (a.center.0 - b.center.0).abs();
                let gap_lon = (a.center.1 - b.center.1).abs();
                if gap_lat < a.radius_deg + b.radius_deg && gap_lon < a.radius_deg + b.radius_deg {
                    return bad(format!("topics {} and {} overlap", a.name, b.name));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.habit) {
            return bad("noise_rate and habit must lie in [0, 1]".into());
        }
        for list in [&self.weekday_topics, &self.weekend_topics] {
            if !list.is_empty() && (list.len() != self.users || list.iter().any(|&t| t >= self.topics.len())) {
                return bad("per-user topic lists must have one valid topic per user".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: u64,
    pub topic: usize,
    pub activity: usize,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub intended_hour: f64,
    pub observed_hour: f64,
    pub noisy: bool,
    pub poi: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLabel {
    pub user: u64,
    pub day: usize,
    pub weekend: bool,
    pub topic: usize,
    /// Aligned with the sequence's records.
    pub events: Vec<EventLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLabels {
    pub topics: Vec<String>,
    pub weekday_topics: Vec<usize>,
    pub weekend_topics: Vec<usize>,
    pub pois: Vec<Poi>,
    pub sequences: Vec<SequenceLabel>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// One sequence per user-day, in (user, day) order.
    pub sequences: Vec<CheckInSequence>,
    pub labels: SynthLabels,
    pub friendships: Vec<(u64, u64)>,
}

impl SynthOutput {
    pub fn records(&self) -> impl Iterator<Item = &CheckInRecord> {
        self.sequences.iter().flat_map(|s| s.records.iter())
    }

    /// Writes `checkins.tsv` (tab-separated, user, ISO time, lat, lon,
    /// POI, category), `edges.tsv` and `labels.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("checkins.tsv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        for r in self.records() {
            let time = chrono::DateTime::from_timestamp(r.t, 0)
                .ok_or_else(|| Error::InvalidArgument(format!("timestamp {} out of range", r.t)))?
                .format("%Y-%m-%dT%H:%M:%SZ");
            writeln!(f, "{}\t{}\t{:.6}\t{:.6}\t{}\t{}", r.user, time, r.lat, r.lon, r.lid, r.cat)
                .map_err(|e| Error::io(&path, e))?;
        }
        f.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("edges.tsv");
        let edges: String = self.friendships.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
        std::fs::write(&path, edges).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("labels.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.labels)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Timestamps are written with whole-second resolution, so generated times
/// are rounded to seconds.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let k = spec.topics.len();

    let mut pois = Vec::new();
    let mut pools: Vec<Vec<Vec<usize>>> = Vec::new();
    for (ti, t) in spec.topics.iter().enumerate() {
        let mut by_activity = vec![Vec::new(); t.activities.len()];
        for j in 0..t.num_pois {
            let activity = j % t.activities.len();
            by_activity[activity].push(pois.len());
            pois.push(Poi {
                id: pois.len() as u64,
                topic: ti,
                activity,
                lat: t.center.0 + rng.random_range(-t.radius_deg..t.radius_deg),
                lon: t.center.1 + rng.random_range(-t.radius_deg..t.radius_deg),
            });
        }
        pools.push(by_activity);
    }

    let draw_topics = |given: &Vec<usize>, rng: &mut crate::nn::Rng| -> Vec<usize> {
        if given.is_empty() {
            (0..spec.users).map(|_| rng.random_range(0..k)).collect()
        } else {
            given.clone()
        }
    };
    let weekday_topics = draw_topics(&spec.weekday_topics, &mut rng);
    let weekend_topics = draw_topics(&spec.weekend_topics, &mut rng);

    // Each user's usual POI for every (topic, activity).
    let usual: Vec<Vec<Vec<usize>>> = (0..spec.users)
        .map(|_| {
            pools
                .iter()
                .map(|acts| acts.iter().map(|pool| *pool.choose(&mut rng).unwrap()).collect())
                .collect()
        })
        .collect();

    let mut sequences = Vec::with_capacity(spec.users * spec.days);
    let mut labels = Vec::with_capacity(spec.users * spec.days);
    for user in 0..spec.users {
        for day in 0..spec.days {
            let weekend = day % 7 >= 5;
            let topic = if weekend { weekend_topics[user] } else { weekday_topics[user] };
            let t = &spec.topics[topic];
            let mut events: Vec<(f64, EventLabel)> = Vec::with_capacity(t.activities.len());
            for (ai, a) in t.activities.iter().enumerate() {
                let noisy = rng.random::<f64>() < spec.noise_rate;
                let hour = if noisy {
                    rng.random_range(0.0..24.0)
                } else {
                    let jitter = Normal::new(0.0, a.jitter_std_hours).map_err(|e| Error::Config(e.to_string()))?;
                    (a.hour + jitter.sample(&mut rng)).rem_euclid(24.0)
                };
                let poi = if rng.random::<f64>() < spec.habit {
                    usual[user][topic][ai]
                } else {
                    *pools[topic][ai].choose(&mut rng).unwrap()
                };
                events.push((
                    hour,
                    EventLabel {
                        intended_hour: a.hour,
                        observed_hour: hour,
                        noisy,
                        poi: pois[poi].id,
                    },
                ));
            }
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
            let day_start = spec.start + 86_400 * day as i64;
            let records = events
                .iter()
                .map(|(hour, e)| {
                    let p = &pois[e.poi as usize];
                    CheckInRecord {
                        user: user as u64,
                        lid: p.id,
                        lon: p.lon,
                        lat: p.lat,
                        t: day_start + (hour * 3600.0).round() as i64,
                        cat: t.activities[p.activity].category.clone(),
                    }
                })
                .collect();
            sequences.push(CheckInSequence::new(records)?);
            labels.push(SequenceLabel {
                user: user as u64,
                day,
                weekend,
                topic,
                events: events.into_iter().map(|(_, e)| e).collect(),
            });
        }
    }

    let mut friendships = Vec::new();
    for user in 0..spec.users {
        let peers: Vec<usize> = (0..spec.users)
            .filter(|&v| v != user && weekday_topics[v] == weekday_topics[user])
            .collect();
        for &v in peers.choose_multiple(&mut rng, spec.friends) {
            friendships.push((user as u64, v as u64));
        }
    }

    Ok(SynthOutput {
        sequences,
        labels: SynthLabels {
            topics: spec.topics.iter().map(|t| t.name.clone()).collect(),
            weekday_topics,
            weekend_topics,
            pois,
            sequences: labels,
        },
        friendships,
    })
}
