//! Shared helpers for the integration suites: scalar reference
//! implementations written directly from the loss definitions, a
//! central-difference gradient checker, and synthetic corpora.
#![allow(dead_code)]

use std::f64::consts::PI;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stcl::encoders::ModelConfig;
use stcl::ingest::{build_bundle, BundleConfig, DatasetBundle};
use stcl::synth::{generate, SynthOutput, SynthSpec};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    let w = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(rows.concat(), (rows.len(), w), &candle_core::Device::Cpu).unwrap()
}

pub fn var(rows: &Rows) -> Var {
    Var::from_tensor(&tensor(rows)).unwrap()
}

pub fn rows_of(t: &Tensor) -> Rows {
    t.to_vec2::<f64>().unwrap()
}

// ---- scalar reference implementations ----

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn assign_ref(z: &[f64], protos: &Rows, tau: f64) -> Vec<f64> {
    let e: Vec<f64> = protos.iter().map(|c| (cosine(z, c) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn consistency_ref(zn: &[f64], zm: &[f64], protos: &Rows, tau: f64) -> f64 {
    let qn = assign_ref(zn, protos, tau);
    let qm = assign_ref(zm, protos, tau);
    let ce = |p: &[f64], q: &[f64]| -> f64 { -p.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>() };
    ce(&qn, &qm) + ce(&qm, &qn)
}

/// One anchor of the reweighted contrast. `negatives` are `(z, q)` pairs;
/// the positive is `zm`.
pub fn reweighted_anchor_ref(zn: &[f64], zm: &[f64], qn: &[f64], negatives: &[(Vec<f64>, Vec<f64>)], tau: f64) -> f64 {
    let top = argmax(qn);
    let s: Vec<&(Vec<f64>, Vec<f64>)> = negatives.iter().filter(|(_, q)| argmax(q) != top).collect();
    if s.is_empty() {
        return 0.0;
    }
    let d: Vec<f64> = s.iter().map(|(_, q)| 1.0 - cosine(qn, q)).collect();
    let mu = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d.len() as f64;
    let w: Vec<f64> = if var == 0.0 {
        vec![1.0; d.len()]
    } else {
        d.iter().map(|x| (-(x - mu).powi(2) / (2.0 * var)).exp()).collect()
    };
    let m = 2.0 * s.len() as f64 / w.iter().sum::<f64>();
    let phi = |a: &[f64], b: &[f64]| (cosine(a, b) / tau).exp();
    let pos = phi(zn, zm);
    let neg: f64 = s.iter().zip(&w).map(|((z, _), w)| w * phi(zn, z)).sum();
    -(pos / (pos + m * neg)).ln()
}

/// Per-anchor reweighted contrast over a batch plus a queue of `(z, q)`.
pub fn reweighted_ref(zn: &Rows, zm: &Rows, queue: &[(Vec<f64>, Vec<f64>)], protos: &Rows, tau: f64) -> Vec<f64> {
    (0..zn.len())
        .map(|n| {
            let qn = assign_ref(&zn[n], protos, tau);
            let mut negs: Vec<(Vec<f64>, Vec<f64>)> = (0..zm.len())
                .filter(|&j| j != n)
                .map(|j| (zm[j].clone(), assign_ref(&zm[j], protos, tau)))
                .collect();
            negs.extend(queue.iter().cloned());
            reweighted_anchor_ref(&zn[n], &zm[n], &qn, &negs, tau)
        })
        .collect()
}

pub fn nt_xent_ref(anchor: &Rows, positive: &Rows, extra: &Rows, tau: f64) -> Vec<f64> {
    (0..anchor.len())
        .map(|n| {
            let num = (cosine(&anchor[n], &positive[n]) / tau).exp();
            let den: f64 = positive
                .iter()
                .chain(extra.iter())
                .map(|x| (cosine(&anchor[n], x) / tau).exp())
                .sum();
            -(num / den).ln()
        })
        .collect()
}

pub fn tam_ref(anchor: &Rows, positive: &Rows, extra: &Rows, margin: f64, tau: f64) -> Vec<f64> {
    (0..anchor.len())
        .map(|n| {
            let theta = cosine(&anchor[n], &positive[n]).clamp(-1.0, 1.0).acos();
            let num = ((theta + margin).min(PI).cos() / tau).exp();
            let others: f64 = positive
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != n)
                .map(|(_, x)| x)
                .chain(extra.iter())
                .map(|x| (cosine(&anchor[n], x) / tau).exp())
                .sum();
            -(num / (num + others)).ln()
        })
        .collect()
}

pub fn cross_view_ref(s: &Rows, t: &Rows, tau: f64) -> f64 {
    let b = s.len();
    let sim = |i: usize, j: usize| cosine(&s[i], &t[j]) / tau;
    let mut s2t = 0.0;
    let mut t2s = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..b).map(|j| sim(j, i).exp()).sum();
        s2t += -(sim(i, i).exp() / row).ln();
        t2s += -(sim(i, i).exp() / col).ln();
    }
    0.5 * (s2t / b as f64 + t2s / b as f64)
}

pub fn lognormal_mixture_ref(tau: f64, w: &[f64], mu: &[f64], s: &[f64]) -> f64 {
    (0..w.len())
        .map(|k| w[k] / (tau * s[k] * (2.0 * PI).sqrt()) * (-(tau.ln() - mu[k]).powi(2) / (2.0 * s[k] * s[k])).exp())
        .sum()
}

// ---- finite differences ----

/// Largest relative error between analytic gradients of `f` with respect to
/// `vars` and central differences. At most `max_elems` entries per variable
/// are probed, spread evenly.
pub fn max_grad_error(vars: &[&Var], f: &dyn Fn() -> Tensor, max_elems: usize) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-5;
    let grads = f().backward().unwrap();
    let mut worst: f64 = 0.0;
    for v in vars {
        let n = v.elem_count();
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; n],
        };
        let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = v.dims().to_vec();
        let stride = n.div_ceil(max_elems).max(1);
        for i in (0..n).step_by(stride) {
            let eval = |x: f64| {
                let mut p = base.clone();
                p[i] = x;
                v.set(&Tensor::from_vec(p, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(base[i] + H) - eval(base[i] - H)) / (2.0 * H);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(FLOOR);
            worst = worst.max(err);
        }
        v.set(&Tensor::from_vec(base, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
    }
    worst
}

// ---- synthetic corpora ----

pub const SYNTH_DAYS: usize = 14;

pub fn planted_corpus(users: usize, jitter: f64, noise: f64, seed: u64) -> (DatasetBundle, SynthOutput) {
    planted_corpus_days(users, SYNTH_DAYS, jitter, noise, seed)
}

/// 4 topics with 20 POIs each.
pub fn planted_corpus_days(
    users: usize,
    days: usize,
    jitter: f64,
    noise: f64,
    seed: u64,
) -> (DatasetBundle, SynthOutput) {
    let out = generate(&SynthSpec::planted(users, 4, 20, jitter, noise, days, seed)).unwrap();
    let bundle = build_bundle(out.sequences.clone(), Some(&out.friendships), &BundleConfig::default()).unwrap();
    (bundle, out)
}

/// Planted topic of each sequence in `seqs` (bundle-encoded).
pub fn topic_truth(bundle: &DatasetBundle, out: &SynthOutput, seqs: &[stcl::ingest::CheckInSequence]) -> Vec<usize> {
    let days = out.labels.sequences.len() / out.labels.weekday_topics.len();
    seqs.iter()
        .map(|s| {
            let day = ((s.start_time() - stcl::synth::DEFAULT_START) / 86_400) as usize;
            let user = bundle.vocab.users[s.user as usize] as usize;
            out.labels.sequences[user * days + day].topic
        })
        .collect()
}

/// Fraction of items whose cluster's majority label equals their own label.
pub fn purity(clusters: &[usize], truth: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *counts.entry((c, t)).or_default() += 1;
    }
    let mut best = std::collections::BTreeMap::<usize, usize>::new();
    for ((c, _), n) in counts {
        let b = best.entry(c).or_default();
        *b = (*b).max(n);
    }
    best.values().sum::<usize>() as f64 / clusters.len() as f64
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden_dim: 5,
        user_dim: 3,
        projection_dim: 4,
        num_prototypes: 3,
        category_dim: 3,
        geohash_bits: 10,
        ..Default::default()
    }
}

pub fn small_model(prototypes: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        hidden_dim: 32,
        user_dim: 16,
        projection_dim: 32,
        num_prototypes: prototypes,
        category_dim: 16,
        ..Default::default()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
