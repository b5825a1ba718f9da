mod common;

use candle_core::Tensor;
use common::*;
use proptest::prelude::*;
use stcl::encoders::{momentum_update, FeatureSpace, RepresentationModel, SocialBlock, UserContext};
use stcl::ingest::SocialGraph;
use stcl::nn::{seeded_rng, BiGru, ParamStore};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

fn matrix(store: &ParamStore, name: &str) -> Rows {
    rows_of(store.get(name).unwrap().as_tensor())
}

/// Dense graph attention written from the layer definition.
fn gat_ref(store: &ParamStore, graph: &SocialGraph, layers: usize) -> (Rows, Vec<Rows>) {
    let n = graph.num_nodes();
    let mut h = matrix(store, "social.user");
    let mut alphas = Vec::new();
    for l in 0..layers {
        let w = matrix(store, &format!("social.{l}.weight"));
        let a_src: Vec<f64> = matrix(store, &format!("social.{l}.a_src")).into_iter().map(|r| r[0]).collect();
        let a_dst: Vec<f64> = matrix(store, &format!("social.{l}.a_dst")).into_iter().map(|r| r[0]).collect();
        let wh: Rows = h
            .iter()
            .map(|row| (0..w[0].len()).map(|c| (0..row.len()).map(|k| row[k] * w[k][c]).sum()).collect())
            .collect();
        let mut alpha = vec![vec![0.0; n]; n];
        let mut next = vec![vec![0.0; w[0].len()]; n];
        for i in 0..n {
            let mut nbrs: Vec<usize> = graph.neighbors(i).to_vec();
            nbrs.push(i);
            let e: Vec<f64> = nbrs.iter().map(|&j| leaky(dot(&h[i], &a_src) + dot(&h[j], &a_dst))).collect();
            let z: f64 = e.iter().map(|x| x.exp()).sum();
            for (&j, ej) in nbrs.iter().zip(&e) {
                alpha[i][j] = ej.exp() / z;
            }
            for c in 0..next[i].len() {
                next[i][c] = sigmoid(nbrs.iter().map(|&j| alpha[i][j] * wh[j][c]).sum());
            }
        }
        alphas.push(alpha);
        h = next;
    }
    (h, alphas)
}

fn random_graph(seed: u64, n: usize, p: f64) -> SocialGraph {
    use rand::Rng;
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if r.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    SocialGraph::from_edges(n, edges)
}

#[test]
fn graph_attention_matches_dense_reference() {
    for seed in 0..10 {
        let graph = random_graph(seed, 7, 0.4);
        let mut store = ParamStore::new();
        let block = SocialBlock::new(&mut store, &graph, 4, 2, &mut seeded_rng(seed)).unwrap();
        // Larger embeddings so the sigmoid and LeakyReLU are exercised away
        // from their linear regions.
        let u = store.get("social.user").unwrap();
        u.set(&(u.as_tensor() * 20.0).unwrap()).unwrap();
        let (h, alphas) = gat_ref(&store, &graph, 2);
        let got = rows_of(&block.forward_all().unwrap());
        for (a, b) in got.iter().flatten().zip(h.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (l, alpha) in alphas.iter().enumerate() {
            for (i, j, a) in block.attention(l).unwrap() {
                assert!((a - alpha[i][j]).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_row_stochastic_on_neighbourhoods(seed in any::<u64>(), n in 1usize..9, p in 0.0f64..1.0) {
        let graph = random_graph(seed, n, p);
        let mut store = ParamStore::new();
        let block = SocialBlock::new(&mut store, &graph, 3, 2, &mut seeded_rng(seed)).unwrap();
        for layer in 0..2 {
            let mut sums = vec![0.0; n];
            for (i, j, a) in block.attention(layer).unwrap() {
                prop_assert!(i == j || graph.neighbors(i).contains(&j));
                prop_assert!(a > 0.0);
                sums[i] += a;
            }
            for s in sums { prop_assert!((s - 1.0).abs() < 1e-12); }
        }
    }
}

#[test]
fn isolated_user_attends_only_to_itself() {
    let graph = SocialGraph::from_edges(3, [(0, 1)]);
    let mut store = ParamStore::new();
    let block = SocialBlock::new(&mut store, &graph, 3, 1, &mut seeded_rng(1)).unwrap();
    let rows: Vec<_> = block.attention(0).unwrap().into_iter().filter(|t| t.0 == 2).collect();
    assert_eq!(rows, vec![(2, 2, 1.0)]);
    let idx = Tensor::new(&[3u32], &candle_core::Device::Cpu).unwrap();
    assert!(block.forward(&idx).is_err());
}

#[test]
fn momentum_interpolates_by_name() {
    let mut twin = ParamStore::new();
    let mut online = ParamStore::new();
    twin.insert("a", vec![1.0, 2.0], &[2]).unwrap();
    online.insert("a", vec![3.0, -2.0], &[2]).unwrap();
    online.insert("extra", vec![9.0], &[1]).unwrap();
    let read = |s: &ParamStore| s.get("a").unwrap().as_tensor().to_vec1::<f64>().unwrap();

    momentum_update(&twin, &online, 1.0).unwrap();
    assert_eq!(read(&twin), vec![1.0, 2.0]);
    momentum_update(&twin, &online, 0.5).unwrap();
    assert_eq!(read(&twin), vec![2.0, 0.0]);
    momentum_update(&twin, &online, 0.0).unwrap();
    assert_eq!(read(&twin), read(&online));

    let mut orphan = ParamStore::new();
    orphan.insert("b", vec![0.0], &[1]).unwrap();
    assert!(momentum_update(&orphan, &online, 0.5).is_err());
}

fn tiny() -> (stcl::ingest::DatasetBundle, RepresentationModel) {
    let (bundle, _) = planted_corpus(6, 0.5, 0.0, 3);
    let cfg = tiny_model();
    let space = FeatureSpace::from_bundle(&bundle, cfg.geohash_bits);
    let model = RepresentationModel::new(cfg, space, &bundle.social, 0.07, 5).unwrap();
    (bundle, model)
}

#[test]
fn twin_starts_equal_and_follows_momentum() {
    let (bundle, model) = tiny();
    let seqs: Vec<_> = bundle.train.iter().take(4).collect();
    let batch = model.batch(&seqs).unwrap();
    let online = model.encode_temporal(&batch, UserContext::Social, None).unwrap();
    let twin = model.encode_temporal_momentum(&batch, UserContext::Social).unwrap();
    assert_eq!(rows_of(&online), rows_of(&twin));

    for (name, v) in model.store().iter() {
        if name.starts_with("temporal.") {
            v.set(&(v.as_tensor() + 1.0).unwrap()).unwrap();
        }
    }
    let before = model.twin_store().flat_values().unwrap();
    model.momentum_update().unwrap();
    let after = model.twin_store().flat_values().unwrap();
    let eta = model.config.momentum;
    for (b, a) in before.iter().zip(after) {
        assert!((a - (b + (1.0 - eta))).abs() < 1e-12);
    }
}

#[test]
fn padding_and_batch_neighbours_do_not_change_a_row() {
    let (bundle, model) = tiny();
    let long = &bundle.train[0];
    let short = bundle.train[1].prefix().unwrap();
    assert!(long.len() > short.len());
    let alone = rows_of(&model.represent(&model.batch(&[&short]).unwrap(), UserContext::Social).unwrap());
    let mixed = rows_of(&model.represent(&model.batch(&[long, &short]).unwrap(), UserContext::Social).unwrap());
    for (a, b) in alone[0].iter().zip(&mixed[1]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_context_ignores_the_social_graph() {
    let (bundle, model) = tiny();
    let seqs: Vec<_> = bundle.train.iter().take(3).collect();
    let batch = model.batch(&seqs).unwrap();
    let masked = rows_of(&model.represent(&batch, UserContext::Masked).unwrap());
    let social = rows_of(&model.represent(&batch, UserContext::Social).unwrap());
    let u = model.store().get("social.user").unwrap();
    u.set(&(u.as_tensor() * 3.0).unwrap()).unwrap();
    assert_eq!(masked, rows_of(&model.represent(&batch, UserContext::Masked).unwrap()));
    assert_ne!(social, rows_of(&model.represent(&batch, UserContext::Social).unwrap()));
}

#[test]
fn dropout_only_with_an_rng() {
    let (bundle, model) = tiny();
    let seqs: Vec<_> = bundle.train.iter().take(3).collect();
    let batch = model.batch(&seqs).unwrap();
    let a = rows_of(&model.encode_spatial(&batch, None).unwrap());
    assert_eq!(a, rows_of(&model.encode_spatial(&batch, None).unwrap()));
    let mut r = seeded_rng(1);
    let x = rows_of(&model.encode_spatial(&batch, Some(&mut r)).unwrap());
    let y = rows_of(&model.encode_spatial(&batch, Some(&mut r)).unwrap());
    assert_ne!(x, y);
    let mut r2 = seeded_rng(1);
    assert_eq!(x, rows_of(&model.encode_spatial(&batch, Some(&mut r2)).unwrap()));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (bundle, model) = tiny();
    let seqs: Vec<_> = bundle.train.iter().take(3).collect();
    let batch = model.batch(&seqs).unwrap();
    let vars: Vec<_> = model.store().iter().filter(|(n, _)| *n != "prototypes" && *n != "tau_x").map(|(_, v)| v.clone()).collect();
    let refs: Vec<_> = vars.iter().collect();
    let err = max_grad_error(
        &refs,
        &|| {
            let z = model.represent(&batch, UserContext::Social).unwrap();
            let p = model.project_temporal(&z.narrow(1, 5, 5).unwrap()).unwrap();
            let q = model.project_spatial(&z.narrow(1, 0, 5).unwrap()).unwrap();
            ((z.sqr().unwrap().sum_all().unwrap() + p.sin().unwrap().sum_all().unwrap()).unwrap()
                + q.sqr().unwrap().sum_all().unwrap())
            .unwrap()
        },
        12,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let gru = BiGru::new(&mut store, "g", 3, 4, 2, &mut seeded_rng(2)).unwrap();
    let mut r = rng(3);
    let x = var(&gaussian_rows(&mut r, 2 * 5, 3));
    let x3 = || x.as_tensor().reshape((2, 5, 3)).unwrap();
    let mask = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], (2, 5, 1), &candle_core::Device::Cpu).unwrap();
    let mut vars = gru.vars();
    vars.push(x.clone());
    let refs: Vec<_> = vars.iter().collect();
    let err = max_grad_error(&refs, &|| gru.forward(&x3(), &mask).unwrap().sin().unwrap().sum_all().unwrap(), 30);
    assert!(err < 1e-5, "{err}");
}
