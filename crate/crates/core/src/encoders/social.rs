use candle_core::{Tensor, Var};

use crate::ingest::SocialGraph;
use crate::nn::{device, ParamStore, Rng, DTYPE};
use crate::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;

/// Single-head graph attention over the user graph with self-loops.
///
/// Layer `l`: `e_ij = LeakyReLU(a_src·h_i + a_dst·h_j)` on the previous
/// layer's vectors, `α_ij` the softmax of `e_ij` over `j ∈ N(i) ∪ {i}`,
/// and `h_i' = sigmoid(Σ_j α_ij W h_j)`.
#[derive(Debug, Clone)]
pub struct SocialBlock {
    users: Var,
    layers: Vec<GatLayer>,
    receivers: Vec<u32>,
    senders: Vec<u32>,
    num_nodes: usize,
}

#[derive(Debug, Clone)]
struct GatLayer {
    weight: Var,
    a_src: Var,
    a_dst: Var,
}

impl SocialBlock {
    pub fn new(store: &mut ParamStore, graph: &SocialGraph, dim: usize, layers: usize, rng: &mut Rng) -> Result<Self> {
        let n = graph.num_nodes();
        let users = store.normal("social.user", &[n, dim], 0.1, rng)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let layers = (0..layers)
            .map(|l| {
                Ok(GatLayer {
                    weight: store.uniform(&format!("social.{l}.weight"), &[dim, dim], bound, rng)?,
                    a_src: store.uniform(&format!("social.{l}.a_src"), &[dim, 1], bound, rng)?,
                    a_dst: store.uniform(&format!("social.{l}.a_dst"), &[dim, 1], bound, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        for i in 0..n {
            receivers.push(i as u32);
            senders.push(i as u32);
            for &j in graph.neighbors(i) {
                if j != i {
                    receivers.push(i as u32);
                    senders.push(j as u32);
                }
            }
        }
        Ok(Self {
            users,
            layers,
            receivers,
            senders,
            num_nodes: n,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.users.dims()[1]
    }

    fn attention_tensor(&self, layer: &GatLayer, h: &Tensor) -> Result<Tensor> {
        let dev = device();
        let recv = Tensor::new(self.receivers.as_slice(), &dev)?;
        let send = Tensor::new(self.senders.as_slice(), &dev)?;
        let s_src = h.matmul(layer.a_src.as_tensor())?.squeeze(1)?;
        let s_dst = h.matmul(layer.a_dst.as_tensor())?.squeeze(1)?;
        let e = candle_nn::ops::leaky_relu(
            &(s_src.index_select(&recv, 0)? + s_dst.index_select(&send, 0)?)?,
            LEAKY_SLOPE,
        )?;
        // Per-receiver max, as a constant, for a stable softmax.
        let values = e.to_vec1::<f64>()?;
        let mut node_max = vec![f64::NEG_INFINITY; self.num_nodes];
        for (&r, &v) in self.receivers.iter().zip(&values) {
            node_max[r as usize] = node_max[r as usize].max(v);
        }
        let shift: Vec<f64> = self.receivers.iter().map(|&r| node_max[r as usize]).collect();
        let ex = e.sub(&Tensor::new(shift, &dev)?)?.exp()?;
        let denom = Tensor::zeros(self.num_nodes, DTYPE, &dev)?.index_add(&recv, &ex, 0)?;
        Ok(ex.div(&denom.index_select(&recv, 0)?)?)
    }

    /// Runs every layer, returning the final vectors and each layer's
    /// per-edge attention.
    fn propagate(&self) -> Result<(Tensor, Vec<Tensor>)> {
        let dev = device();
        let recv = Tensor::new(self.receivers.as_slice(), &dev)?;
        let send = Tensor::new(self.senders.as_slice(), &dev)?;
        let mut h = self.users.as_tensor().clone();
        let mut alphas = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let alpha = self.attention_tensor(layer, &h)?;
            let wh = h.matmul(layer.weight.as_tensor())?;
            let msg = wh.index_select(&send, 0)?.broadcast_mul(&alpha.unsqueeze(1)?)?;
            let agg = Tensor::zeros((self.num_nodes, self.dim()), DTYPE, &dev)?.index_add(&recv, &msg, 0)?;
            h = candle_nn::ops::sigmoid(&agg)?;
            alphas.push(alpha);
        }
        Ok((h, alphas))
    }

    /// Refined vectors for every user, `[U, D_u]`.
    pub fn forward_all(&self) -> Result<Tensor> {
        Ok(self.propagate()?.0)
    }

    /// Refined vectors for the given user indices, `[B, D_u]`.
    pub fn forward(&self, users: &Tensor) -> Result<Tensor> {
        for u in users.to_vec1::<u32>()? {
            if u as usize >= self.num_nodes {
                return Err(Error::UnknownId {
                    kind: "user",
                    id: u as usize,
                    size: self.num_nodes,
                });
            }
        }
        Ok(self.forward_all()?.index_select(users, 0)?)
    }

    /// `(receiver, sender, α)` triples of layer `layer`, evaluated on the
    /// current parameters.
    pub fn attention(&self, layer: usize) -> Result<Vec<(usize, usize, f64)>> {
        let alphas = self.propagate()?.1;
        let alpha = alphas
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no attention layer {layer}")))?
            .to_vec1::<f64>()?;
        Ok(self
            .receivers
            .iter()
            .zip(&self.senders)
            .zip(alpha)
            .map(|((&r, &s), a)| (r as usize, s as usize, a))
            .collect())
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.users.clone()];
        for l in &self.layers {
            v.extend([l.weight.clone(), l.a_src.clone(), l.a_dst.clone()]);
        }
        v
    }
}
