use candle_core::{Tensor, Var};

use super::features::SeqBatch;
use crate::nn::{dropout, BiGru, Linear, ParamStore, Rng};
use crate::Result;

/// Spatial view: per-step feature is the mean geohash-character embedding,
/// the category text vector and the location embedding, fed to a Bi-GRU.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    geo: Var,
    loc: Var,
    categories: Tensor,
    gru: BiGru,
    positions: usize,
    dropout: f64,
}

impl SpatialEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        positions: usize,
        num_locations: usize,
        categories: Tensor,
        embed_dim: usize,
        hidden_dim: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cat_dim = categories.dims2()?.1;
        let geo = store.normal("spatial.geo", &[positions * 32, embed_dim], 0.1, rng)?;
        let loc = store.normal("spatial.loc", &[num_locations, embed_dim], 0.1, rng)?;
        let input = 2 * embed_dim + cat_dim;
        let gru = BiGru::new(store, "spatial.gru", input, hidden_dim, hidden_dim, rng)?;
        Ok(Self {
            geo,
            loc,
            categories,
            gru,
            positions,
            dropout,
        })
    }

    pub fn step_features(&self, batch: &SeqBatch) -> Result<Tensor> {
        let (b, t) = (batch.size(), batch.max_len);
        let d = self.geo.dims()[1];
        let geo = self
            .geo
            .as_tensor()
            .index_select(&batch.geohash_chars, 0)?
            .reshape((b, t, self.positions, d))?
            .mean(2)?;
        let cat = self.categories.index_select(&batch.categories, 0)?.reshape((b, t, ()))?;
        let loc = self.loc.as_tensor().index_select(&batch.locations, 0)?.reshape((b, t, d))?;
        Ok(Tensor::cat(&[geo, cat, loc], 2)?)
    }

    /// `[B, h]`. With `rng`, step features pass through dropout, which is
    /// the augmentation producing positive pairs.
    pub fn forward(&self, batch: &SeqBatch, rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut x = self.step_features(batch)?;
        if let Some(rng) = rng {
            x = dropout(&x, self.dropout, rng)?;
        }
        self.gru.forward(&x, &batch.mask)
    }
}

/// Temporal view: one-hot time slot (or a slot embedding) plus the
/// standardized log gap, fed to a Bi-GRU; optionally fused with a social
/// user vector.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    slot_embedding: Option<Var>,
    gru: BiGru,
    fuse: Option<Linear>,
    dropout: f64,
}

impl TemporalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        slot_embedding_dim: Option<usize>,
        hidden_dim: usize,
        user_dim: Option<usize>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let slot_embedding = match slot_embedding_dim {
            Some(d) => Some(store.normal(&format!("{prefix}.slot"), &[crate::geocode::NUM_TIME_SLOTS, d], 0.1, rng)?),
            None => None,
        };
        let slot_dim = slot_embedding_dim.unwrap_or(crate::geocode::NUM_TIME_SLOTS);
        let gru = BiGru::new(store, &format!("{prefix}.gru"), slot_dim + 1, hidden_dim, hidden_dim, rng)?;
        let fuse = match user_dim {
            Some(u) => Some(Linear::new(store, &format!("{prefix}.fuse"), hidden_dim + u, hidden_dim, rng)?),
            None => None,
        };
        Ok(Self {
            slot_embedding,
            gru,
            fuse,
            dropout,
        })
    }

    pub fn uses_social(&self) -> bool {
        self.fuse.is_some()
    }

    pub fn step_features(&self, batch: &SeqBatch) -> Result<Tensor> {
        let slots = match &self.slot_embedding {
            Some(e) => e
                .as_tensor()
                .index_select(&batch.slots, 0)?
                .reshape((batch.size(), batch.max_len, ()))?,
            None => batch.slot_onehot.clone(),
        };
        Ok(Tensor::cat(&[slots, batch.gaps.clone()], 2)?)
    }

    /// `[B, h]`. `user` is `[B, D_u]` and is required when the encoder was
    /// built with a user dimension.
    pub fn forward(&self, batch: &SeqBatch, user: Option<&Tensor>, rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut x = self.step_features(batch)?;
        if let Some(rng) = rng {
            x = dropout(&x, self.dropout, rng)?;
        }
        let z = self.gru.forward(&x, &batch.mask)?;
        match (&self.fuse, user) {
            (Some(fuse), Some(u)) => fuse.forward(&Tensor::cat(&[&z, u], 1)?),
            (None, _) => Ok(z),
            (Some(_), None) => Err(crate::Error::InvalidArgument(
                "temporal encoder needs a user vector".into(),
            )),
        }
    }
}

/// Two-layer map `R^h -> R^{d_p}` with a ReLU in between.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    first: Linear,
    second: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), input, output, rng)?,
            second: Linear::new(store, &format!("{name}.1"), output, output, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.second.output_dim()
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(z)?.relu()?)
    }
}
