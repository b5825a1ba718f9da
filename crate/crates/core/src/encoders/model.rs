use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{
    CategoryTextProvider, FeatureSpace, HashedBagOfWords, ProjectionHead, SeqBatch, SocialBlock, SpatialEncoder,
    TemporalEncoder,
};
use crate::ingest::SocialGraph;
use crate::losses::PrototypeBank;
use crate::nn::{device, seeded_rng, ParamStore, Rng, DTYPE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of geohash-character and location embeddings.
    pub embed_dim: usize,
    /// Width `h` of sequence representations.
    pub hidden_dim: usize,
    pub user_dim: usize,
    pub projection_dim: usize,
    pub geohash_bits: usize,
    pub gat_layers: usize,
    pub num_prototypes: usize,
    pub dropout: f64,
    /// When set, time slots go through a learned embedding of this width
    /// instead of entering the encoder as one-hot vectors.
    pub slot_embedding_dim: Option<usize>,
    /// Width of the hashed bag-of-words category vectors.
    pub category_dim: usize,
    /// Momentum coefficient of the twin temporal encoder.
    pub momentum: f64,
    /// Fuse a graph-attention user vector into the temporal representation.
    pub social: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            hidden_dim: 256,
            user_dim: 256,
            projection_dim: 512,
            geohash_bits: 32,
            gat_layers: 2,
            num_prototypes: 512,
            dropout: 0.1,
            slot_embedding_dim: None,
            category_dim: 64,
            momentum: 0.995,
            social: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.geohash_bits == 0 || self.geohash_bits % 2 != 0 {
            return Err(Error::Config(format!("geohash bits must be even and positive, got {}", self.geohash_bits)));
        }
        if self.num_prototypes < 2 {
            return Err(Error::Config("need at least 2 prototypes".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("user_dim", self.user_dim),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// How the temporal encoder sees user identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserContext {
    Social,
    /// A zero user vector, for tasks where the user is the label.
    Masked,
}

/// Deep copy of every parameter of a model.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub online: BTreeMap<String, Tensor>,
    pub twin: BTreeMap<String, Tensor>,
}

/// Sets every twin parameter to `eta * twin + (1 - eta) * online`, matching
/// parameters by name.
pub fn momentum_update(twin: &ParamStore, online: &ParamStore, eta: f64) -> Result<()> {
    for (name, t) in twin.iter() {
        let o = online
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("twin parameter {name} has no online counterpart")))?;
        if t.dims() != o.dims() {
            return Err(Error::Checkpoint(format!("twin parameter {name} has a different shape")));
        }
        let next = ((t.as_tensor() * eta)? + (o.as_tensor() * (1.0 - eta))?)?;
        t.set(&next)?;
    }
    Ok(())
}

/// Every trainable part of the pre-training model.
#[derive(Debug)]
pub struct RepresentationModel {
    pub config: ModelConfig,
    pub space: FeatureSpace,
    store: ParamStore,
    twin_store: ParamStore,
    spatial: SpatialEncoder,
    temporal: TemporalEncoder,
    twin: TemporalEncoder,
    social: Option<SocialBlock>,
    spatial_head: ProjectionHead,
    temporal_head: ProjectionHead,
    prototypes: PrototypeBank,
    tau_x: Var,
    category_table: Tensor,
    graph: SocialGraph,
    seed: u64,
}

impl RepresentationModel {
    /// Builds a model with hashed bag-of-words category vectors.
    pub fn new(config: ModelConfig, space: FeatureSpace, graph: &SocialGraph, tau_x: f64, seed: u64) -> Result<Self> {
        let provider = HashedBagOfWords::new(config.category_dim);
        Self::with_provider(config, space, &provider, graph, tau_x, seed)
    }

    pub fn with_provider(
        config: ModelConfig,
        space: FeatureSpace,
        provider: &dyn CategoryTextProvider,
        graph: &SocialGraph,
        tau_x: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = provider.dim();
        let mut values = Vec::with_capacity(space.categories.len() * dim);
        for c in &space.categories {
            values.extend(provider.embed(c));
        }
        let table = Tensor::from_vec(values, (space.categories.len(), dim), &device())?;
        Self::from_parts(config, space, table, graph, tau_x, seed)
    }

    /// Builds from an explicit `[C, d_c]` category table.
    pub fn from_parts(
        config: ModelConfig,
        space: FeatureSpace,
        category_table: Tensor,
        graph: &SocialGraph,
        tau_x: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.geohash_bits != space.geohash_bits {
            return Err(Error::Config(format!(
                "model uses {} geohash bits, feature space {}",
                config.geohash_bits, space.geohash_bits
            )));
        }
        if category_table.dims2()?.0 != space.categories.len() {
            return Err(Error::VocabularyMismatch("category table rows differ from the category vocabulary".into()));
        }
        if config.social && graph.num_nodes() != space.num_users {
            return Err(Error::VocabularyMismatch(format!(
                "social graph has {} nodes for {} users",
                graph.num_nodes(),
                space.num_users
            )));
        }
        let mut rng: Rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let spatial = SpatialEncoder::new(
            &mut store,
            space.geohash_positions(),
            space.num_locations,
            category_table.clone(),
            config.embed_dim,
            config.hidden_dim,
            config.dropout,
            &mut rng,
        )?;
        let user_dim = config.social.then_some(config.user_dim);
        let temporal = TemporalEncoder::new(
            &mut store,
            "temporal",
            config.slot_embedding_dim,
            config.hidden_dim,
            user_dim,
            config.dropout,
            &mut rng,
        )?;
        let social = if config.social {
            Some(SocialBlock::new(&mut store, graph, config.user_dim, config.gat_layers, &mut rng)?)
        } else {
            None
        };
        let spatial_head = ProjectionHead::new(&mut store, "head.spatial", config.hidden_dim, config.projection_dim, &mut rng)?;
        let temporal_head =
            ProjectionHead::new(&mut store, "head.temporal", config.hidden_dim, config.projection_dim, &mut rng)?;
        let prototypes = PrototypeBank::new(&mut store, config.num_prototypes, config.hidden_dim, &mut rng)?;
        let tau_x = Var::from_tensor(&Tensor::new(tau_x, &device())?)?;
        store.insert_var("tau_x", tau_x.clone())?;

        let mut twin_store = ParamStore::new();
        let twin = TemporalEncoder::new(
            &mut twin_store,
            "temporal",
            config.slot_embedding_dim,
            config.hidden_dim,
            user_dim,
            config.dropout,
            &mut seeded_rng(seed),
        )?;
        momentum_update(&twin_store, &store, 0.0)?;

        Ok(Self {
            config,
            space,
            store,
            twin_store,
            spatial,
            temporal,
            twin,
            social,
            spatial_head,
            temporal_head,
            prototypes,
            tau_x,
            category_table,
            graph: graph.clone(),
            seed,
        })
    }

    /// Independent copy with identical parameter values.
    pub fn try_clone(&self) -> Result<Self> {
        let copy = Self::from_parts(
            self.config.clone(),
            self.space.clone(),
            self.category_table.clone(),
            &self.graph,
            self.tau_x()?,
            self.seed,
        )?;
        copy.restore(&self.snapshot()?)?;
        Ok(copy)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn twin_store(&self) -> &ParamStore {
        &self.twin_store
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.prototypes
    }

    pub fn tau_x_var(&self) -> &Var {
        &self.tau_x
    }

    pub fn tau_x(&self) -> Result<f64> {
        Ok(self.tau_x.as_tensor().to_scalar::<f64>()?)
    }

    pub fn category_table(&self) -> &Tensor {
        &self.category_table
    }

    pub fn graph(&self) -> &SocialGraph {
        &self.graph
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn social(&self) -> Option<&SocialBlock> {
        self.social.as_ref()
    }

    pub fn batch(&self, seqs: &[&crate::ingest::CheckInSequence]) -> Result<SeqBatch> {
        SeqBatch::new(seqs, &self.space)
    }

    /// Spatial representations `[B, h]`; dropout is applied iff `rng` is given.
    pub fn encode_spatial(&self, batch: &SeqBatch, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.spatial.forward(batch, rng)
    }

    fn user_vectors(&self, batch: &SeqBatch, ctx: UserContext) -> Result<Option<Tensor>> {
        match (&self.social, ctx) {
            (None, _) => Ok(None),
            (Some(s), UserContext::Social) => Ok(Some(s.forward(&batch.user_index)?)),
            (Some(_), UserContext::Masked) => Ok(Some(Tensor::zeros(
                (batch.size(), self.config.user_dim),
                DTYPE,
                &device(),
            )?)),
        }
    }

    /// Temporal representations `[B, h]` from the online encoder; dropout is
    /// applied iff `rng` is given.
    pub fn encode_temporal(&self, batch: &SeqBatch, ctx: UserContext, rng: Option<&mut Rng>) -> Result<Tensor> {
        let users = self.user_vectors(batch, ctx)?;
        self.temporal.forward(batch, users.as_ref(), rng)
    }

    /// Temporal representations from the momentum twin, detached from every
    /// parameter.
    pub fn encode_temporal_momentum(&self, batch: &SeqBatch, ctx: UserContext) -> Result<Tensor> {
        let users = self.user_vectors(batch, ctx)?.map(|u| u.detach());
        Ok(self.twin.forward(batch, users.as_ref(), None)?.detach())
    }

    pub fn project_spatial(&self, z: &Tensor) -> Result<Tensor> {
        self.spatial_head.forward(z)
    }

    pub fn project_temporal(&self, z: &Tensor) -> Result<Tensor> {
        self.temporal_head.forward(z)
    }

    /// Deterministic `[B, 2h]` rows `z_s ‖ z_t`.
    pub fn represent(&self, batch: &SeqBatch, ctx: UserContext) -> Result<Tensor> {
        let zs = self.encode_spatial(batch, None)?;
        let zt = self.encode_temporal(batch, ctx, None)?;
        Ok(Tensor::cat(&[zs, zt], 1)?)
    }

    pub fn representation_dim(&self) -> usize {
        2 * self.config.hidden_dim
    }

    pub fn momentum_update(&self) -> Result<()> {
        momentum_update(&self.twin_store, &self.store, self.config.momentum)
    }

    /// Re-projects prototypes to unit length and clamps the cross-view
    /// temperature; run after every optimizer step.
    pub fn post_step(&self) -> Result<()> {
        self.prototypes.renormalize()?;
        let (lo, hi) = crate::losses::TAU_X_RANGE;
        self.tau_x.set(&self.tau_x.as_tensor().clamp(lo, hi)?)?;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<ModelSnapshot> {
        Ok(ModelSnapshot {
            online: self.store.snapshot()?,
            twin: self.twin_store.snapshot()?,
        })
    }

    pub fn restore(&self, snapshot: &ModelSnapshot) -> Result<()> {
        self.store.restore(&snapshot.online)?;
        self.twin_store.restore(&snapshot.twin)
    }
}
