//! Checkpoints are a [`TensorArchive`] holding every parameter (online and
//! twin), the optimizer moments, both queues and the category table, with a
//! JSON header carrying configuration, vocabulary sizes and loop state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_space, EpochRecord, PretrainConfig, TrainState};
use crate::encoders::{FeatureSpace, ModelSnapshot, RepresentationModel};
use crate::ingest::{DatasetBundle, SocialGraph};
use crate::losses::{queue_entry, RepresentationQueue};
use crate::nn::{Adam, Rng, TensorArchive};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "stcl-pretrain";

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    config: PretrainConfig,
    config_hash: String,
    space: FeatureSpace,
    social_edges: Vec<(usize, usize)>,
    social_nodes: usize,
    seed: u64,
    step: u64,
    epoch: usize,
    best_epoch: usize,
    best_val_loss: Option<f64>,
    history: Vec<EpochRecord>,
    rng: Rng,
    adam: AdamMeta,
    spatial_queue_capacity: usize,
    temporal_queue_capacity: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// SHA-256 of the configuration's canonical JSON.
pub fn config_hash(config: &PretrainConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn put_queue(a: &mut TensorArchive, name: &str, q: &RepresentationQueue) -> Result<()> {
    if let Some(z) = q.vectors()? {
        a.put(format!("queue.{name}.z"), &z)?;
    }
    if let Some(assign) = q.assignments()? {
        a.put(format!("queue.{name}.q"), &assign)?;
    }
    Ok(())
}

fn get_queue(a: &TensorArchive, name: &str, capacity: usize) -> Result<RepresentationQueue> {
    let mut queue = RepresentationQueue::new(capacity);
    let Some((zs, zv)) = a.get_raw(&format!("queue.{name}.z")) else {
        return Ok(queue);
    };
    let rows = zs[0];
    let width = zs[1];
    let q = a.get_raw(&format!("queue.{name}.q"));
    for i in 0..rows {
        let z = zv[i * width..(i + 1) * width].to_vec();
        let q = q.map(|(qs, qv)| qv[i * qs[1]..(i + 1) * qs[1]].to_vec());
        queue.push(queue_entry(z, q));
    }
    Ok(queue)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let model = &state.model;
    let graph = model.graph();
    let meta = Meta {
        format: CHECKPOINT_FORMAT.to_string(),
        config: state.config.clone(),
        config_hash: config_hash(&state.config)?,
        space: model.space.clone(),
        social_edges: graph.edges(),
        social_nodes: graph.num_nodes(),
        seed: model.seed(),
        step: state.step,
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss.is_finite().then_some(state.best_val_loss),
        history: state.history.clone(),
        rng: state.rng.clone(),
        adam: AdamMeta {
            lr: state.optimizer.lr,
            beta1: state.optimizer.beta1,
            beta2: state.optimizer.beta2,
            eps: state.optimizer.eps,
            step: state.optimizer.step,
        },
        spatial_queue_capacity: state.spatial_queue.capacity(),
        temporal_queue_capacity: state.temporal_queue.capacity(),
    };
    let mut a = TensorArchive::new(serde_json::to_value(&meta)?);
    let snap = model.snapshot()?;
    for (k, t) in &snap.online {
        a.put(format!("model/{k}"), t)?;
    }
    for (k, t) in &snap.twin {
        a.put(format!("twin/{k}"), t)?;
    }
    for (k, t) in &state.optimizer.first_moment {
        a.put(format!("adam.m/{k}"), t)?;
    }
    for (k, t) in &state.optimizer.second_moment {
        a.put(format!("adam.v/{k}"), t)?;
    }
    a.put("category_table", model.category_table())?;
    put_queue(&mut a, "spatial", &state.spatial_queue)?;
    put_queue(&mut a, "temporal", &state.temporal_queue)?;
    a.save(path)
}

/// Loads a checkpoint; with `bundle`, refuses vocabularies that differ from
/// the one the checkpoint was trained on.
pub fn load_checkpoint(path: &Path, bundle: Option<&DatasetBundle>) -> Result<TrainState> {
    let a = TensorArchive::load(path)?;
    let meta: Meta = serde_json::from_value(a.meta.clone())?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unexpected checkpoint format {:?}", meta.format)));
    }
    if config_hash(&meta.config)? != meta.config_hash {
        return Err(Error::Checkpoint("configuration hash does not match".into()));
    }
    if let Some(b) = bundle {
        check_space(&meta.space, b)?;
    }
    let graph = SocialGraph::from_edges(meta.social_nodes, meta.social_edges.iter().copied());
    let model = RepresentationModel::from_parts(
        meta.config.model.clone(),
        meta.space.clone(),
        a.get("category_table")?,
        &graph,
        meta.config.weights.tau_x_init,
        meta.seed,
    )?;
    model.restore(&ModelSnapshot {
        online: a.with_prefix("model/")?,
        twin: a.with_prefix("twin/")?,
    })?;
    let optimizer = Adam {
        lr: meta.adam.lr,
        beta1: meta.adam.beta1,
        beta2: meta.adam.beta2,
        eps: meta.adam.eps,
        step: meta.adam.step,
        first_moment: a.with_prefix("adam.m/")?,
        second_moment: a.with_prefix("adam.v/")?,
    };
    Ok(TrainState {
        spatial_queue: get_queue(&a, "spatial", meta.spatial_queue_capacity)?,
        temporal_queue: get_queue(&a, "temporal", meta.temporal_queue_capacity)?,
        config: meta.config,
        model,
        optimizer,
        step: meta.step,
        epoch: meta.epoch,
        rng: meta.rng,
        best_epoch: meta.best_epoch,
        best_val_loss: meta.best_val_loss.unwrap_or(f64::INFINITY),
        history: meta.history,
    })
}
