//! Self-supervised training loop, checkpoints and representation export.

mod checkpoint;
mod export;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use export::{export_representations, write_representations, RowInfo};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureSpace, ModelConfig, RepresentationModel, SeqBatch, UserContext};
use crate::ingest::{CheckInSequence, DatasetBundle};
use crate::losses::{assign, total_pretrain_loss, Ablation, LossBreakdown, LossWeights, PretrainViews, RepresentationQueue};
use crate::nn::{seeded_rng, Adam, Rng};
use crate::{Error, Result};

/// Seed offset of the generator used for validation dropout masks, so
/// validation loss depends only on the parameters.
const VALIDATION_SEED: u64 = 0x7a11_da7e;
const PROTOTYPE_SEED: u64 = 0x9a0f_c1e5;
const PROTOTYPE_LLOYD_STEPS: usize = 10;

/// Starts the prototypes at spherical k-means centers of the untrained
/// spatial representations of `seqs`. Random unit vectors sit far from
/// every sequence, so one prototype would otherwise absorb all of them.
/// Later epochs re-center the prototypes on the spatial queue: under
/// dropout noise the swapped targets pull all prototypes towards their
/// common mean.
fn seed_prototypes(model: &RepresentationModel, seqs: &[CheckInSequence], seed: u64) -> Result<()> {
    let mut parts = Vec::new();
    for chunk in seqs.chunks(256) {
        let refs: Vec<&CheckInSequence> = chunk.iter().collect();
        parts.push(model.encode_spatial(&model.batch(&refs)?, None)?);
    }
    let z = Tensor::cat(&parts, 0)?;
    model.prototypes().seed_from(&z, PROTOTYPE_LLOYD_STEPS, &mut seeded_rng(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub queue_capacity: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            queue_capacity: 2048,
            seed: 0,
            ablation: Ablation::Full,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: u64,
        epoch: usize,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        improved: bool,
    },
    Stop {
        epoch: usize,
        best_epoch: usize,
        best_val_loss: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything the training loop mutates.
#[derive(Debug)]
pub struct TrainState {
    pub config: PretrainConfig,
    pub model: RepresentationModel,
    pub optimizer: Adam,
    pub spatial_queue: RepresentationQueue,
    pub temporal_queue: RepresentationQueue,
    pub step: u64,
    pub epoch: usize,
    pub rng: Rng,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Freshly initialized state for `bundle`.
    pub fn new(bundle: &DatasetBundle, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let space = FeatureSpace::from_bundle(bundle, config.model.geohash_bits);
        let model = RepresentationModel::new(
            config.model.clone(),
            space,
            &bundle.social,
            config.weights.tau_x_init,
            config.seed,
        )?;
        if config.ablation.spatial_clusters() && !bundle.train.is_empty() {
            seed_prototypes(&model, &bundle.train, config.seed ^ PROTOTYPE_SEED)?;
        }
        Ok(Self {
            optimizer: Adam::new(config.learning_rate),
            spatial_queue: RepresentationQueue::new(config.queue_capacity),
            temporal_queue: RepresentationQueue::new(config.queue_capacity),
            step: 0,
            epoch: 0,
            // Offset so shuffling and dropout do not replay the init stream.
            rng: seeded_rng(config.seed.wrapping_add(1)),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            history: Vec::new(),
            model,
            config,
        })
    }

    /// Checks that `bundle` was encoded with the vocabulary this state was
    /// trained on.
    pub fn check_vocabulary(&self, bundle: &DatasetBundle) -> Result<()> {
        check_space(&self.model.space, bundle)
    }
}

pub(crate) fn check_space(space: &FeatureSpace, bundle: &DatasetBundle) -> Result<()> {
    let v = &bundle.vocab;
    if space.num_users != v.num_users()
        || space.num_locations != v.num_locations()
        || space.categories != v.categories
    {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} users / {} locations / {} categories, data has {} / {} / {}",
            space.num_users,
            space.num_locations,
            space.categories.len(),
            v.num_users(),
            v.num_locations(),
            v.categories.len()
        )));
    }
    Ok(())
}

/// Splits `order` into batches of `size`; a trailing batch of one is merged
/// into its predecessor because contrastive terms need two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let n = order.len();
        out.pop();
        let last = out.pop().unwrap();
        out.push(&order[n - last.len() - 1..]);
    }
    out
}

/// The two views of a batch the objective compares.
fn views(model: &RepresentationModel, batch: &SeqBatch, ablation: Ablation, rng: &mut Rng) -> Result<PretrainViews> {
    let spatial_anchor = model.encode_spatial(batch, Some(rng))?;
    let spatial_positive = model.encode_spatial(batch, Some(rng))?;
    let temporal_anchor = model.encode_temporal(batch, UserContext::Social, Some(rng))?;
    let temporal_positive = if ablation.temporal_margin() {
        model.encode_temporal_momentum(batch, UserContext::Social)?
    } else {
        model.encode_temporal(batch, UserContext::Social, Some(rng))?
    };
    Ok(PretrainViews {
        spatial_projected: model.project_spatial(&spatial_anchor)?,
        temporal_projected: model.project_temporal(&temporal_anchor)?,
        spatial_anchor,
        spatial_positive,
        temporal_anchor,
        temporal_positive,
    })
}

fn diagnostic(seqs: &[&CheckInSequence], loss: &LossBreakdown) -> String {
    let users: Vec<u64> = seqs.iter().map(|s| s.user).collect();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let starts: Vec<i64> = seqs.iter().map(|s| s.start_time()).collect();
    format!("terms {loss:?}; batch users {users:?}; lengths {lengths:?}; start times {starts:?}")
}

/// Mean total loss over `seqs` with fixed dropout masks and empty queues.
pub fn validation_loss(state: &TrainState, seqs: &[CheckInSequence]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Empty("validation split with at least two sequences"));
    }
    let cfg = &state.config;
    let mut rng = seeded_rng(cfg.seed ^ VALIDATION_SEED);
    let empty = RepresentationQueue::new(0);
    let order: Vec<usize> = (0..seqs.len()).collect();
    let mut total = 0.0;
    for chunk in batches(&order, cfg.batch_size) {
        let refs: Vec<&CheckInSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
        let batch = state.model.batch(&refs)?;
        let v = views(&state.model, &batch, cfg.ablation, &mut rng)?;
        let (_, b) = total_pretrain_loss(
            &v,
            state.model.prototypes(),
            state.model.tau_x_var().as_tensor(),
            &empty,
            &empty,
            &cfg.weights,
            cfg.ablation,
        )?;
        total += b.total * refs.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// One optimizer step on `seqs`.
pub fn train_step(state: &mut TrainState, seqs: &[&CheckInSequence]) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let batch = state.model.batch(seqs)?;
    let v = views(&state.model, &batch, cfg.ablation, &mut state.rng)?;
    let (loss, breakdown) = total_pretrain_loss(
        &v,
        state.model.prototypes(),
        state.model.tau_x_var().as_tensor(),
        &state.spatial_queue,
        &state.temporal_queue,
        &cfg.weights,
        cfg.ablation,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: diagnostic(seqs, &breakdown),
        });
    }
    let grads = loss.backward()?;
    state.optimizer.step(state.model.store(), &grads)?;
    state.model.post_step()?;
    state.model.momentum_update()?;
    if cfg.ablation.spatial_clusters() {
        let q = assign(&v.spatial_positive, state.model.prototypes().vectors(), cfg.weights.tau_s)?;
        state.spatial_queue.enqueue(&v.spatial_positive, Some(&q))?;
    }
    if cfg.ablation.temporal_margin() {
        state.temporal_queue.enqueue(&v.temporal_positive, None)?;
    }
    state.step += 1;
    Ok(breakdown)
}

/// Trains from scratch; see [`train`].
pub fn pretrain(bundle: &DatasetBundle, config: PretrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(bundle, config)?;
    train(&mut state, bundle, &mut |_| Ok(()))?;
    Ok(state)
}

/// Runs epochs until the configured count or until validation loss has not
/// improved for `patience` epochs, then restores the best parameters.
/// Every step and epoch is reported to `log`.
pub fn train(
    state: &mut TrainState,
    bundle: &DatasetBundle,
    log: &mut dyn FnMut(&LogEvent) -> Result<()>,
) -> Result<()> {
    state.check_vocabulary(bundle)?;
    if state.config.epochs == 0 {
        return Ok(());
    }
    if bundle.train.len() < 2 {
        return Err(Error::Empty("training split with at least two sequences"));
    }
    if bundle.val.len() < 2 {
        return Err(Error::Empty("validation split with at least two sequences"));
    }
    let mut best = state.model.snapshot()?;
    while state.epoch < state.config.epochs {
        if state.epoch > 0 && state.config.ablation.spatial_clusters() {
            if let Some(z) = state.spatial_queue.vectors()? {
                state.model.prototypes().refine(&z, PROTOTYPE_LLOYD_STEPS)?;
            }
        }
        state.epoch += 1;
        let epoch = state.epoch;
        // Shuffled from scratch each epoch so a resumed run sees the same
        // order as an uninterrupted one.
        let mut order: Vec<usize> = (0..bundle.train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        for chunk in batches(&order, state.config.batch_size) {
            let refs: Vec<&CheckInSequence> = chunk.iter().map(|&i| &bundle.train[i]).collect();
            let b = train_step(state, &refs)?;
            sum += b.total * refs.len() as f64;
            log(&LogEvent::Step {
                step: state.step,
                epoch,
                loss: b,
            })?;
        }
        let train_loss = sum / bundle.train.len() as f64;
        let val_loss = validation_loss(state, &bundle.val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                detail: format!("validation loss {val_loss} after epoch {epoch}"),
            });
        }
        let improved = val_loss < state.best_val_loss;
        if improved {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            best = state.model.snapshot()?;
        }
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::info!("epoch {epoch}: train {train_loss:.5}, val {val_loss:.5}");
        log(&LogEvent::Epoch {
            epoch,
            train_loss,
            val_loss,
            improved,
        })?;
        if epoch - state.best_epoch >= state.config.patience {
            break;
        }
    }
    state.model.restore(&best)?;
    log(&LogEvent::Stop {
        epoch: state.epoch,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
    })
}

/// Most probable prototype of each sequence under the deterministic
/// spatial encoder.
pub fn prototype_labels(model: &RepresentationModel, seqs: &[CheckInSequence], tau_s: f64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(256) {
        let refs: Vec<&CheckInSequence> = chunk.iter().collect();
        let z = model.encode_spatial(&model.batch(&refs)?, None)?;
        let q: Tensor = assign(&z, model.prototypes().vectors(), tau_s)?;
        out.extend(q.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|k| k as usize));
    }
    Ok(out)
}
