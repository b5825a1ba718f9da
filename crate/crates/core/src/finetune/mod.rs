//! Downstream heads: next-location prediction (LP), trajectory-user
//! linking (TUL) and next-time prediction (TP).

mod mixture;

pub use mixture::{mixture_density, mixture_mean, MixtureHead, MixtureParams, MixtureTensors, SCALE_FLOOR};

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{RepresentationModel, UserContext};
use crate::eval::{ranking_metrics, tp_metrics, RankedPrediction, RankingMetrics, TimeMetrics};
use crate::ingest::{CheckInSequence, DatasetBundle};
use crate::nn::{device, seeded_rng, Adam, Linear, ParamStore};
use crate::{Error, Result};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lp,
    Tul,
    Tp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Lp => "lp",
            Task::Tul => "tul",
            Task::Tp => "tp",
        }
    }

    /// User identity is the TUL label, so the social block is masked.
    pub fn user_context(self) -> UserContext {
        match self {
            Task::Tul => UserContext::Masked,
            _ => UserContext::Social,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Task::Lp),
            "tul" => Ok(Task::Tul),
            "tp" => Ok(Task::Tp),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected lp, tul or tp"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub task: Task,
    /// Train only the head; encoder parameters stay untouched.
    pub freeze_encoder: bool,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mixture_components: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: Task::Lp,
            freeze_encoder: false,
            epochs: 20,
            patience: Some(5),
            learning_rate: 1e-3,
            batch_size: 64,
            mixture_components: 16,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("fine-tuning needs at least one epoch".into()));
        }
        if self.batch_size == 0 || self.mixture_components == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size, mixture components and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised example: the encoder input and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub input: CheckInSequence,
    /// Location index (LP) or user index (TUL); unused for TP.
    pub class: usize,
    /// Gap between the last two records in seconds (TP).
    pub dt_seconds: f64,
}

/// Builds examples for `task`, returning them with the number of sequences
/// that could not form one.
pub fn task_examples(seqs: &[CheckInSequence], task: Task) -> (Vec<TaskExample>, usize) {
    let mut out = Vec::with_capacity(seqs.len());
    let mut skipped = 0;
    for s in seqs {
        let example = match task {
            Task::Tul => Some(TaskExample {
                input: s.clone(),
                class: s.user as usize,
                dt_seconds: 0.0,
            }),
            Task::Lp | Task::Tp => s.prefix().and_then(|input| {
                let n = s.records.len();
                let last = &s.records[n - 1];
                let dt = (last.t - s.records[n - 2].t) as f64;
                (task == Task::Lp || dt > 0.0).then(|| TaskExample {
                    input,
                    class: last.lid as usize,
                    dt_seconds: dt,
                })
            }),
        };
        match example {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    (out, skipped)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Higher is better: Acc@1 for classification, negative MAE for TP.
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

struct Split {
    train: Vec<TaskExample>,
    val: Vec<TaskExample>,
    test: Vec<TaskExample>,
    skipped: SkipCounts,
}

fn prepare(bundle: &DatasetBundle, task: Task) -> Result<Split> {
    let (train, a) = task_examples(&bundle.train, task);
    let (val, b) = task_examples(&bundle.val, task);
    let (test, c) = task_examples(&bundle.test, task);
    if train.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    if val.is_empty() || test.is_empty() {
        return Err(Error::Empty("validation or test examples"));
    }
    Ok(Split {
        train,
        val,
        test,
        skipped: SkipCounts {
            train: a,
            val: b,
            test: c,
        },
    })
}

/// Sequence representations `[B, 2h]` for `examples`.
pub fn represent(model: &RepresentationModel, examples: &[&TaskExample], task: Task) -> Result<Tensor> {
    let seqs: Vec<&CheckInSequence> = examples.iter().map(|e| &e.input).collect();
    let batch = model.batch(&seqs)?;
    model.represent(&batch, task.user_context())
}

/// Applies `f` to evaluation-sized chunks of `examples` and concatenates
/// the per-row outputs.
fn map_chunks<T>(
    examples: &[TaskExample],
    mut f: impl FnMut(&[&TaskExample]) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let refs: Vec<&TaskExample> = examples.iter().collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

/// Shared training loop: minimizes `loss` over shuffled mini-batches and
/// keeps the parameters of the epoch with the best `score`.
fn fit(
    model: &RepresentationModel,
    head_store: &ParamStore,
    cfg: &FinetuneConfig,
    train: &[TaskExample],
    loss: impl Fn(&RepresentationModel, &[&TaskExample]) -> Result<Tensor>,
    score: impl Fn(&RepresentationModel) -> Result<f64>,
) -> Result<FitLog> {
    let mut rng = seeded_rng(cfg.seed);
    let mut head_opt = Adam::new(cfg.learning_rate);
    let mut model_opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0, model.snapshot()?, head_store.snapshot()?);
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TaskExample> = chunk.iter().map(|&i| &train[i]).collect();
            let l = loss(model, &batch)?;
            let value = l.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch as u64,
                    detail: format!("fine-tuning loss {value} on a batch of {}", batch.len()),
                });
            }
            let grads = l.backward()?;
            head_opt.step(head_store, &grads)?;
            if !cfg.freeze_encoder {
                model_opt.step(model.store(), &grads)?;
            }
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let val_score = score(model)?;
        log::info!("fine-tune epoch {epoch}: loss {:.5}, val score {val_score:.5}", total / count as f64);
        epochs.push(EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_score,
        });
        if val_score > best.0 {
            best = (val_score, epoch, model.snapshot()?, head_store.snapshot()?);
        } else if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    model.restore(&best.2)?;
    head_store.restore(&best.3)?;
    Ok(FitLog {
        epochs,
        best_epoch: best.1,
    })
}

/// Linear classifier over `[z_s ‖ z_t]`.
#[derive(Debug)]
pub struct Classifier {
    pub task: Task,
    pub model: RepresentationModel,
    pub store: ParamStore,
    pub head: Linear,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn logits(&self, examples: &[&TaskExample]) -> Result<Tensor> {
        self.head.forward(&represent(&self.model, examples, self.task)?)
    }

    pub fn rank(&self, examples: &[TaskExample]) -> Result<Vec<RankedPrediction>> {
        rank_examples(&self.model, &self.head, self.task, examples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub task: Task,
    pub val: RankingMetrics,
    pub test: RankingMetrics,
    pub skipped: SkipCounts,
    pub fit: FitLog,
}

fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let idx = Tensor::from_vec(
        classes.iter().map(|&c| c as u32).collect::<Vec<_>>(),
        (classes.len(), 1),
        &device(),
    )?;
    Ok(candle_nn::ops::log_softmax(logits, D::Minus1)?
        .gather(&idx, 1)?
        .neg()?
        .mean_all()?)
}

/// Fine-tunes a copy of `model` with a classification head for LP or TUL.
pub fn finetune_classify(
    model: &RepresentationModel,
    bundle: &DatasetBundle,
    cfg: &FinetuneConfig,
) -> Result<(Classifier, ClassifyReport)> {
    cfg.validate()?;
    let num_classes = match cfg.task {
        Task::Lp => bundle.vocab.num_locations(),
        Task::Tul => bundle.vocab.num_users(),
        Task::Tp => return Err(Error::Config("use finetune_tp for time prediction".into())),
    };
    let data = prepare(bundle, cfg.task)?;
    let mut store = ParamStore::new();
    let head = Linear::new(
        &mut store,
        &format!("finetune.{}", cfg.task.name()),
        model.representation_dim(),
        num_classes,
        &mut seeded_rng(cfg.seed ^ 0x5eed),
    )?;
    let mut clf = Classifier {
        task: cfg.task,
        model: model.try_clone()?,
        store,
        head,
    };
    let task = cfg.task;
    let freeze = cfg.freeze_encoder;
    let head = clf.head.clone();
    let fit = fit(
        &clf.model,
        &clf.store,
        cfg,
        &data.train,
        |m, batch| {
            let mut g = represent(m, batch, task)?;
            if freeze {
                g = g.detach();
            }
            let classes: Vec<usize> = batch.iter().map(|e| e.class).collect();
            cross_entropy(&head.forward(&g)?, &classes)
        },
        |m| {
            let m = ranking_metrics(&rank_examples(m, &head, task, &data.val)?)?;
            // Ties on Acc@1 are broken by MRR.
            Ok(m.acc1 + 1e-6 * m.mrr)
        },
    )?;
    clf.head = head;
    let val = ranking_metrics(&clf.rank(&data.val)?)?;
    let test = ranking_metrics(&clf.rank(&data.test)?)?;
    let report = ClassifyReport {
        task,
        val,
        test,
        skipped: data.skipped,
        fit,
    };
    Ok((clf, report))
}

fn rank_examples(
    model: &RepresentationModel,
    head: &Linear,
    task: Task,
    examples: &[TaskExample],
) -> Result<Vec<RankedPrediction>> {
    map_chunks(examples, |chunk| {
        let logits = head.forward(&represent(model, chunk, task)?)?.to_vec2::<f64>()?;
        Ok(logits
            .iter()
            .zip(chunk)
            .map(|(row, e)| RankedPrediction::from_scores(row, e.class))
            .collect())
    })
}

/// Log-normal mixture head for inter-event times.
#[derive(Debug)]
pub struct TimePredictor {
    pub model: RepresentationModel,
    pub store: ParamStore,
    pub head: MixtureHead,
}

/// Point prediction, true value and real-scale NLL for one example, all in
/// seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePrediction {
    pub predicted: f64,
    pub actual: f64,
    pub nll: f64,
}

fn standardized_targets(model: &RepresentationModel, examples: &[&TaskExample]) -> Result<Tensor> {
    let x: Vec<f64> = examples.iter().map(|e| model.space.standardize_dt(e.dt_seconds)).collect();
    Ok(Tensor::new(x, &device())?)
}

fn predict_times(
    model: &RepresentationModel,
    head: &MixtureHead,
    examples: &[TaskExample],
) -> Result<Vec<TimePrediction>> {
    let (mean, std) = (model.space.log_dt_mean, model.space.log_dt_std);
    map_chunks(examples, |chunk| {
        let mix = head.forward(&represent(model, chunk, Task::Tp)?)?;
        let x = standardized_targets(model, chunk)?;
        let nll = mix.nll(&x)?.to_vec1::<f64>()?;
        let x = x.to_vec1::<f64>()?;
        Ok(mix
            .rows()?
            .iter()
            .zip(chunk)
            .zip(nll.iter().zip(x))
            .map(|((p, e), (nll, x))| TimePrediction {
                predicted: mixture_mean(p, std, mean),
                actual: e.dt_seconds,
                // Change of variables from exp(x) back to seconds.
                nll: nll - x + std.ln() + e.dt_seconds.max(1.0).ln(),
            })
            .collect())
    })
}

impl TimePredictor {
    pub fn predict(&self, examples: &[TaskExample]) -> Result<Vec<TimePrediction>> {
        predict_times(&self.model, &self.head, examples)
    }
}

pub fn time_metrics(preds: &[TimePrediction]) -> Result<TimeMetrics> {
    let p: Vec<f64> = preds.iter().map(|p| p.predicted).collect();
    let t: Vec<f64> = preds.iter().map(|p| p.actual).collect();
    let n: Vec<f64> = preds.iter().map(|p| p.nll).collect();
    tp_metrics(&p, &t, &n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeReport {
    pub val: TimeMetrics,
    pub test: TimeMetrics,
    pub skipped: SkipCounts,
    pub fit: FitLog,
}

/// Fine-tunes a copy of `model` with a mixture head for next-time
/// prediction. Targets are standardized log gaps; metrics are in seconds.
pub fn finetune_tp(
    model: &RepresentationModel,
    bundle: &DatasetBundle,
    cfg: &FinetuneConfig,
) -> Result<(TimePredictor, TimeReport)> {
    cfg.validate()?;
    let data = prepare(bundle, Task::Tp)?;
    let mut store = ParamStore::new();
    let head = MixtureHead::new(
        &mut store,
        "finetune.tp",
        model.representation_dim(),
        cfg.mixture_components,
        &mut seeded_rng(cfg.seed ^ 0x5eed),
    )?;
    let model = model.try_clone()?;
    let freeze = cfg.freeze_encoder;
    let fit = fit(
        &model,
        &store,
        cfg,
        &data.train,
        |m, batch| {
            let mut g = represent(m, batch, Task::Tp)?;
            if freeze {
                g = g.detach();
            }
            Ok(head.forward(&g)?.nll(&standardized_targets(m, batch)?)?.mean_all()?)
        },
        |m| Ok(-time_metrics(&predict_times(m, &head, &data.val)?)?.mae),
    )?;
    let predictor = TimePredictor { model, store, head };
    let report = TimeReport {
        val: time_metrics(&predictor.predict(&data.val)?)?,
        test: time_metrics(&predictor.predict(&data.test)?)?,
        skipped: data.skipped,
        fit,
    };
    Ok((predictor, report))
}

/// Task examples of one split, for callers that evaluate outside the
/// fine-tuning loop.
pub fn split_examples(bundle: &DatasetBundle, split: crate::ingest::Split, task: Task) -> (Vec<TaskExample>, usize) {
    task_examples(bundle.split(split), task)
}
