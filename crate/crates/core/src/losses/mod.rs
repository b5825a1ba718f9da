//! Pre-training objectives.
//!
//! All functions take batched `[B, h]` representations and return
//! per-anchor `[B]` losses (or a scalar where noted), so callers can both
//! average and inspect individual terms.

mod contrast;
mod queue;
mod spatial;

pub use contrast::{cross_view_loss, nt_xent, tam_loss, tam_positive_logit, TAM_COS_EPS};
pub use queue::{queue_entry, QueueEntry, RepresentationQueue};
pub use spatial::{
    assign, consistency_loss, consistency_targets, consistency_with_targets, gaussian_weights, reweight_plan,
    reweighted_contrast, reweighted_with_plan, spatial_loss, PrototypeBank, ReweightPlan, Reweighted, SpatialLoss,
};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bounds for the learnable cross-view temperature.
pub const TAU_X_RANGE: (f64, f64) = (1e-3, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the consistency term inside the spatial loss.
    pub eta_c: f64,
    /// Additive angular margin (radians).
    pub margin: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    /// Initial value of the learnable cross-view temperature.
    pub tau_x_init: f64,
    pub lambda_spatial: f64,
    pub lambda_temporal: f64,
    pub lambda_cross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta_c: 1.0,
            margin: 0.09,
            tau_s: 0.1,
            tau_t: 0.1,
            tau_x_init: 0.07,
            lambda_spatial: 1.0,
            lambda_temporal: 1.0,
            lambda_cross: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::Config(format!("angular margin {} outside [0, pi)", self.margin)));
        }
        for (name, t) in [("tau_s", self.tau_s), ("tau_t", self.tau_t), ("tau_x_init", self.tau_x_init)] {
            if !(t > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Which objectives replace which in the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// All three modules replaced: NT-Xent on both views, no cross-view term.
    Basic,
    /// Spatial cluster objective replaced by NT-Xent on dropout pairs.
    NoStm,
    /// Angular-margin objective on momentum pairs replaced by NT-Xent on dropout pairs.
    NoTim,
    /// Cross-view term dropped.
    NoStcv,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Full, Self::Basic, Self::NoStm, Self::NoTim, Self::NoStcv];

    pub fn spatial_clusters(self) -> bool {
        matches!(self, Self::Full | Self::NoTim | Self::NoStcv)
    }

    pub fn temporal_margin(self) -> bool {
        matches!(self, Self::Full | Self::NoStm | Self::NoStcv)
    }

    pub fn cross_view(self) -> bool {
        matches!(self, Self::Full | Self::NoStm | Self::NoTim)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Basic => "basic",
            Self::NoStm => "no_stm",
            Self::NoTim => "no_tim",
            Self::NoStcv => "no_stcv",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// The representations one training step produces.
#[derive(Debug, Clone)]
pub struct PretrainViews {
    /// Spatial anchor and its augmentation, `[B, h]`.
    pub spatial_anchor: Tensor,
    pub spatial_positive: Tensor,
    /// Temporal anchor and its augmentation, `[B, h]`.
    pub temporal_anchor: Tensor,
    pub temporal_positive: Tensor,
    /// Projected anchors of both views, `[B, d_p]`.
    pub spatial_projected: Tensor,
    pub temporal_projected: Tensor,
}

/// Unweighted loss values of one evaluation. `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_r: f64,
    pub l_spatial: f64,
    pub l_tam: f64,
    pub l_st: f64,
    pub total: f64,
    /// Anchors whose negative set was empty in the reweighted term.
    pub skipped_anchors: usize,
}

/// Combined pre-training loss and its per-term breakdown.
pub fn total_pretrain_loss(
    views: &PretrainViews,
    prototypes: &PrototypeBank,
    tau_x: &Tensor,
    spatial_queue: &RepresentationQueue,
    temporal_queue: &RepresentationQueue,
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<(Tensor, LossBreakdown)> {
    let mut b = LossBreakdown::default();
    let spatial = if ablation.spatial_clusters() {
        let s = spatial_loss(
            &views.spatial_anchor,
            &views.spatial_positive,
            spatial_queue,
            prototypes,
            weights.tau_s,
            weights.eta_c,
        )?;
        b.l_c = s.consistency.mean_all()?.to_scalar::<f64>()?;
        b.l_r = s.reweighted.mean_all()?.to_scalar::<f64>()?;
        b.skipped_anchors = s.skipped;
        s.total
    } else {
        nt_xent(&views.spatial_anchor, &views.spatial_positive, None, weights.tau_s)?.mean_all()?
    };
    b.l_spatial = spatial.to_scalar::<f64>()?;

    let temporal = if ablation.temporal_margin() {
        let queue = temporal_queue.vectors()?;
        tam_loss(
            &views.temporal_anchor,
            &views.temporal_positive,
            queue.as_ref(),
            weights.margin,
            weights.tau_t,
        )?
        .mean_all()?
    } else {
        nt_xent(&views.temporal_anchor, &views.temporal_positive, None, weights.tau_t)?.mean_all()?
    };
    b.l_tam = temporal.to_scalar::<f64>()?;

    let mut total = ((spatial * weights.lambda_spatial)? + (temporal * weights.lambda_temporal)?)?;
    if ablation.cross_view() {
        let cross = cross_view_loss(&views.spatial_projected, &views.temporal_projected, tau_x)?;
        b.l_st = cross.to_scalar::<f64>()?;
        total = (total + (cross * weights.lambda_cross)?)?;
    }
    b.total = total.to_scalar::<f64>()?;
    Ok((total, b))
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_spatial * self.l_spatial + w.lambda_temporal * self.l_tam + w.lambda_cross * self.l_st
    }
}
