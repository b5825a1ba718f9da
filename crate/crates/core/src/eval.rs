//! Ranking and regression metrics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Classes in descending score order, plus the true class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub ranking: Vec<usize>,
    pub truth: usize,
}

impl RankedPrediction {
    /// Ranks classes by descending score; equal scores keep the lower
    /// class index first. NaN scores rank last.
    pub fn from_scores(scores: &[f64], truth: usize) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| {
            let (x, y) = (scores[a], scores[b]);
            match (x.is_nan(), y.is_nan()) {
                (true, true) => a.cmp(&b),
                (true, false) => std::cmp::Ordering::Greater,
                (false, true) => std::cmp::Ordering::Less,
                _ => y.partial_cmp(&x).unwrap().then(a.cmp(&b)),
            }
        });
        Self { ranking, truth }
    }

    /// 1-based rank of the true class, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranking.iter().position(|&c| c == self.truth).map(|p| p + 1)
    }
}

pub fn acc_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let hits = preds.iter().filter(|p| p.rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mrr(preds: &[RankedPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut sum = 0.0;
    for p in preds {
        let r = p
            .rank()
            .ok_or_else(|| Error::InvalidArgument(format!("true class {} missing from ranking", p.truth)))?;
        sum += 1.0 / r as f64;
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub acc1: f64,
    pub acc5: f64,
    pub acc20: f64,
    pub mrr: f64,
}

pub fn ranking_metrics(preds: &[RankedPrediction]) -> Result<RankingMetrics> {
    Ok(RankingMetrics {
        acc1: acc_at_k(preds, 1)?,
        acc5: acc_at_k(preds, 5)?,
        acc20: acc_at_k(preds, 20)?,
        mrr: mrr(preds)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub nll: f64,
}

/// MAE and RMSE of predicted against true times, and the mean of the
/// per-event negative log-likelihoods.
pub fn tp_metrics(pred_seconds: &[f64], true_seconds: &[f64], nll_values: &[f64]) -> Result<TimeMetrics> {
    if pred_seconds.len() != true_seconds.len() || nll_values.len() != true_seconds.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} predictions, {} targets, {} likelihoods",
            pred_seconds.len(),
            true_seconds.len(),
            nll_values.len()
        )));
    }
    if pred_seconds.is_empty() {
        return Err(Error::Empty("time predictions"));
    }
    let n = pred_seconds.len() as f64;
    let (abs, sq) = pred_seconds
        .iter()
        .zip(true_seconds)
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t).powi(2)));
    Ok(TimeMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        nll: nll_values.iter().sum::<f64>() / n,
    })
}

/// Mean absolute percentage error; targets of zero are skipped.
pub fn mape(pred_seconds: &[f64], true_seconds: &[f64]) -> Result<f64> {
    if pred_seconds.len() != true_seconds.len() {
        return Err(Error::InvalidArgument("length mismatch".into()));
    }
    let terms: Vec<f64> = pred_seconds
        .iter()
        .zip(true_seconds)
        .filter(|(_, t)| **t != 0.0)
        .map(|(p, t)| ((p - t) / t).abs())
        .collect();
    if terms.is_empty() {
        return Err(Error::Empty("non-zero targets"));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked_at(rank: usize, classes: usize) -> RankedPrediction {
        let mut ranking: Vec<usize> = (1..classes).collect();
        ranking.insert(rank - 1, 0);
        RankedPrediction { ranking, truth: 0 }
    }

    #[test]
    fn boundary_at_k() {
        assert_eq!(acc_at_k(&[ranked_at(6, 10)], 5).unwrap(), 0.0);
        assert_eq!(acc_at_k(&[ranked_at(5, 10)], 5).unwrap(), 1.0);
        assert_eq!(acc_at_k(&[ranked_at(1, 10)], 1).unwrap(), 1.0);
    }

    #[test]
    fn mrr_of_first_and_second() {
        assert_eq!(mrr(&[ranked_at(1, 4), ranked_at(2, 4)]).unwrap(), 0.75);
        assert!(mrr(&[]).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let p = RankedPrediction::from_scores(&[0.5, 0.9, 0.5, f64::NAN], 2);
        assert_eq!(p.ranking, vec![1, 0, 2, 3]);
        assert_eq!(p.rank(), Some(3));
    }

    #[test]
    fn time_metrics_arithmetic() {
        let m = tp_metrics(&[1.0, -1.0], &[0.0, 0.0], &[0.5, 1.5]).unwrap();
        assert_eq!((m.mae, m.rmse, m.nll), (1.0, 1.0, 1.0));
        let m = tp_metrics(&[0.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert!(tp_metrics(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn mape_skips_zero_targets() {
        assert_eq!(mape(&[2.0, 5.0], &[1.0, 0.0]).unwrap(), 1.0);
    }
}
