use candle_core::{Tensor, D};

use super::TAU_X_RANGE;
use crate::nn::{device, l2_normalize, DTYPE};
use crate::{Error, Result};

/// Cosines are clamped to `[-1 + eps, 1 - eps]` before taking the sine of
/// the angle, keeping its derivative finite.
pub const TAM_COS_EPS: f64 = 1e-7;

/// Anchor-vs-candidate cosine matrix `[B, B + Q]`: candidates are the
/// positives followed by the extra negatives.
fn cosine_matrix(anchor: &Tensor, positive: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
    let a = l2_normalize(anchor)?;
    let mut cands = vec![l2_normalize(positive)?];
    if let Some(x) = extra {
        cands.push(l2_normalize(x)?);
    }
    Ok(a.matmul(&Tensor::cat(&cands, 0)?.t()?)?)
}

fn diagonal_mask(b: usize, c: usize) -> Result<Tensor> {
    let mut m = vec![0.0; b * c];
    for i in 0..b {
        m[i * c + i] = 1.0;
    }
    Ok(Tensor::from_vec(m, (b, c), &device())?)
}

fn diagonal(m: &Tensor) -> Result<Tensor> {
    let b = m.dims2()?.0;
    let idx = Tensor::from_vec((0..b as u32).collect::<Vec<_>>(), (b, 1), &device())?;
    Ok(m.gather(&idx, 1)?)
}

/// NT-Xent `[B]`: row `n` contrasts `anchor[n]` with `positive[n]` against
/// every other positive and every row of `extra`, by cosine over `tau`.
pub fn nt_xent(anchor: &Tensor, positive: &Tensor, extra: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    let logits = (cosine_matrix(anchor, positive, extra)? / tau)?;
    Ok((logits.log_sum_exp(1)? - diagonal(&logits)?.squeeze(1)?)?)
}

/// `cos(θ + margin)` for `cos θ = c`, with `θ + margin` capped at π.
pub fn tam_positive_logit(c: &Tensor, margin: f64) -> Result<Tensor> {
    let clamped = c.clamp(-1.0 + TAM_COS_EPS, 1.0 - TAM_COS_EPS)?;
    let sin = (1.0 - clamped.sqr()?)?.sqrt()?;
    let shifted = ((c * margin.cos())? - (sin * margin.sin())?)?;
    // θ + margin > π exactly when c < cos(π - margin) = -cos(margin).
    let past_pi = c.lt(-margin.cos())?;
    Ok(past_pi.where_cond(&Tensor::full(-1.0, c.dims(), &device())?.to_dtype(DTYPE)?, &shifted)?)
}

/// Angular-margin contrast `[B]`: NT-Xent with the positive's angle widened
/// by `margin`.
pub fn tam_loss(anchor: &Tensor, positive: &Tensor, extra: Option<&Tensor>, margin: f64, tau: f64) -> Result<Tensor> {
    let cos = cosine_matrix(anchor, positive, extra)?;
    let (b, c) = cos.dims2()?;
    let pos = tam_positive_logit(&diagonal(&cos)?, margin)?;
    let eye = diagonal_mask(b, c)?;
    let off = (1.0 - &eye)?;
    let logits = ((cos * off)? + eye.broadcast_mul(&pos)?)?;
    let logits = (logits / tau)?;
    Ok((logits.log_sum_exp(1)? - (pos.squeeze(1)? / tau)?)?)
}

/// Symmetric cross-view contrast (scalar): row `i` of each view matches
/// row `i` of the other; half the sum of both directions' mean cross-entropy.
/// `tau_x` is a scalar tensor, clamped to [`TAU_X_RANGE`].
pub fn cross_view_loss(spatial: &Tensor, temporal: &Tensor, tau_x: &Tensor) -> Result<Tensor> {
    let b = spatial.dims2()?.0;
    if b < 2 {
        return Err(Error::InvalidArgument(format!("cross-view loss needs a batch of at least 2, got {b}")));
    }
    let tau = tau_x.clamp(TAU_X_RANGE.0, TAU_X_RANGE.1)?;
    let logits = l2_normalize(spatial)?
        .matmul(&l2_normalize(temporal)?.t()?)?
        .broadcast_div(&tau)?;
    let s2t = diagonal(&candle_nn::ops::log_softmax(&logits, D::Minus1)?)?.neg()?.mean_all()?;
    let t2s = diagonal(&candle_nn::ops::log_softmax(&logits.t()?, D::Minus1)?)?
        .neg()?
        .mean_all()?;
    Ok(((s2t + t2s)? * 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let w = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), w), &device()).unwrap()
    }

    #[test]
    fn single_negative_arithmetic() {
        let l = nt_xent(&t2(&[&[1.0, 0.0]]), &t2(&[&[1.0, 0.0]]), Some(&t2(&[&[-1.0, 0.0]])), 1.0)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((l[0] - (-2f64).exp().ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_give_log_count() {
        let z = t2(&[&[0.5, 0.5]]);
        let extra = t2(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let l = nt_xent(&z, &z, Some(&extra), 0.3).unwrap().to_vec1::<f64>().unwrap();
        assert!((l[0] - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_margin_is_nt_xent() {
        let a = t2(&[&[0.3, -0.2, 0.9], &[0.1, 0.5, -0.4]]);
        let p = t2(&[&[0.2, -0.1, 1.0], &[0.3, 0.4, -0.2]]);
        let x = nt_xent(&a, &p, None, 0.1).unwrap().to_vec1::<f64>().unwrap();
        let y = tam_loss(&a, &p, None, 0.0, 0.1).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn margin_past_pi_is_capped() {
        let c = Tensor::new(&[[-0.999f64]], &device()).unwrap();
        let v = tam_positive_logit(&c, 0.3).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v[0][0], -1.0);
    }

    #[test]
    fn cross_view_two_by_two() {
        let s = t2(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let tau = Tensor::new(1.0f64, &device()).unwrap();
        let l = cross_view_loss(&s, &s, &tau).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - (-2f64).exp().ln_1p()).abs() < 1e-12);
        assert!(cross_view_loss(&t2(&[&[1.0, 0.0]]), &t2(&[&[1.0, 0.0]]), &tau).is_err());
    }
}
