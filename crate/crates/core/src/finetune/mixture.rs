use std::f64::consts::PI;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{softplus, Linear, ParamStore, Rng};
use crate::{Error, Result};

/// Floor added to the softplus output for component scales.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Log-normal mixture over normalized inter-event times `τ' = exp(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub s: Vec<f64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MixtureParams {
    pub fn new(w: Vec<f64>, mu: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let p = Self { w, mu, s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.w.len();
        if k == 0 || self.mu.len() != k || self.s.len() != k {
            return Err(Error::InvalidArgument("mixture parameter lengths differ or are empty".into()));
        }
        if self.w.iter().any(|&w| !(w >= 0.0)) || (self.w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("mixture weights are not a probability vector".into()));
        }
        if self.s.iter().any(|&s| !(s > 0.0)) || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mixture scales must be positive and means finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn log_density(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("density needs a positive time, got {tau}")));
        }
        let x = tau.ln();
        Ok(log_sum_exp((0..self.len()).map(|k| {
            let s = self.s[k];
            self.w[k].ln() - x - s.ln() - 0.5 * (2.0 * PI).ln() - (x - self.mu[k]).powi(2) / (2.0 * s * s)
        })))
    }
}

/// `p(τ) = Σ_k w_k LogNormal(τ; μ_k, s_k)`.
pub fn mixture_density(tau: f64, params: &MixtureParams) -> Result<f64> {
    Ok(params.log_density(tau)?.exp())
}

/// Expectation of `exp(a X + b)` where `log τ' = X` follows the mixture:
/// `Σ_k w_k exp(a μ_k + b + a² s_k² / 2)`, evaluated in log space.
pub fn mixture_mean(params: &MixtureParams, a: f64, b: f64) -> f64 {
    log_sum_exp(
        (0..params.len()).map(|k| params.w[k].ln() + a * params.mu[k] + b + 0.5 * (a * params.s[k]).powi(2)),
    )
    .exp()
}

/// Batched mixture parameters as tensors, each `[B, K]`.
#[derive(Debug, Clone)]
pub struct MixtureTensors {
    pub log_w: Tensor,
    pub mu: Tensor,
    pub s: Tensor,
}

impl MixtureTensors {
    /// Per-row negative log density `[B]` of `τ' = exp(x)` for the
    /// standardized log times `x` (`[B]`).
    pub fn nll(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.unsqueeze(1)?;
        let z = x.broadcast_sub(&self.mu)?.div(&self.s)?;
        let log_normal = ((z.sqr()? * -0.5)? - self.s.log()?)? - 0.5 * (2.0 * PI).ln();
        let log_p = (&self.log_w + log_normal?)?.log_sum_exp(1)?;
        Ok((x.squeeze(1)? - log_p)?)
    }

    pub fn rows(&self) -> Result<Vec<MixtureParams>> {
        let w = self.log_w.exp()?.to_vec2::<f64>()?;
        let mu = self.mu.to_vec2::<f64>()?;
        let s = self.s.to_vec2::<f64>()?;
        Ok(w.into_iter()
            .zip(mu)
            .zip(s)
            .map(|((w, mu), s)| MixtureParams { w, mu, s })
            .collect())
    }
}

/// Linear map to `3K` outputs: weight logits, means and raw scales.
#[derive(Debug, Clone)]
pub struct MixtureHead {
    linear: Linear,
    k: usize,
}

impl MixtureHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, input, 3 * k, rng)?,
            k,
        })
    }

    pub fn forward(&self, g: &Tensor) -> Result<MixtureTensors> {
        let out = self.linear.forward(g)?;
        Self::transform(&out, self.k)
    }

    /// Splits raw `[B, 3K]` outputs into valid mixture parameters.
    pub fn transform(out: &Tensor, k: usize) -> Result<MixtureTensors> {
        Ok(MixtureTensors {
            log_w: candle_nn::ops::log_softmax(&out.narrow(1, 0, k)?, D::Minus1)?,
            mu: out.narrow(1, k, k)?,
            s: (softplus(&out.narrow(1, 2 * k, k)?)? + SCALE_FLOOR)?,
        })
    }
}
