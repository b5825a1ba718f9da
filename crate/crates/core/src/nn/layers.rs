use candle_core::{Tensor, Var, D};
use rand::Rng as _;

use super::{device, ParamStore, Rng};
use crate::Result;

/// Affine map `x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[input, output], bound, rng)?,
            bias: store.uniform(&format!("{name}.bias"), &[output], bound, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("linear input must have rank >= 1");
        let flat = x.reshape(((), input))?;
        let y = flat.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.output_dim();
        Ok(y.reshape(out_dims)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Single-direction GRU over padded batches.
#[derive(Debug, Clone)]
pub struct Gru {
    w_input: Var,
    w_hidden: Var,
    b_input: Var,
    b_hidden: Var,
    hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_input: store.uniform(&format!("{name}.w_input"), &[input, 3 * hidden], bound, rng)?,
            w_hidden: store.uniform(&format!("{name}.w_hidden"), &[hidden, 3 * hidden], bound, rng)?,
            b_input: store.uniform(&format!("{name}.b_input"), &[3 * hidden], bound, rng)?,
            b_hidden: store.uniform(&format!("{name}.b_hidden"), &[3 * hidden], bound, rng)?,
            hidden,
        })
    }

    /// Runs over `x` of shape `[B, T, F]` and returns the final hidden state
    /// `[B, H]`. `mask` is `[B, T, 1]` with 1 for real steps; padded steps
    /// leave the state untouched, so right padding works in both directions.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, reverse: bool) -> Result<Tensor> {
        let (b, t, f) = x.dims3()?;
        let h_dim = self.hidden;
        let gx = x
            .reshape((b * t, f))?
            .matmul(self.w_input.as_tensor())?
            .broadcast_add(self.b_input.as_tensor())?
            .reshape((b, t, 3 * h_dim))?;
        let mut h = Tensor::zeros((b, h_dim), super::DTYPE, &device())?;
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        };
        for step in steps {
            let gx_t = gx.narrow(1, step, 1)?.squeeze(1)?;
            let m = mask.narrow(1, step, 1)?.squeeze(1)?;
            let gh = h
                .matmul(self.w_hidden.as_tensor())?
                .broadcast_add(self.b_hidden.as_tensor())?;
            let r = candle_nn::ops::sigmoid(&(gx_t.narrow(1, 0, h_dim)? + gh.narrow(1, 0, h_dim)?)?)?;
            let z = candle_nn::ops::sigmoid(&(gx_t.narrow(1, h_dim, h_dim)? + gh.narrow(1, h_dim, h_dim)?)?)?;
            let n = (gx_t.narrow(1, 2 * h_dim, h_dim)? + (r * gh.narrow(1, 2 * h_dim, h_dim)?)?)?.tanh()?;
            let h_new = (&n + (z * (&h - &n)?)?)?;
            h = (&h + (h_new - &h)?.broadcast_mul(&m)?)?;
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.w_input.clone(),
            self.w_hidden.clone(),
            self.b_input.clone(),
            self.b_hidden.clone(),
        ]
    }
}

/// Bidirectional GRU whose two final states are concatenated and projected.
#[derive(Debug, Clone)]
pub struct BiGru {
    forward: Gru,
    backward: Gru,
    pool: Linear,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            forward: Gru::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: Gru::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
            pool: Linear::new(store, &format!("{name}.pool"), 2 * hidden, output, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let hf = self.forward.forward(x, mask, false)?;
        let hb = self.backward.forward(x, mask, true)?;
        self.pool.forward(&Tensor::cat(&[hf, hb], 1)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.forward.vars();
        v.extend(self.backward.vars());
        v.extend(self.pool.vars());
        v
    }
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), &device())?;
    Ok((x * mask)?)
}

/// Row-wise L2 normalization over the last axis with an epsilon floor, so
/// zero rows map to zero instead of NaN.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `log(1 + e^x)` computed as `max(x, 0) + log(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}
