use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{device, Rng};
use crate::{Error, Result};

/// Named trainable tensors, iterated in name order.
///
/// Modules keep clones of the [`Var`]s they own; clones share storage, so
/// updates through the store are visible to the modules.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.vars.iter().map(|(k, v)| (k, v.dims().to_vec())))
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let var = Var::from_vec(data, shape, &device())?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Registers an existing variable under `name`.
    pub fn insert_var(&mut self, name: &str, var: Var) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut Rng) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameter values; names and shapes must match exactly.
    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        if snapshot.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = snapshot
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }

    /// Flattened values of every parameter, in name order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_elements());
        for v in self.vars.values() {
            out.extend(v.as_tensor().flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}
