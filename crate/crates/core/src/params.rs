use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Move every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Put every parameter on `tape`; `trainable` decides which ones are
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t, trainable(k))))
            .collect();
        Bound { vars }
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, values).expect("finite normal draws")
}

/// Matrix with entries drawn from N(0, 1/fan_in).
pub(crate) fn fan_in_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

pub(crate) fn insert_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[width], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
}

pub(crate) fn check_shape(store: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    let t = store.get(name)?;
    if t.shape() != shape {
        return Err(Error::shape(format!(
            "{name} has shape {:?}, expected {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}
