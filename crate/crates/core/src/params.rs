//! Named parameter registry and the view the forward pass reads it through.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{BnStats, Graph, Var};
use crate::tensor::{Float, Tensor};

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Names encode the module path, e.g. `block2.F.conv1.weight`
/// or `block2.bn.iter3.conv1.gamma`. Insertion order is preserved so
/// serialization is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), t.with_grad());
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("duplicate buffer `{name}`")));
        }
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds per-name gradients (as produced by [`Graph::param_grads`]).
    pub fn accumulate(&mut self, grads: &HashMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            self.param_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// How a freshly allocated parameter is filled.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// He-normal with the given fan-in.
    HeNormal(usize),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform(usize),
    Constant(f64),
}

impl Init {
    pub(crate) fn sample<T: Float, R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::HeNormal(fan_in) => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| T::cast(d.sample(rng))).collect()
            }
            Init::FanInUniform(fan_in) => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("finite bound");
                (0..n).map(|_| T::cast(d.sample(rng))).collect()
            }
            Init::Constant(c) => vec![T::cast(c); n],
        };
        Tensor::new(shape, data).expect("shape matches")
    }
}

/// Read access to parameters for one forward pass. Train access also
/// updates batch-norm running statistics.
pub struct Access<'a, T> {
    store: Store<'a, T>,
    /// Register shared weights as a separate leaf per iteration. Gradients
    /// still sum per parameter; this only exposes per-iteration
    /// contributions for inspection.
    pub untie_shared: bool,
}

enum Store<'a, T> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

impl<'a, T: Float> Access<'a, T> {
    pub fn train(store: &'a mut ParamStore<T>) -> Self {
        Self {
            store: Store::Train(store),
            untie_shared: false,
        }
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Store::Eval(store),
            untie_shared: false,
        }
    }

    pub fn untied(mut self) -> Self {
        self.untie_shared = true;
        self
    }

    pub fn is_train(&self) -> bool {
        matches!(self.store, Store::Train(_))
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.store {
            Store::Train(s) => s,
            Store::Eval(s) => s,
        }
    }

    pub fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(v) = g.param_var(name) {
            return Ok(v);
        }
        Ok(g.param(name, self.store().param(name)?))
    }

    /// A weight shared across iterations; `iteration` only matters when
    /// [`Access::untie_shared`] is set.
    pub fn shared_param(&self, g: &mut Graph<T>, name: &str, iteration: usize) -> Result<Var> {
        if !self.untie_shared {
            return self.param(g, name);
        }
        let key = format!("{name}@{iteration}");
        if let Some(v) = g.param_var(&key) {
            return Ok(v);
        }
        Ok(g.param_keyed(&key, name, self.store().param(name)?))
    }

    /// Batch norm using `{prefix}.gamma`, `{prefix}.beta` and the running
    /// statistics `{prefix}.running_mean` / `{prefix}.running_var`.
    pub fn batch_norm(&mut self, g: &mut Graph<T>, x: Var, prefix: &str, active: Option<&[bool]>) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match &mut self.store {
            Store::Train(s) => {
                let mut mean = s.buffer(&mean_name)?.data().to_vec();
                let mut var = s.buffer(&var_name)?.data().to_vec();
                let out = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnStats::Train {
                        running_mean: &mut mean,
                        running_var: &mut var,
                        active,
                    },
                )?;
                s.buffer_mut(&mean_name)?.data_mut().copy_from_slice(&mean);
                s.buffer_mut(&var_name)?.data_mut().copy_from_slice(&var);
                Ok(out)
            }
            Store::Eval(s) => g.batch_norm(
                x,
                gamma,
                beta,
                BnStats::Eval {
                    running_mean: s.buffer(&mean_name)?.data(),
                    running_var: s.buffer(&var_name)?.data(),
                },
            ),
        }
    }
}

/// Registers `{prefix}.gamma/.beta` and their running statistics.
pub(crate) fn add_batch_norm<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<()> {
    store.insert_param(&format!("{prefix}.gamma"), Tensor::ones(&[channels]))?;
    store.insert_param(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[channels]))?;
    Ok(())
}
