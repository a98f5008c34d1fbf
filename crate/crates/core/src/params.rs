//! Named parameter and running-statistics storage shared by every part of a network.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub(crate) usize);

/// A trainable (or EMA-only) tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated across every backward pass since the last optimizer step.
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
    /// `false` for parameters that change only through EMA; backward never
    /// writes their gradient.
    pub trainable: bool,
    /// Number of backward passes that reached this parameter since the
    /// counters were last reset.
    pub accumulations: u64,
}

/// Batch-norm running mean/variance for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Element> RunningStats<T> {
    /// Mean 0, variance 1: usable in eval mode before any training step.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    /// Stats that refuse eval-mode use until a train-mode pass fills them.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            initialized: false,
            ..RunningStats::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    stats: Vec<NamedStats<T>>,
    names: HashMap<String, ParamId>,
    stat_names: HashMap<String, StatsId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
            names: HashMap::new(),
            stat_names: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            trainable,
            accumulations: 0,
        });
        self.names.insert(name, id);
        Ok(id)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, stats: RunningStats<T>) -> Result<StatsId> {
        let name = name.into();
        if self.stat_names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate running-stats name `{name}`")));
        }
        let id = StatsId(self.stats.len());
        self.stats.push(NamedStats {
            name: name.clone(),
            stats,
        });
        self.stat_names.insert(name, id);
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].stats
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].stats
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn stats_id_of(&self, name: &str) -> Option<StatsId> {
        self.stat_names.get(name).copied()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn named_stats(&self) -> &[NamedStats<T>] {
        &self.stats
    }

    pub fn named_stats_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.stats
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn reset_counters(&mut self) {
        for p in &mut self.params {
            p.accumulations = 0;
        }
    }

    /// Overwrites `dst`'s value with `src`'s value; shapes must agree.
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        if self.params[src.0].value.shape() != self.params[dst.0].value.shape() {
            return Err(Error::shape(
                "copy_value",
                format!(
                    "`{}` {:?} vs `{}` {:?}",
                    self.params[src.0].name,
                    self.params[src.0].value.shape(),
                    self.params[dst.0].name,
                    self.params[dst.0].value.shape()
                ),
            ));
        }
        let value = self.params[src.0].value.clone();
        self.params[dst.0].value = value;
        Ok(())
    }

    pub fn copy_stats(&mut self, src: StatsId, dst: StatsId) -> Result<()> {
        if self.stats[src.0].stats.channels() != self.stats[dst.0].stats.channels() {
            return Err(Error::shape("copy_stats", "channel count differs"));
        }
        let stats = self.stats[src.0].stats.clone();
        self.stats[dst.0].stats = stats;
        Ok(())
    }

    /// Like [`values_bit_eq`](Self::values_bit_eq), also comparing optimizer
    /// velocities, trainability and statistics initialization.
    pub fn state_bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.values_bit_eq(other)
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.trainable == b.trainable && a.velocity.bit_eq(&b.velocity))
            && self
                .stats
                .iter()
                .zip(&other.stats)
                .all(|(a, b)| a.stats.initialized == b.stats.initialized)
    }

    /// True when every parameter value and running statistic matches `other` bitwise.
    pub fn values_bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
            && self.stats.len() == other.stats.len()
            && self.stats.iter().zip(&other.stats).all(|(a, b)| {
                a.name == b.name
                    && a.stats.mean.iter().zip(&b.stats.mean).all(|(x, y)| x.bits() == y.bits())
                    && a.stats.var.iter().zip(&b.stats.var).all(|(x, y)| x.bits() == y.bits())
            })
    }
}
