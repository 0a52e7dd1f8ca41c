use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A learnable tensor plus whether it participates in weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub tensor: Tensor<T>,
    pub decay: bool,
}

/// Per-entry RMSProp accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSlot<T: Scalar> {
    pub mean_square: Vec<T>,
    pub momentum: Vec<T>,
}

/// Named gradients keyed by parameter name, in graph order.
pub type Gradients<T> = IndexMap<String, Vec<T>>;

/// Ordered, uniquely named learnable tensors with their optimizer state.
///
/// Non-learnable running statistics (batch-norm means/variances) live in
/// `buffers`; the optimizer never touches them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T: Scalar> {
    entries: IndexMap<String, ParamEntry<T>>,
    optimizer_state: IndexMap<String, OptimizerSlot<T>>,
    buffers: IndexMap<String, Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            optimizer_state: IndexMap::new(),
            buffers: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter name `{name}`")));
        }
        let n = tensor.numel();
        self.entries.insert(name.to_string(), ParamEntry { tensor, decay });
        self.optimizer_state.insert(
            name.to_string(),
            OptimizerSlot {
                mean_square: vec![T::zero(); n],
                momentum: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    /// Weight drawn from a normal truncated at two standard deviations.
    pub fn insert_truncated_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        });
        self.insert(name, t, true)
    }

    pub fn insert_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::lit(value)), false)
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(Error::Param(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("unknown buffer `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn optimizer_state(&self) -> impl Iterator<Item = (&str, &OptimizerSlot<T>)> {
        self.optimizer_state.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn slot(&self, name: &str) -> Option<&OptimizerSlot<T>> {
        self.optimizer_state.get(name)
    }

    pub(crate) fn slot_mut(&mut self, name: &str) -> Option<&mut OptimizerSlot<T>> {
        self.optimizer_state.get_mut(name)
    }

    pub(crate) fn entry_and_slot_mut(&mut self, name: &str) -> Option<(&mut ParamEntry<T>, &mut OptimizerSlot<T>)> {
        let e = self.entries.get_mut(name)?;
        let s = self.optimizer_state.get_mut(name)?;
        Some((e, s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Sum of squares over every decayed entry.
    pub fn decay_sum_squares(&self) -> T {
        self.entries
            .values()
            .filter(|e| e.decay)
            .map(|e| e.tensor.sum_squares())
            .fold(T::zero(), |a, b| a + b)
    }

    /// Exponential moving update of running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_buffer(&mut self, name: &str, batch: &[T], momentum: T) -> Result<()> {
        let buf = self.buffer_mut(name)?;
        if buf.numel() != batch.len() {
            return Err(Error::shape("update_buffer", buf.shape(), &[batch.len()]));
        }
        for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
            *r = momentum * *r + (T::one() - momentum) * b;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a checksum over names, shapes and value bits of
    /// parameters and buffers.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, e) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            e.tensor.shape().iter().for_each(|d| bytes.extend_from_slice(&d.to_le_bytes()));
            e.tensor.data().iter().for_each(|v| v.push_le(&mut bytes));
        }
        for (name, t) in &self.buffers {
            bytes.extend_from_slice(name.as_bytes());
            t.data().iter().for_each(|v| v.push_le(&mut bytes));
        }
        fnv1a(&bytes)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
