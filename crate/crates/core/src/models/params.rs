use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, ModelError};
use crate::grad::{BatchStats, NormStats, Scalar, Tape, Tensor, Var};

/// Named parameters (trainable) and buffers (running statistics) of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub(crate) fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.values.iter_mut().collect()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub(crate) fn buffer(&self, i: usize) -> &Tensor<T> {
        &self.buffers[i]
    }

    pub(crate) fn buffer_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.buffers[i]
    }

    /// Parameters followed by buffers, with their names.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    /// Replaces every parameter and buffer from `tensors`; names and shapes
    /// must all match.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<(), ModelError> {
        let slots = self
            .names
            .iter()
            .zip(self.values.iter_mut())
            .chain(self.buffer_names.iter().zip(self.buffers.iter_mut()));
        for (name, slot) in slots {
            let t = tensors
                .get(name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Copies every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }

    /// Gradients of bound parameters; zeros where backward did not reach.
    pub fn grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        bound
            .iter()
            .zip(&self.values)
            .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Little-endian bytes of every parameter and buffer, for freeze checks.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .chain(&self.buffers)
            .flat_map(|t| t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()))
            .collect()
    }
}

/// Uniform `[-bound, bound]` initializer.
pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Batch norm over `[batch, ch, len]` with running averages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bound: &[Var],
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var, ModelError> {
        let norm = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: store.buffer(self.running_mean).data(),
                var: store.buffer(self.running_var).data(),
            },
        };
        let (y, s) = tape.batch_norm(x, bound[self.gamma], bound[self.beta], norm, self.eps)?;
        stats.extend(s);
        Ok(y)
    }

    /// Folds one batch's statistics into the running averages, using the
    /// unbiased variance.
    pub(crate) fn update<T: Scalar>(&self, store: &mut ParamStore<T>, s: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let one = T::one();
        let n = s.count as f64;
        let unbias = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for (r, &v) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (one - m) * *r + m * v;
        }
        for (r, &v) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (one - m) * *r + m * v * unbias;
        }
    }
}
