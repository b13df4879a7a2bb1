use super::params::{rng, uniform, BatchNorm, ParamStore};
use super::{Forward, Mode, ModelError};
use crate::audio::normalize_frame;
use crate::grad::{BatchStats, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackerConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 3,
            dilations: vec![1, 2, 5, 2, 1],
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.dilations.len() < 2 || self.dilations.contains(&0) {
            return Err(ModelError::Config(
                "attacker needs positive channels and at least two positive dilations".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config("attacker kernel size must be odd".into()));
        }
        Ok(())
    }

    /// Input span that influences one output sample of the residual branch.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| d * (self.kernel - 1)).sum::<usize>()
    }
}

#[derive(Clone, Debug)]
struct Block {
    weight: usize,
    bias: usize,
    dilation: usize,
    norm: Option<BatchNorm>,
}

/// Fully convolutional residual network producing `x + branch(x)`.
///
/// Every block but the last is conv, batch norm, ReLU; the last is a plain
/// 32→1 conv whose weights start at zero, so a fresh net is the identity.
#[derive(Clone, Debug)]
pub struct AttackerNet<T> {
    config: AttackerConfig,
    store: ParamStore<T>,
    blocks: Vec<Block>,
}

impl<T: Scalar> AttackerNet<T> {
    pub fn new(config: AttackerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let n = config.dilations.len();
        let mut blocks = Vec::with_capacity(n);
        for (i, &dilation) in config.dilations.iter().enumerate() {
            let cin = if i == 0 { 1 } else { config.channels };
            let last = i + 1 == n;
            let cout = if last { 1 } else { config.channels };
            let shape = [cout, cin, config.kernel];
            let (w, b) = if last {
                (Tensor::zeros(&shape), Tensor::zeros(&[cout]))
            } else {
                let bound = 1.0 / ((cin * config.kernel) as f64).sqrt();
                (uniform(&mut r, &shape, bound), uniform(&mut r, &[cout], bound))
            };
            let weight = store.add(format!("block{i}.conv.weight"), w);
            let bias = store.add(format!("block{i}.conv.bias"), b);
            let norm = (!last).then(|| BatchNorm::new(&mut store, &format!("block{i}.bn"), cout));
            blocks.push(Block {
                weight,
                bias,
                dilation,
                norm,
            });
        }
        Ok(Self { config, store, blocks })
    }

    pub fn config(&self) -> &AttackerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Records the forward pass for `x: [batch, 1, len]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<Forward<T>, ModelError> {
        let params = self.store.bind(tape, trainable);
        let mut batch_stats = Vec::new();
        let output = self.forward_bound(tape, &params, x, mode, &mut batch_stats)?;
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    /// Forward pass with parameters already on the tape.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != 1 || s[2] == 0 {
            return Err(ModelError::Config(format!("attacker input must be [batch, 1, len>0], got {s:?}")));
        }
        let mut h = x;
        for b in &self.blocks {
            let pad = b.dilation * (self.config.kernel - 1) / 2;
            h = tape.conv1d(h, params[b.weight], Some(params[b.bias]), 1, b.dilation, pad)?;
            if let Some(bn) = &b.norm {
                h = bn.forward(tape, &self.store, params, h, mode, stats)?;
                h = tape.relu(h);
            }
        }
        Ok(tape.add(x, h)?)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let norms: Vec<BatchNorm> = self.blocks.iter().filter_map(|b| b.norm).collect();
        for (bn, s) in norms.iter().zip(stats) {
            bn.update(&mut self.store, s);
        }
    }

    /// Eval-mode forward on a batch of equal-length signals, row-major.
    pub fn apply_batch(&self, signals: &[T], len: usize) -> Result<Vec<T>, ModelError> {
        if len == 0 || signals.is_empty() || !signals.len().is_multiple_of(len) {
            return Err(ModelError::Empty);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![signals.len() / len, 1, len], signals.to_vec())?);
        let f = self.forward(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(f.output).data().to_vec())
    }

    /// Eval-mode forward on one signal of any length.
    pub fn apply(&self, signal: &[T]) -> Result<Vec<T>, ModelError> {
        self.apply_batch(signal, signal.len())
    }

    /// Peak-normalizes the signal, transforms it, and restores the original
    /// scale. An all-zero signal passes through unchanged.
    pub fn perturb(&self, signal: &[T]) -> Result<Vec<T>, ModelError> {
        let norm = normalize_frame(signal).map_err(|_| ModelError::Config("non-finite input signal".into()))?;
        if norm.scale == T::zero() {
            return Ok(signal.to_vec());
        }
        let out = self.apply(&norm.values)?;
        // Scale the residual rather than the output so a zero residual
        // returns the input exactly.
        Ok(signal
            .iter()
            .zip(out.iter().zip(&norm.values))
            .map(|(&s, (&o, &n))| s + (o - n) * norm.scale)
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> AttackerNet<U> {
        AttackerNet {
            config: self.config.clone(),
            store: self.store.cast(),
            blocks: self.blocks.clone(),
        }
    }
}
