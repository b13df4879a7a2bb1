//! Recorded computation and reverse-mode gradient propagation.
//!
//! Every primitive appends one node to the [`Tape`]. Node indices are the
//! recording order, so walking indices downwards is a valid reverse
//! topological order and each primitive is visited exactly once.

use super::kernels::{self, ConvGeom};
use super::{GradError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction kind for [`Tape::sum`], [`Tape::mean`] and [`Tape::max`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    LeakyRelu(T),
    Abs,
    Square,
    ClampMin(T),
    Scale(T),
    AddScalar(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Unary {
        x: usize,
        f: Unary<T>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst {
        x: usize,
        c: Vec<T>,
    },
    RowScale {
        x: usize,
        factors: Vec<T>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    LogSoftmax {
        x: usize,
    },
    Reduce {
        x: usize,
        kind: Reduce,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Gather {
        x: usize,
        cols: usize,
        idx: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    SincBank {
        low: usize,
        band: usize,
        params: SincBankParams,
        /// Per filter: (d f1/d low, d f2/d low, d f2/d band) in normalized units.
        jac: Vec<[T; 3]>,
        f1: Vec<T>,
        f2: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::Affine { .. } => "affine",
            Op::Unary { .. } => "unary",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::RowScale { .. } => "row_scale",
            Op::MaxPool { .. } => "max_pool1d",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reduce { .. } => "reduce",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::SincBank { .. } => "sinc_bank",
        }
    }
}

/// Parameters of a band-pass sinc filter bank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SincBankParams {
    pub length: usize,
    pub sample_rate: f64,
    /// Minimum low cutoff and minimum bandwidth, Hz.
    pub floor_hz: f64,
}

/// Statistics of a train-mode batch norm call, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over (batch, length).
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

/// How [`Tape::batch_norm`] normalizes.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// An ordered record of executed primitives with their values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` collect
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Hash of every piecewise decision in the recorded graph: the side of
    /// each kink for rectifiers, `abs` and clamps, the winners of max
    /// reductions and pools, and the constant factors of `mul_const`.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Unary { x, f } => {
                    let lo = match f {
                        Unary::LeakyRelu(_) | Unary::Abs => T::zero(),
                        Unary::ClampMin(lo) => *lo,
                        _ => continue,
                    };
                    i.hash(&mut h);
                    for &v in self.data(*x) {
                        (v > lo).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } | Op::Reduce { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::MulConst { c, .. } => {
                    i.hash(&mut h);
                    for v in c {
                        v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    // ---------------------------------------------------------------------
    // Primitives
    // ---------------------------------------------------------------------

    /// 1-D cross-correlation over `[batch, ch_in, len]` with zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(kernel).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(GradError::Shape(format!(
                "conv1d input {xs:?} incompatible with kernel {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(GradError::Shape(format!(
                    "conv1d bias {:?} does not match {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, dilation, padding)?;
        let bias_data = bias.map(|b| self.data(b.0));
        let out = kernels::conv1d_forward(self.data(x.0), self.data(kernel.0), bias_data, &geom);
        let mut inputs = vec![x.0, kernel.0];
        inputs.extend(bias.map(|b| b.0));
        let rg = self.any_grad(&inputs);
        let value = Tensor::new(vec![geom.batch, geom.ch_out, geom.len_out], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv1d {
                x: x.0,
                w: kernel.0,
                b: bias.map(|b| b.0),
                geom,
            },
        ))
    }

    /// Per-channel normalization of `[batch, ch, len]` followed by a
    /// `gamma`/`beta` affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>), GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(GradError::Shape(format!("batchnorm1d expects 3-D input, got {xs:?}")));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(GradError::Shape(format!("batchnorm1d affine must have {c} channels")));
        }
        let eps = T::from_f64_lossy(eps);
        let xd = self.data(x.0);
        let count = b * l;
        let (mean, var, training) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return Err(GradError::Shape(
                        "batchnorm1d batch statistics need more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let nt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s = s + xd[(bi * c + ch) * l..][..l].iter().copied().sum::<T>();
                    }
                    let m = s / nt;
                    let mut v = T::zero();
                    for bi in 0..b {
                        for &val in &xd[(bi * c + ch) * l..][..l] {
                            v = v + (val - m) * (val - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / nt;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(GradError::Shape(format!(
                        "batchnorm1d running statistics must have {c} channels"
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma.0);
        let be = self.data(beta.0);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for (o, &v) in out[base..base + l].iter_mut().zip(&xd[base..base + l]) {
                    *o = (v - m) * is * gg + bb;
                }
            }
        }
        let rg = self.any_grad(&[x.0, gamma.0, beta.0]);
        let batch_stats = training.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            Tensor::new(xs, out)?,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                training,
            },
        );
        Ok((v, batch_stats))
    }

    /// `x·weightᵀ + bias` for `x: [batch, n]`, `weight: [m, n]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return Err(GradError::Shape(format!(
                "affine input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(self.data(bias.0));
        }
        super::scalar::gemm(batch, n, m, self.data(x.0), false, self.data(weight.0), true, T::one(), &mut out);
        let rg = self.any_grad(&[x.0, weight.0, bias.0]);
        Ok(self.push(
            Tensor::new(vec![batch, m], out)?,
            rg,
            Op::Affine {
                x: x.0,
                w: weight.0,
                b: bias.0,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: Unary<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let apply = |v: T| match f {
            Unary::LeakyRelu(s) => {
                if v >= T::zero() {
                    v
                } else {
                    s * v
                }
            }
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::ClampMin(lo) => v.max(lo),
            Unary::Scale(c) => v * c,
            Unary::AddScalar(c) => v + c,
        };
        let data = src.data().iter().map(|&v| apply(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Unary { x: x.0, f })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu(T::zero()))
    }

    /// `max(x, slope·x)`; the gradient at exactly 0 takes the positive branch.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(T::from_f64_lossy(slope)))
    }

    /// Absolute value; gradient +1 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// `max(x, lo)`; values clamped strictly below `lo` get zero gradient.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Unary::ClampMin(T::from_f64_lossy(lo)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(T::from_f64_lossy(c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(T::from_f64_lossy(c)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<Vec<T>, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.data(a.0), self.data(b.0));
        Ok(match name {
            "add" => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
            "sub" => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
            _ => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let data = self.binary(a, b, "add")?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let data = self.binary(a, b, "sub")?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let data = self.binary(a, b, "mul")?;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Mul(a.0, b.0)))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, c: &[T]) -> Result<Var, GradError> {
        if c.len() != self.value(x).len() {
            return Err(GradError::Shape(format!(
                "mul_const: {} constants for {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let data = self.data(x.0).iter().zip(c).map(|(&v, &k)| v * k).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::MulConst { x: x.0, c: c.to_vec() }))
    }

    /// Multiplies every element under leading index `i` by `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: &[T]) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(GradError::Shape(format!(
                "row_scale: {} factors for {shape:?}",
                factors.len()
            )));
        }
        let row = self.value(x).len() / factors.len().max(1);
        let data = self
            .data(x.0)
            .chunks(row.max(1))
            .zip(factors)
            .flat_map(|(r, &f)| r.iter().map(move |&v| v * f))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::RowScale {
                x: x.0,
                factors: factors.to_vec(),
            },
        ))
    }

    /// Non-overlapping max pooling along the last axis of `[batch, ch, len]`.
    /// A trailing remainder shorter than `size` is dropped; ties pick the
    /// lowest index.
    pub fn max_pool1d(&mut self, x: Var, size: usize) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || size == 0 || xs[2] < size {
            return Err(GradError::Shape(format!("max_pool1d({size}) on {xs:?}")));
        }
        let (rows, l) = (xs[0] * xs[1], xs[2]);
        let lout = l / size;
        let xd = self.data(x.0);
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for t in 0..lout {
                let start = r * l + t * size;
                let mut best = start;
                for i in start + 1..start + size {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], lout], out)?,
            rg,
            Op::MaxPool { x: x.0, argmax },
        ))
    }

    /// Row-wise log-softmax of `[rows, classes]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(GradError::Shape(format!("log_softmax expects [rows, classes], got {xs:?}")));
        }
        let out = kernels::log_softmax_rows(self.data(x.0), xs[1]);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(xs, out)?, rg, Op::LogSoftmax { x: x.0 }))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, kind: Reduce) -> Result<(Var, Vec<usize>), GradError> {
        let xs = self.shape(x).to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, xs.iter().product(), 1, vec![1]),
            Some(a) if a < xs.len() => {
                let mut s = xs.clone();
                s.remove(a);
                if s.is_empty() {
                    s.push(1);
                }
                (xs[..a].iter().product(), xs[a], xs[a + 1..].iter().product(), s)
            }
            Some(a) => {
                return Err(GradError::Axis(format!("axis {a} out of range for {xs:?}")));
            }
        };
        if n == 0 {
            return Err(GradError::Axis("reduction over an empty axis".into()));
        }
        let xd = self.data(x.0);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        let nt = T::from_usize(n).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let slot = &mut out[o * inner + i];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + xd[at(j)];
                        }
                        *slot = if kind == Reduce::Mean { s / nt } else { s };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            if xd[at(j)] > xd[at(best)] {
                                best = j;
                            }
                        }
                        *slot = xd[at(best)];
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let global: Vec<usize> = argmax
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                let (o, i) = (k / inner, k % inner);
                (o * n + j) * inner + i
            })
            .collect();
        let v = self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Reduce {
                x: x.0,
                kind,
                outer,
                n,
                inner,
                argmax: global,
            },
        );
        Ok((v, argmax))
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, GradError> {
        self.reduce(x, axis, Reduce::Sum).map(|r| r.0)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, GradError> {
        self.reduce(x, axis, Reduce::Mean).map(|r| r.0)
    }

    /// Maximum over `axis` plus the position of the maximum along that axis.
    /// Ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<(Var, Vec<usize>), GradError> {
        self.reduce(x, axis, Reduce::Max)
    }

    /// Picks `x[r, idx[r]]` from a `[rows, cols]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != idx.len() || idx.iter().any(|&i| i >= xs[1]) {
            return Err(GradError::Shape(format!("gather of {} indices from {xs:?}", idx.len())));
        }
        let xd = self.data(x.0);
        let out = idx.iter().enumerate().map(|(r, &i)| xd[r * xs[1] + i]).collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            rg,
            Op::Gather {
                x: x.0,
                cols: xs[1],
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { x: x.0 }))
    }

    /// Builds a `[filters, 1, length]` bank of Hamming-windowed band-pass
    /// sinc kernels from per-filter low cutoffs and bandwidths in Hz.
    ///
    /// Cutoffs are reparameterized as `f1 = |low| + floor` and
    /// `f2 = f1 + |band| + floor`, with `f1` capped at `nyquist - floor` and
    /// `f2` at the Nyquist frequency.
    pub fn sinc_bank(&mut self, low: Var, band: Var, params: SincBankParams) -> Result<Var, GradError> {
        let n = self.value(low).len();
        if self.shape(low) != [n] || self.shape(band) != [n] || params.length.is_multiple_of(2) {
            return Err(GradError::Shape(format!(
                "sinc_bank needs matching 1-D cutoffs and odd length, got {:?}/{:?} length {}",
                self.shape(low),
                self.shape(band),
                params.length
            )));
        }
        let fs = params.sample_rate;
        let nyq = fs / 2.0;
        let mut f1s = Vec::with_capacity(n);
        let mut f2s = Vec::with_capacity(n);
        let mut jac = Vec::with_capacity(n);
        for (&lo, &bw) in self.data(low.0).iter().zip(self.data(band.0)) {
            let (lo, bw) = (lo.as_f64(), bw.as_f64());
            let sl = if lo >= 0.0 { 1.0 } else { -1.0 };
            let sb = if bw >= 0.0 { 1.0 } else { -1.0 };
            let raw1 = lo.abs() + params.floor_hz;
            let cap1 = nyq - params.floor_hz;
            let (f1, d1) = if raw1 > cap1 { (cap1, 0.0) } else { (raw1, sl) };
            let raw2 = f1 + bw.abs() + params.floor_hz;
            let (f2, d2l, d2b) = if raw2 > nyq { (nyq, 0.0, 0.0) } else { (raw2, d1, sb) };
            f1s.push(T::from_f64_lossy(f1 / fs));
            f2s.push(T::from_f64_lossy(f2 / fs));
            jac.push([
                T::from_f64_lossy(d1 / fs),
                T::from_f64_lossy(d2l / fs),
                T::from_f64_lossy(d2b / fs),
            ]);
        }
        let out = kernels::sinc_bank(&f1s, &f2s, params.length);
        let rg = self.any_grad(&[low.0, band.0]);
        Ok(self.push(
            Tensor::new(vec![n, 1, params.length], out)?,
            rg,
            Op::SincBank {
                low: low.0,
                band: band.0,
                params,
                jac,
                f1: f1s,
                f2: f2s,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every reachable leaf that requires
    /// gradients. Leaf gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.value(loss).len() != 1 {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, contrib: Vec<T>| match &mut grads[j] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw) = kernels::conv1d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    geom,
                    needs(*x),
                    needs(*w),
                );
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut gb = vec![T::zero(); geom.ch_out];
                    for (row, slot) in g.chunks(geom.len_out).zip((0..).map(|r| r % geom.ch_out)) {
                        gb[slot] = gb[slot] + row.iter().copied().sum::<T>();
                    }
                    acc(b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let xs = nodes[*x].value.shape();
                let (bsz, c, l) = (xs[0], xs[1], xs[2]);
                let xd = self.data(*x);
                let gam = self.data(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        for t in base..base + l {
                            let xhat = (xd[t] - mean[ch]) * inv_std[ch];
                            sum_g[ch] = sum_g[ch] + g[t];
                            sum_gx[ch] = sum_gx[ch] + g[t] * xhat;
                        }
                    }
                }
                if needs(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    let nt = T::from_usize(bsz * l).unwrap();
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let base = (bi * c + ch) * l;
                            let k = gam[ch] * inv_std[ch];
                            for t in base..base + l {
                                gx[t] = if *training {
                                    let xhat = (xd[t] - mean[ch]) * inv_std[ch];
                                    k * (g[t] - sum_g[ch] / nt - xhat * sum_gx[ch] / nt)
                                } else {
                                    k * g[t]
                                };
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if needs(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if needs(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Affine { x, w, b } => {
                let xs = nodes[*x].value.shape();
                let (batch, n) = (xs[0], xs[1]);
                let m = nodes[*w].value.shape()[0];
                if needs(*x) {
                    let mut gx = vec![T::zero(); batch * n];
                    super::scalar::gemm(batch, m, n, g, false, self.data(*w), false, T::zero(), &mut gx);
                    acc(*x, gx);
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); m * n];
                    super::scalar::gemm(m, batch, n, g, true, self.data(*x), false, T::zero(), &mut gw);
                    acc(*w, gw);
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s = *s + v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Unary { x, f } => {
                let xd = self.data(*x);
                let gx = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let d = match *f {
                            Unary::LeakyRelu(s) => {
                                if v >= T::zero() {
                                    T::one()
                                } else {
                                    s
                                }
                            }
                            Unary::Abs => {
                                if v >= T::zero() {
                                    T::one()
                                } else {
                                    -T::one()
                                }
                            }
                            Unary::Square => v + v,
                            Unary::ClampMin(lo) => {
                                if v >= lo {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => T::one(),
                        };
                        d * gv
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    acc(*a, g.iter().zip(bd).map(|(&gv, &q)| gv * q).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(ad).map(|(&gv, &p)| gv * p).collect());
                }
            }
            Op::MulConst { x, c } => {
                acc(*x, g.iter().zip(c).map(|(&gv, &k)| gv * k).collect());
            }
            Op::RowScale { x, factors } => {
                let row = g.len() / factors.len().max(1);
                let gx = g
                    .chunks(row.max(1))
                    .zip(factors)
                    .flat_map(|(r, &f)| r.iter().map(move |&v| v * f))
                    .collect();
                acc(*x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); nodes[*x].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
                acc(*x, gx);
            }
            Op::LogSoftmax { x } => {
                let classes = nodes[*x].value.shape()[1];
                let out = nodes[i].value.data();
                let mut gx = Vec::with_capacity(out.len());
                for (orow, grow) in out.chunks(classes).zip(g.chunks(classes)) {
                    let gsum: T = grow.iter().copied().sum();
                    gx.extend(orow.iter().zip(grow).map(|(&o, &gv)| gv - o.exp() * gsum));
                }
                acc(*x, gx);
            }
            Op::Reduce {
                x,
                kind,
                outer,
                n,
                inner,
                argmax,
            } => {
                let mut gx = vec![T::zero(); nodes[*x].value.len()];
                match kind {
                    Reduce::Max => {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gx[src] = gx[src] + gv;
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let scale = if *kind == Reduce::Mean {
                            T::one() / T::from_usize(*n).unwrap()
                        } else {
                            T::one()
                        };
                        for o in 0..*outer {
                            for j in 0..*n {
                                for k in 0..*inner {
                                    gx[(o * n + j) * inner + k] = g[o * inner + k] * scale;
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, cols, idx } => {
                let mut gx = vec![T::zero(); nodes[*x].value.len()];
                for (r, (&c, &gv)) in idx.iter().zip(g).enumerate() {
                    gx[r * cols + c] = gv;
                }
                acc(*x, gx);
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::SincBank {
                low,
                band,
                params,
                jac,
                f1,
                f2,
            } => {
                let (d1, d2) = kernels::sinc_bank_cutoff_grads(f1, f2, params.length, g);
                if needs(*low) {
                    acc(
                        *low,
                        jac.iter()
                            .zip(d1.iter().zip(&d2))
                            .map(|(j, (&a, &b))| a * j[0] + b * j[1])
                            .collect(),
                    );
                }
                if needs(*band) {
                    acc(*band, jac.iter().zip(&d2).map(|(j, &b)| b * j[2]).collect());
                }
            }
        }
    }
}
