use super::{GradError, Scalar, Tensor};

/// Moment accumulators for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed state for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            second: first.clone(),
            first,
        }
    }

    /// Applies one update. Nothing is modified if a gradient is non-finite or
    /// shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<(), GradError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(GradError::Shape(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(GradError::Shape(format!(
                    "adam: parameter {i} shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(GradError::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if !(lr > 0.0) {
            return Err(GradError::Shape(format!("adam: learning rate {lr} must be positive")));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = b1 * md[k] + (one - b1) * gv;
                vd[k] = b2 * vd[k] + (one - b2) * gv * gv;
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
