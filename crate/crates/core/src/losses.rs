//! Attack objective: speaker margin, phoneme KL, perturbation hinge, and
//! their weighted total.
//!
//! Each term has a plain form over slices (used for reporting and tests)
//! and a tape form that records the batch-mean loss for backpropagation.

use thiserror::Error;

use crate::grad::{kernels, GradError, Scalar, Tape, Var};
use crate::models::{Logits, ModelError};

/// Logs are clamped below at `ln(LOG_FLOOR)` inside the KL term.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackLossConfig {
    pub lambda_phn: f64,
    pub lambda_norm: f64,
    pub margin: f64,
    /// Target speaker for a targeted attack; `None` is non-targeted.
    pub target: Option<usize>,
}

impl Default for AttackLossConfig {
    fn default() -> Self {
        Self {
            lambda_phn: 1.0,
            lambda_norm: 1000.0,
            margin: 0.01,
            target: None,
        }
    }
}

impl AttackLossConfig {
    pub fn validate(&self, num_speakers: usize) -> Result<(), LossError> {
        if !(self.lambda_phn >= 0.0 && self.lambda_phn.is_finite()) {
            return Err(LossError::Config(format!("lambda_phn must be >= 0, got {}", self.lambda_phn)));
        }
        if !(self.lambda_norm >= 0.0 && self.lambda_norm.is_finite()) {
            return Err(LossError::Config(format!("lambda_norm must be >= 0, got {}", self.lambda_norm)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LossError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if let Some(t) = self.target {
            check_index(t, num_speakers)?;
        }
        Ok(())
    }
}

/// Loss components of one step and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_spk: f64,
    pub l_phn: f64,
    pub l_norm: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Whether `l_total` equals the weighted sum of the parts within `rel`.
    pub fn is_consistent(&self, cfg: &AttackLossConfig, rel: f64) -> bool {
        let sum = self.l_spk + cfg.lambda_phn * self.l_phn + cfg.lambda_norm * self.l_norm;
        (self.l_total - sum).abs() <= rel * sum.abs().max(self.l_total.abs()).max(f64::MIN_POSITIVE)
    }

    pub fn all_finite(&self) -> bool {
        [self.l_spk, self.l_phn, self.l_norm, self.l_total].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_total={:.6e} l_spk={:.6e} l_phn={:.6e} l_norm={:.6e}",
            self.l_total, self.l_spk, self.l_phn, self.l_norm
        )
    }
}

fn check_index(index: usize, classes: usize) -> Result<(), LossError> {
    if index >= classes {
        return Err(LossError::ClassIndex { index, classes });
    }
    Ok(())
}

/// Margin of the true speaker over the runner-up while it still wins;
/// zero once the prediction has moved.
pub fn l_spk_nontargeted<T: Scalar>(logits: &Logits<T>, y: usize) -> Result<f64, LossError> {
    check_index(y, logits.classes())?;
    Ok(if logits.first == y {
        (logits.values[logits.first] - logits.values[logits.second]).as_f64()
    } else {
        0.0
    })
}

/// Gap between the winning class and the target; zero once the target wins.
pub fn l_spk_targeted<T: Scalar>(logits: &Logits<T>, target: usize) -> Result<f64, LossError> {
    check_index(target, logits.classes())?;
    Ok(if logits.first != target {
        (logits.values[logits.first] - logits.values[target]).as_f64()
    } else {
        0.0
    })
}

/// `KL(p_clean || p_adv)` with both logs clamped below at `ln 1e-8`.
pub fn l_phn<T: Scalar>(p_clean: &[T], p_adv: &[T]) -> Result<f64, LossError> {
    if p_clean.len() != p_adv.len() {
        return Err(LossError::Length(p_clean.len(), p_adv.len()));
    }
    let floor = LOG_FLOOR.ln();
    Ok(p_clean
        .iter()
        .zip(p_adv)
        .map(|(p, q)| {
            let (p, q) = (p.as_f64(), q.as_f64());
            p * (p.ln().max(floor) - q.ln().max(floor))
        })
        .sum())
}

/// Mean of `max(|s - s_adv| - m, 0)^2` over samples.
pub fn l_norm<T: Scalar>(s: &[T], s_adv: &[T], m: f64) -> Result<f64, LossError> {
    if s.len() != s_adv.len() {
        return Err(LossError::Length(s.len(), s_adv.len()));
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = s
        .iter()
        .zip(s_adv)
        .map(|(a, b)| ((a.as_f64() - b.as_f64()).abs() - m).max(0.0).powi(2))
        .sum();
    Ok(sum / s.len() as f64)
}

/// Weighted total of already computed components.
pub fn l_total(l_spk: f64, l_phn: f64, l_norm: f64, cfg: &AttackLossConfig) -> LossBreakdown {
    LossBreakdown {
        l_spk,
        l_phn,
        l_norm,
        l_total: l_spk + cfg.lambda_phn * l_phn + cfg.lambda_norm * l_norm,
    }
}

/// Speaker term for one frame, choosing the targeted form when a target is set.
pub fn l_spk<T: Scalar>(logits: &Logits<T>, y: usize, target: Option<usize>) -> Result<f64, LossError> {
    match target {
        Some(t) => l_spk_targeted(logits, t),
        None => l_spk_nontargeted(logits, y),
    }
}

// -------------------------------------------------------------------------
// Tape forms (batch means)
// -------------------------------------------------------------------------

/// Batch-mean speaker term over `[batch, classes]` logits. Each frame takes
/// its own branch; frames already fooled contribute no gradient.
pub fn spk_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    target: Option<usize>,
) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::Length(shape.first().copied().unwrap_or(0), labels.len()));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let inv = T::from_f64_lossy(1.0 / batch as f64);
    let mut coef = vec![T::zero(); batch * classes];
    for (b, &y) in labels.iter().enumerate() {
        let row = &tape.value(logits).data()[b * classes..(b + 1) * classes];
        let l = Logits::new(row.to_vec())?;
        let other = match target {
            Some(t) => {
                check_index(t, classes)?;
                (l.first != t).then_some(t)
            }
            None => {
                check_index(y, classes)?;
                (l.first == y).then_some(l.second)
            }
        };
        if let Some(o) = other {
            coef[b * classes + l.first] = coef[b * classes + l.first] + inv;
            coef[b * classes + o] = coef[b * classes + o] - inv;
        }
    }
    let weighted = tape.mul_const(logits, &coef)?;
    Ok(tape.sum(weighted, None)?)
}

/// Batch-mean KL from constant clean posteriors (`[batch × classes]`) to
/// the softmax of adversarial logits.
pub fn phn_loss<T: Scalar>(tape: &mut Tape<T>, p_clean: &[T], adv_logits: Var) -> Result<Var, LossError> {
    let shape = tape.shape(adv_logits).to_vec();
    let n: usize = shape.iter().product();
    if shape.len() != 2 || p_clean.len() != n {
        return Err(LossError::Length(p_clean.len(), n));
    }
    let batch = shape[0] as f64;
    let floor = LOG_FLOOR.ln();
    let log_q = tape.log_softmax(adv_logits)?;
    let log_q = tape.clamp_min(log_q, floor);
    let neg_p: Vec<T> = p_clean.iter().map(|&p| T::from_f64_lossy(-p.as_f64() / batch)).collect();
    let cross = tape.mul_const(log_q, &neg_p)?;
    let cross = tape.sum(cross, None)?;
    let entropy_part: f64 = p_clean
        .iter()
        .map(|p| {
            let p = p.as_f64();
            p * p.ln().max(floor)
        })
        .sum::<f64>()
        / batch;
    let kl = tape.add_scalar(cross, entropy_part);
    // Rounding can leave a near-zero divergence slightly negative.
    Ok(tape.clamp_min(kl, 0.0))
}

/// Mean two-sided hinge on the raw-amplitude perturbation.
pub fn norm_loss<T: Scalar>(tape: &mut Tape<T>, clean: Var, adv: Var, margin: f64) -> Result<Var, LossError> {
    let d = tape.sub(adv, clean)?;
    let d = tape.abs(d);
    let d = tape.add_scalar(d, -margin);
    let d = tape.clamp_min(d, 0.0);
    let d = tape.square(d);
    Ok(tape.mean(d, None)?)
}

/// Recorded total loss and its components.
#[derive(Clone, Copy, Debug)]
pub struct AttackLoss {
    pub total: Var,
    pub spk: Var,
    pub phn: Var,
    pub norm: Var,
}

impl AttackLoss {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>, cfg: &AttackLossConfig) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        let b = l_total(v(self.spk), v(self.phn), v(self.norm), cfg);
        LossBreakdown {
            l_total: v(self.total),
            ..b
        }
    }
}

/// Combines the recorded terms into the weighted total.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spk: Var,
    phn: Var,
    norm: Var,
    cfg: &AttackLossConfig,
) -> Result<AttackLoss, LossError> {
    let wp = tape.scale(phn, cfg.lambda_phn);
    let wn = tape.scale(norm, cfg.lambda_norm);
    let t = tape.add(spk, wp)?;
    let total = tape.add(t, wn)?;
    Ok(AttackLoss { total, spk, phn, norm })
}

/// Log-softmax of each row, as plain values.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    kernels::log_softmax_rows(logits, logits.len())
}
