//! The attacker transform and the two frozen classifiers.

mod attacker;
mod classifier;
mod params;

pub use attacker::{AttackerConfig, AttackerNet};
pub use classifier::{ClassifierConfig, ClassifierKind, PhonemeNet, SincClassifier, SpeakerNet};
pub use params::{BatchNorm, ParamStore};

use thiserror::Error;

use crate::grad::{BatchStats, GradError, Scalar, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("expected {expected}-sample frames, got {got}")]
    FrameLength { expected: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
}

/// Whether batch norm uses batch statistics (and records them) or the
/// running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of recording one forward pass on a tape.
#[derive(Debug)]
pub struct Forward<T> {
    pub output: Var,
    /// Parameter leaves, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// Train-mode statistics per batch-norm layer, in layer order.
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Class scores of one frame with its two highest-scoring indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub values: Vec<T>,
    pub first: usize,
    pub second: usize,
}

impl<T: Scalar> Logits<T> {
    /// Ranks the scores; ties go to the lowest index. Needs two classes.
    pub fn new(values: Vec<T>) -> Result<Self, ModelError> {
        if values.len() < 2 {
            return Err(ModelError::Config("logits need at least two classes".into()));
        }
        let mut first = 0;
        for (i, v) in values.iter().enumerate() {
            if *v > values[first] {
                first = i;
            }
        }
        let mut second = if first == 0 { 1 } else { 0 };
        for (i, v) in values.iter().enumerate() {
            if i != first && *v > values[second] {
                second = i;
            }
        }
        Ok(Self { values, first, second })
    }

    pub fn rows(values: &[T], classes: usize) -> Result<Vec<Self>, ModelError> {
        values.chunks(classes).map(|r| Self::new(r.to_vec())).collect()
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }
}

/// Sentence-level speaker decision: argmax of the mean per-frame
/// log-softmax, ties to the lowest index.
pub fn sentence_decision<T: Scalar>(frames: &[Logits<T>]) -> Result<usize, ModelError> {
    let first = frames.first().ok_or(ModelError::Empty)?;
    let classes = first.classes();
    let mut mean = vec![0.0f64; classes];
    for f in frames {
        if f.classes() != classes {
            return Err(ModelError::Config("frames disagree on class count".into()));
        }
        let row: Vec<f64> = f.values.iter().map(|v| v.as_f64()).collect();
        for (m, v) in mean.iter_mut().zip(crate::grad::kernels::log_softmax_rows(&row, classes)) {
            *m += v;
        }
    }
    let mut best = 0;
    for (i, v) in mean.iter().enumerate() {
        if *v > mean[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_ranking_and_ties() {
        let l = Logits::new(vec![3.0f32, 1.0, 0.5]).unwrap();
        assert_eq!((l.first, l.second), (0, 1));
        let t = Logits::new(vec![1.0f32, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!((t.first, t.second), (1, 2));
        let z = Logits::new(vec![0.0f64; 3]).unwrap();
        assert_eq!((z.first, z.second), (0, 1));
        let s = Logits::new(vec![3.0f32 + 10.0, 11.0, 10.5]).unwrap();
        assert_eq!((s.first, s.second), (0, 1));
        assert!(Logits::new(vec![1.0f32]).is_err());
    }

    #[test]
    fn sentence_decision_rules() {
        let one = Logits::new(vec![0.1f32, 0.9, 0.3]).unwrap();
        assert_eq!(sentence_decision(std::slice::from_ref(&one)).unwrap(), 1);
        let frames: Vec<_> = [[5.0f32, 0.0, 1.0], [0.0, 0.2, 0.1], [4.0, 1.0, 0.0]]
            .iter()
            .map(|r| Logits::new(r.to_vec()).unwrap())
            .collect();
        let d = sentence_decision(&frames).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        assert_eq!(d, sentence_decision(&rev).unwrap());
        assert_eq!(d, 0);
        assert_eq!(sentence_decision::<f32>(&[]), Err(ModelError::Empty));
    }
}
