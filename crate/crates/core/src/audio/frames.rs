use crate::grad::Scalar;

use super::AudioError;

/// Overlapping fixed-length frames cut from one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    /// Row-major `[num_frames × frame_len]`.
    pub frames: Vec<f32>,
    pub frame_len: usize,
    pub hop: usize,
    pub source_length: usize,
}

impl FrameSet {
    pub fn num_frames(&self) -> usize {
        if self.frame_len == 0 {
            0
        } else {
            self.frames.len() / self.frame_len
        }
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.frame_len..(i + 1) * self.frame_len]
    }

    /// First source sample covered by frame `i`.
    pub fn start(&self, i: usize) -> usize {
        i * self.hop
    }
}

/// Number of whole frames in a signal; the trailing partial frame is dropped.
pub fn frame_count(source_length: usize, frame_len: usize, hop: usize) -> usize {
    if frame_len == 0 || hop == 0 || source_length < frame_len {
        0
    } else {
        (source_length - frame_len) / hop + 1
    }
}

/// Cuts `samples` into frames `[i·hop, i·hop + frame_len)`.
///
/// Panics if `frame_len` or `hop` is zero.
pub fn frame_signal(samples: &[f32], frame_len: usize, hop: usize) -> FrameSet {
    assert!(frame_len > 0 && hop > 0, "frame_len and hop must be positive");
    let n = frame_count(samples.len(), frame_len, hop);
    let mut frames = Vec::with_capacity(n * frame_len);
    for i in 0..n {
        frames.extend_from_slice(&samples[i * hop..i * hop + frame_len]);
    }
    FrameSet {
        frames,
        frame_len,
        hop,
        source_length: samples.len(),
    }
}

/// A frame divided by its peak magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFrame<T> {
    pub values: Vec<T>,
    /// Original peak magnitude; zero only for an all-zero frame.
    pub scale: T,
}

impl<T: Scalar> NormalizedFrame<T> {
    /// Maps values from the normalized domain back to the original amplitude.
    pub fn denormalize(&self, values: &[T]) -> Vec<T> {
        values.iter().map(|&v| v * self.scale).collect()
    }
}

pub fn normalize_frame<T: Scalar>(x: &[T]) -> Result<NormalizedFrame<T>, AudioError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::NonFinite);
    }
    let scale = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let values = if scale == T::zero() {
        vec![T::zero(); x.len()]
    } else {
        x.iter().map(|&v| v / scale).collect()
    };
    Ok(NormalizedFrame { values, scale })
}
