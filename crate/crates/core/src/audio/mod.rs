//! Waveforms, WAV codec, framing and peak normalization.

mod frames;
mod wav;

pub use frames::{frame_count, frame_signal, normalize_frame, FrameSet, NormalizedFrame};
pub use wav::{decode_wav, decode_wav_encoded, encode_wav, load_wav, save_wav, Encoding};

use thiserror::Error;

/// Sample rate required on every training and evaluation path.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error("expected mono audio, found {0} channels")]
    Channels(u16),
    #[error("unsupported WAV encoding (format {format}, {bits} bits)")]
    Encoding { format: u16, bits: u16 },
    #[error("sample rate {found} Hz is not supported (expected {expected} Hz)")]
    SampleRate { expected: u32, found: u32 },
    #[error("non-finite sample in input")]
    NonFinite,
}

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Errors unless the waveform is at `expected` Hz; resampling is not
    /// supported.
    pub fn ensure_rate(&self, expected: u32) -> Result<(), AudioError> {
        if self.sample_rate != expected {
            return Err(AudioError::SampleRate {
                expected,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}
