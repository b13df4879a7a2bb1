//! RIFF/WAVE reading and writing for mono PCM16 and IEEE float32.

use std::fs;
use std::path::Path;

use super::{AudioError, Waveform};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;

/// Sample encoding used by [`save_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Pcm16,
    Float32,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let bytes = fs::read(path.as_ref())?;
    decode_wav(&bytes)
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>, encoding: Encoding) -> Result<(), AudioError> {
    fs::write(path.as_ref(), encode_wav(w, encoding))?;
    Ok(())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    decode_wav_encoded(bytes).map(|(w, _)| w)
}

/// Decodes a WAV file and reports how its samples were stored.
pub fn decode_wav_encoded(bytes: &[u8]) -> Result<(Waveform, Encoding), AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Malformed("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AudioError::Malformed(format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Malformed("fmt chunk too short".into()));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| AudioError::Malformed("data chunk before fmt chunk".into()))?;
                if channels != 1 {
                    return Err(AudioError::Channels(channels));
                }
                if rate == 0 {
                    return Err(AudioError::Malformed("zero sample rate".into()));
                }
                let data = &bytes[body..end];
                let (samples, encoding) = match (format, bits) {
                    (FORMAT_PCM, 16) => (
                        data.chunks_exact(2)
                            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                            .collect(),
                        Encoding::Pcm16,
                    ),
                    (FORMAT_FLOAT, 32) => (
                        data.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                        Encoding::Float32,
                    ),
                    _ => return Err(AudioError::Encoding { format, bits }),
                };
                return Ok((Waveform::new(samples, rate), encoding));
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(AudioError::Malformed("no data chunk".into()))
}

pub fn encode_wav(w: &Waveform, encoding: Encoding) -> Vec<u8> {
    let (format, bits) = match encoding {
        Encoding::Pcm16 => (FORMAT_PCM, 16u16),
        Encoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block = bits / 8;
    let data_len = w.samples.len() as u32 * block as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        // NaN clamps to silence.
        let s = if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) };
        match encoding {
            Encoding::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            Encoding::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}
