//! Attack metrics: SER, PTR, SNR, a perceptual proxy, real-time factor and
//! the perturbation band spectrum.

use std::time::Instant;

use rustfft::{num_complex::Complex, FftPlanner};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{Split, Utterance};
use crate::models::{sentence_decision, AttackerNet, ModelError, SpeakerNet};
use crate::trainer::utterance_frames;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("clean signal is identically zero")]
    ZeroSignal,
    #[error("signal of {0} samples is shorter than one {1}-sample window")]
    TooShort(usize, usize),
    #[error("empty test set")]
    Empty,
    #[error("target {target} out of range for {classes} speakers")]
    Target { target: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// STFT window and hop used by the proxy and the spectrum (32 ms / 16 ms).
pub const WINDOW: usize = 512;
pub const HOP: usize = 256;
const PROXY_BANDS: usize = 25;
const PROXY_MIN_DB: f64 = -10.0;
const PROXY_MAX_DB: f64 = 35.0;
/// Exponent applied to clean band energy when weighting band SNRs.
const PROXY_WEIGHT_EXP: f64 = 0.2;

fn mean_square(x: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `10·log10(P_s / P_e)` with `e = s - s_adv`; `+inf` when `e` is zero.
pub fn snr(s: &[f32], s_adv: &[f32]) -> Result<f64, EvalError> {
    if s.len() != s_adv.len() {
        return Err(EvalError::Length(s.len(), s_adv.len()));
    }
    let ps = mean_square(s.iter().map(|&v| v as f64));
    if ps == 0.0 {
        return Err(EvalError::ZeroSignal);
    }
    let pe = mean_square(s.iter().zip(s_adv).map(|(&a, &b)| a as f64 - b as f64));
    if pe == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (ps / pe).log10())
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectra (`WINDOW/2 + 1` bins) of Hann-windowed frames. Signals
/// shorter than a window are zero-padded to one frame.
fn power_frames(x: &[f64]) -> Vec<Vec<f64>> {
    let win = hann(WINDOW);
    let fft = FftPlanner::new().plan_fft_forward(WINDOW);
    let n = if x.len() <= WINDOW { 1 } else { (x.len() - WINDOW) / HOP + 1 };
    (0..n)
        .map(|f| {
            let mut buf: Vec<Complex<f64>> = (0..WINDOW)
                .map(|i| Complex::new(x.get(f * HOP + i).copied().unwrap_or(0.0) * win[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf[..=WINDOW / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// FFT bin ranges of `PROXY_BANDS` mel-spaced bands covering 0..Nyquist.
fn mel_bands(sample_rate: f64) -> Vec<(usize, usize)> {
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sample_rate / 2.0);
    let bins = WINDOW / 2 + 1;
    let edge = |i: usize| {
        let hz = inv(top * i as f64 / PROXY_BANDS as f64);
        ((hz / sample_rate * WINDOW as f64).round() as usize).min(bins)
    };
    let mut bands = Vec::with_capacity(PROXY_BANDS);
    let mut lo = 0;
    for i in 1..=PROXY_BANDS {
        let hi = if i == PROXY_BANDS { bins } else { edge(i).max(lo + 1) };
        bands.push((lo, hi));
        lo = hi;
    }
    bands
}

/// Frequency-weighted segmental SNR: per window, band SNRs on mel bands
/// weighted by clean band energy, clamped to [-10, 35] dB, then averaged.
pub fn perceptual_proxy(s: &[f32], s_adv: &[f32]) -> Result<f64, EvalError> {
    perceptual_proxy_at(s, s_adv, crate::audio::SAMPLE_RATE as f64)
}

pub fn perceptual_proxy_at(s: &[f32], s_adv: &[f32], sample_rate: f64) -> Result<f64, EvalError> {
    if s.len() != s_adv.len() {
        return Err(EvalError::Length(s.len(), s_adv.len()));
    }
    if s.len() < WINDOW {
        return Err(EvalError::TooShort(s.len(), WINDOW));
    }
    let clean: Vec<f64> = s.iter().map(|&v| v as f64).collect();
    let err: Vec<f64> = s.iter().zip(s_adv).map(|(&a, &b)| a as f64 - b as f64).collect();
    let (pc, pe) = (power_frames(&clean), power_frames(&err));
    let bands = mel_bands(sample_rate);
    let clamp = |db: f64| db.clamp(PROXY_MIN_DB, PROXY_MAX_DB);
    let mut total = 0.0;
    let mut windows = 0usize;
    for (c, e) in pc.iter().zip(&pe) {
        let (mut num, mut den) = (0.0, 0.0);
        for &(lo, hi) in &bands {
            let ce: f64 = c[lo..hi].iter().sum();
            if ce <= 0.0 {
                continue;
            }
            let ee: f64 = e[lo..hi].iter().sum();
            let band_db = if ee <= 0.0 { PROXY_MAX_DB } else { clamp(10.0 * (ce / ee).log10()) };
            let w = ce.powf(PROXY_WEIGHT_EXP);
            num += w * band_db;
            den += w;
        }
        if den > 0.0 {
            total += clamp(num / den);
            windows += 1;
        }
    }
    if windows == 0 {
        // Silent reference: perfect only if nothing was added.
        let silent_err = pe.iter().all(|f| f.iter().all(|&v| v == 0.0));
        return Ok(if silent_err { PROXY_MAX_DB } else { PROXY_MIN_DB });
    }
    Ok(total / windows as f64)
}

/// Mean perturbation energy per linear frequency band.
#[derive(Clone, Debug, PartialEq)]
pub struct BandEnergy {
    /// `(low_hz, high_hz)` per band; the bands partition `[0, Nyquist]`.
    pub edges: Vec<(f64, f64)>,
    pub energy: Vec<f64>,
}

impl BandEnergy {
    pub fn to_text(&self) -> String {
        let mut s = String::from("band_low_hz\tband_high_hz\tenergy\n");
        for ((lo, hi), e) in self.edges.iter().zip(&self.energy) {
            s.push_str(&format!("{lo:.1}\t{hi:.1}\t{e:.6e}\n"));
        }
        s
    }
}

/// Band energies of the given perturbations, averaged over signals.
pub fn perturbation_spectrum(deltas: &[Vec<f32>], num_bands: usize, sample_rate: f64) -> Result<BandEnergy, EvalError> {
    if deltas.is_empty() || num_bands == 0 {
        return Err(EvalError::Empty);
    }
    let nyq = sample_rate / 2.0;
    let width = nyq / num_bands as f64;
    let bins = WINDOW / 2 + 1;
    let band_of = |k: usize| {
        let hz = k as f64 * sample_rate / WINDOW as f64;
        ((hz / width) as usize).min(num_bands - 1)
    };
    let mut counts = vec![0usize; num_bands];
    for k in 0..bins {
        counts[band_of(k)] += 1;
    }
    let mut energy = vec![0.0; num_bands];
    for d in deltas {
        let x: Vec<f64> = d.iter().map(|&v| v as f64).collect();
        let frames = power_frames(&x);
        let mut acc = vec![0.0; num_bands];
        for f in &frames {
            for (k, p) in f.iter().enumerate() {
                acc[band_of(k)] += p;
            }
        }
        for (b, a) in acc.iter().enumerate() {
            energy[b] += a / (frames.len() * counts[b].max(1)) as f64;
        }
    }
    for e in &mut energy {
        *e /= deltas.len() as f64;
    }
    let edges = (0..num_bands).map(|b| (b as f64 * width, (b + 1) as f64 * width)).collect();
    Ok(BandEnergy { edges, energy })
}

/// One scored test utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRow {
    pub id: String,
    pub speaker: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub snr_db: f64,
    pub proxy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ser_percent: f64,
    /// Sentence error rate of the clean audio.
    pub clean_ser_percent: f64,
    pub target: Option<usize>,
    pub ptr_percent: Option<f64>,
    /// Mean over rows with finite SNR.
    pub mean_snr_db: f64,
    /// Rows whose perturbation was exactly zero.
    pub infinite_snr_rows: usize,
    pub mean_perceptual_proxy: f64,
    pub rtf: f64,
    pub rows: Vec<UtteranceRow>,
    pub warnings: Vec<String>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

fn json_num(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("utterance\tspeaker\tclean_pred\tadv_pred\tsnr_db\tproxy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.2}\n",
                r.id,
                r.speaker,
                r.clean_prediction,
                r.adversarial_prediction,
                fmt_db(r.snr_db),
                r.proxy
            ));
        }
        s.push_str(&format!("\nutterances         {}\n", self.rows.len()));
        s.push_str(&format!("clean SER (%)      {:.2}\n", self.clean_ser_percent));
        s.push_str(&format!("SER (%)            {:.2}\n", self.ser_percent));
        if let (Some(t), Some(p)) = (self.target, self.ptr_percent) {
            s.push_str(&format!("target             {t}\n"));
            s.push_str(&format!("PTR (%)            {p:.2}\n"));
        }
        s.push_str(&format!("mean SNR (dB)      {}\n", fmt_db(self.mean_snr_db)));
        s.push_str(&format!("  squared-ratio    {}\n", fmt_db(2.0 * self.mean_snr_db)));
        s.push_str(&format!("zero-error rows    {}\n", self.infinite_snr_rows));
        s.push_str(&format!("perceptual proxy   {:.2}\n", self.mean_perceptual_proxy));
        s.push_str(&format!("RTF                {:.4}\n", self.rtf));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }

    /// One JSON object per utterance, then an aggregate record.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let v = json!({
                "type": "utterance",
                "id": r.id,
                "speaker": r.speaker,
                "clean_prediction": r.clean_prediction,
                "adversarial_prediction": r.adversarial_prediction,
                "snr_db": json_num(r.snr_db),
                "proxy": r.proxy,
            });
            s.push_str(&v.to_string());
            s.push('\n');
        }
        let agg = json!({
            "type": "aggregate",
            "utterances": self.rows.len(),
            "ser_percent": self.ser_percent,
            "clean_ser_percent": self.clean_ser_percent,
            "target": self.target,
            "ptr_percent": self.ptr_percent,
            "mean_snr_db": json_num(self.mean_snr_db),
            "mean_snr_db_squared_ratio": json_num(2.0 * self.mean_snr_db),
            "infinite_snr_rows": self.infinite_snr_rows,
            "mean_perceptual_proxy": self.mean_perceptual_proxy,
            "rtf": self.rtf,
            "warnings": self.warnings,
        });
        s.push_str(&agg.to_string());
        s.push('\n');
        s
    }
}

/// Settings for scoring a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Hop between classifier frames within an utterance.
    pub hop: usize,
    pub target: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hop: 1600, target: None }
    }
}

/// Sentence decision of the speaker model on a whole waveform.
pub fn predict_speaker(speaker: &SpeakerNet<f32>, samples: &[f32], hop: usize) -> Result<usize, EvalError> {
    let frames = utterance_frames(samples, speaker.frame_len(), hop);
    Ok(sentence_decision(&speaker.logits(&frames)?)?)
}

/// Percentage of adversarial predictions differing from the true speaker.
pub fn ser(rows: &[UtteranceRow]) -> Result<f64, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let wrong = rows.iter().filter(|r| r.adversarial_prediction != r.speaker).count();
    Ok(100.0 * wrong as f64 / rows.len() as f64)
}

/// Percentage of non-target utterances predicted as the target.
pub fn ptr(rows: &[UtteranceRow], target: usize) -> Result<f64, EvalError> {
    let others: Vec<_> = rows.iter().filter(|r| r.speaker != target).collect();
    if others.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = others.iter().filter(|r| r.adversarial_prediction == target).count();
    Ok(100.0 * hits as f64 / others.len() as f64)
}

/// Wall-clock attacker time over total audio duration, single-threaded,
/// excluding I/O.
pub fn rtf(attacker: &AttackerNet<f32>, signals: &[&[f32]], sample_rate: u32) -> Result<f64, EvalError> {
    let total: usize = signals.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let start = Instant::now();
    for s in signals {
        std::hint::black_box(attacker.perturb(s)?);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(secs / (total as f64 / sample_rate as f64))
}

/// Attacks each utterance in full (eval mode) and scores the result.
///
/// Returns the report and the perturbations `s_adv - s` for spectrum
/// analysis.
pub fn evaluate(
    attacker: &AttackerNet<f32>,
    speaker: &SpeakerNet<f32>,
    utterances: &[(&str, &Utterance)],
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<Vec<f32>>), EvalError> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(t) = cfg.target {
        if t >= speaker.classes() {
            return Err(EvalError::Target {
                target: t,
                classes: speaker.classes(),
            });
        }
    }
    let mut rows = Vec::with_capacity(utterances.len());
    let mut deltas = Vec::with_capacity(utterances.len());
    let mut attack_secs = 0.0;
    let mut audio_secs = 0.0;
    for (id, u) in utterances {
        let s = &u.waveform.samples;
        let start = Instant::now();
        let adv = attacker.perturb(s)?;
        attack_secs += start.elapsed().as_secs_f64();
        audio_secs += u.waveform.duration_secs();
        rows.push(UtteranceRow {
            id: id.to_string(),
            speaker: u.speaker_id as usize,
            clean_prediction: predict_speaker(speaker, s, cfg.hop)?,
            adversarial_prediction: predict_speaker(speaker, &adv, cfg.hop)?,
            snr_db: snr(s, &adv)?,
            proxy: perceptual_proxy(s, &adv)?,
        });
        deltas.push(adv.iter().zip(s).map(|(a, b)| a - b).collect());
    }
    let finite: Vec<f64> = rows.iter().map(|r| r.snr_db).filter(|v| v.is_finite()).collect();
    let mean_snr_db = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let clean_wrong = rows.iter().filter(|r| r.clean_prediction != r.speaker).count();
    let mut warnings = Vec::new();
    if mean_snr_db < 0.0 {
        warnings.push(format!("mean SNR {mean_snr_db:.2} dB is below 0: perturbation louder than speech"));
    }
    let report = MetricsReport {
        ser_percent: ser(&rows)?,
        clean_ser_percent: 100.0 * clean_wrong as f64 / rows.len() as f64,
        target: cfg.target,
        ptr_percent: cfg.target.map(|t| ptr(&rows, t)).transpose()?,
        mean_snr_db,
        infinite_snr_rows: rows.len() - finite.len(),
        mean_perceptual_proxy: rows.iter().map(|r| r.proxy).sum::<f64>() / rows.len() as f64,
        rtf: attack_secs.max(1e-9) / audio_secs,
        rows,
        warnings,
    };
    Ok((report, deltas))
}

/// Test-split utterances of a corpus paired with their manifest paths.
pub fn test_set(corpus: &crate::corpus::Corpus) -> Vec<(&str, &Utterance)> {
    corpus
        .manifest
        .records
        .iter()
        .zip(&corpus.utterances)
        .filter(|(_, u)| u.split == Split::Test)
        .map(|(r, u)| (r.path.as_str(), u))
        .collect()
}
