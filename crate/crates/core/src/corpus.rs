//! Deterministic synthetic multi-speaker corpus.
//!
//! Each speaker is a source-filter voice: a glottal pulse train (or noise
//! for unvoiced sounds) passed through a parallel bank of second-order
//! formant resonators. Phonemes shift the speaker's neutral formants by a fixed
//! template, which yields both speaker and per-sample phoneme labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::audio::{self, AudioError, Encoding, Waveform, SAMPLE_RATE};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_TAG: &str = "srak-corpus";
const MIN_SEGMENT_MS: u32 = 60;
const MAX_SEGMENT_MS: u32 = 200;
const PEAK: f64 = 0.5;
const VOICED_GAIN: f64 = 0.2;
/// Parallel formant branch amplitudes, F1..F4.
const VOICED_AMPS: [f64; 4] = [1.0, 0.6, 0.3, 0.2];
const UNVOICED_AMPS: [f64; 4] = [0.5, 0.6, 0.8, 0.8];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("invalid phoneme sequence: {0}")]
    Sequence(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One entry of the phoneme inventory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phoneme {
    pub symbol: &'static str,
    pub voiced: bool,
    /// Offsets added to the speaker's neutral F1..F4, in Hz at unit vocal
    /// tract scale.
    pub formant_offsets: [f64; 4],
    pub gain: f64,
}

const fn ph(symbol: &'static str, voiced: bool, formant_offsets: [f64; 4], gain: f64) -> Phoneme {
    Phoneme {
        symbol,
        voiced,
        formant_offsets,
        gain,
    }
}

/// Fixed 12-class phoneme inventory; the index is the class label.
pub const PHONEMES: [Phoneme; 12] = [
    ph("aa", true, [230.0, -410.0, -60.0, 0.0], 1.0),
    ph("iy", true, [-230.0, 790.0, 510.0, 300.0], 1.0),
    ph("uw", true, [-200.0, -630.0, -260.0, -100.0], 1.0),
    ph("eh", true, [30.0, 340.0, -20.0, 0.0], 1.0),
    ph("ae", true, [160.0, 220.0, -90.0, 0.0], 1.0),
    ph("ow", true, [70.0, -660.0, -90.0, 0.0], 1.0),
    ph("er", true, [-10.0, -150.0, -810.0, -300.0], 1.0),
    ph("ih", true, [-110.0, 490.0, 50.0, 0.0], 1.0),
    ph("m", true, [-250.0, -400.0, -200.0, -200.0], 0.4),
    ph("n", true, [-250.0, 100.0, 100.0, 0.0], 0.4),
    ph("s", false, [3500.0, 4000.0, 4000.0, 3800.0], 0.15),
    ph("sh", false, [2000.0, 1700.0, 1700.0, 2000.0], 0.2),
];

pub fn num_phonemes() -> usize {
    PHONEMES.len()
}

pub fn phoneme_index(symbol: &str) -> Option<usize> {
    PHONEMES.iter().position(|p| p.symbol == symbol)
}

/// Voice parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub pitch_hz: f64,
    /// Neutral (center Hz, bandwidth Hz) resonator pairs, centers increasing.
    pub formants: Vec<(f64, f64)>,
    /// Noise mixed into the voiced source, in [0, 1].
    pub breathiness: f64,
    /// Vocal tract scale applied to phoneme offsets.
    pub tract_scale: f64,
}

/// SplitMix64 finalizer over a seed and a stream of salts.
fn mix(seed: u64, salts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salts {
        z = z.wrapping_add(s.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn generate_profile(seed: u64, speaker_id: u32) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[1, speaker_id as u64]));
    let pitch_hz = (85f64.ln() + rng.random::<f64>() * (260f64.ln() - 85f64.ln())).exp();
    let tract_scale = rng.random_range(0.85..1.18);
    let neutral = [500.0, 1500.0, 2500.0, 3500.0];
    let bw_ranges = [(60.0, 90.0), (80.0, 120.0), (100.0, 160.0), (150.0, 250.0)];
    let mut formants = Vec::with_capacity(4);
    let mut prev = 0.0;
    for (f, (lo, hi)) in neutral.iter().zip(bw_ranges) {
        let jitter: f64 = rng.random_range(-0.06..0.06);
        let center = (f * tract_scale * (1.0 + jitter)).max(prev + 200.0);
        formants.push((center, rng.random_range(lo..hi)));
        prev = center;
    }
    SpeakerProfile {
        speaker_id,
        pitch_hz,
        formants,
        breathiness: rng.random_range(0.0..0.35),
        tract_scale,
    }
}

/// Second-order resonator `y[n] = a·x[n] + b·y[n-1] + c·y[n-2]` with unit
/// gain at its center frequency.
#[derive(Clone, Copy, Debug, Default)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, center: f64, bandwidth: f64) {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * center / fs;
        self.b = 2.0 * r * theta.cos();
        self.c = -r * r;
        let far_pole = ((1.0 - r * (2.0 * theta).cos()).powi(2) + (r * (2.0 * theta).sin()).powi(2)).sqrt();
        self.a = (1.0 - r) * far_pole;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Resonator settings of `phoneme` for `profile`.
pub fn phoneme_formants(profile: &SpeakerProfile, phoneme: usize) -> Vec<(f64, f64)> {
    let p = &PHONEMES[phoneme];
    let nyq = SAMPLE_RATE as f64 / 2.0;
    let mut out = Vec::with_capacity(4);
    let mut prev = 0.0;
    for (k, &(center, bw)) in profile.formants.iter().enumerate() {
        let c = (center + p.formant_offsets[k] * profile.tract_scale)
            .max(prev + 150.0)
            .min(nyq - 200.0 - 100.0 * (3 - k) as f64);
        let bw = if p.voiced { bw } else { bw * 4.0 };
        out.push((c, bw));
        prev = c;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One synthesized sentence with aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub waveform: Waveform,
    pub speaker_id: u32,
    /// Phoneme class of every sample.
    pub phoneme_labels: Vec<u8>,
    pub segments: Vec<(usize, u32)>,
    pub split: Split,
}

/// Source-filter synthesis of `phoneme_seq` as (phoneme index, duration ms)
/// pairs. The result is peak-normalized to 0.5.
pub fn synthesize_utterance(
    profile: &SpeakerProfile,
    phoneme_seq: &[(usize, u32)],
    seed: u64,
) -> Result<Utterance, CorpusError> {
    if phoneme_seq.is_empty() {
        return Err(CorpusError::Sequence("empty phoneme sequence".into()));
    }
    for &(p, ms) in phoneme_seq {
        if p >= PHONEMES.len() {
            return Err(CorpusError::Sequence(format!("unknown phoneme index {p}")));
        }
        if !(MIN_SEGMENT_MS..=MAX_SEGMENT_MS).contains(&ms) {
            return Err(CorpusError::Sequence(format!(
                "segment duration {ms} ms outside [{MIN_SEGMENT_MS}, {MAX_SEGMENT_MS}]"
            )));
        }
    }
    let fs = SAMPLE_RATE as f64;
    let per_ms = SAMPLE_RATE as usize / 1000;
    let total: usize = phoneme_seq.iter().map(|&(_, ms)| ms as usize * per_ms).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[2]));
    let mut out = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut bank = [Resonator::default(); 4];
    let period = fs / profile.pitch_hz;
    let pulse_amp = period.sqrt();
    let mut phase = 0.0f64;
    let (mut g1, mut g2, mut g2_prev) = (0.0f64, 0.0f64, 0.0f64);
    let ramp = 5 * per_ms;
    for &(p, ms) in phoneme_seq {
        let ph = &PHONEMES[p];
        for (res, (c, bw)) in bank.iter_mut().zip(phoneme_formants(profile, p)) {
            res.tune(c, bw);
        }
        let n = ms as usize * per_ms;
        for i in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            let source = if ph.voiced {
                phase += 1.0;
                let pulse = if phase >= period {
                    phase -= period;
                    pulse_amp
                } else {
                    0.0
                };
                // Two-pole glottal shaping, then lip radiation (first difference).
                g1 = 0.97 * g1 + pulse;
                g2 = 0.97 * g2 + g1;
                let voiced = (g2 - g2_prev) * VOICED_GAIN;
                g2_prev = g2;
                (1.0 - profile.breathiness) * voiced + profile.breathiness * noise
            } else {
                noise
            };
            let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
            let y: f64 = bank
                .iter_mut()
                .zip(if ph.voiced { VOICED_AMPS } else { UNVOICED_AMPS })
                .map(|(r, amp)| amp * r.tick(source))
                .sum();
            out.push(y * ph.gain * env);
            labels.push(p as u8);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Ok(Utterance {
        waveform: Waveform::new(out.iter().map(|v| (v * k) as f32).collect(), SAMPLE_RATE),
        speaker_id: profile.speaker_id,
        phoneme_labels: labels,
        segments: phoneme_seq.to_vec(),
        split: Split::Train,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_speakers: u32,
    pub utterances_per_speaker: u32,
    /// Fraction of each speaker's utterances held out for testing.
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_speakers: 20,
            utterances_per_speaker: 40,
            test_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.num_speakers < 2 {
            return Err(CorpusError::Config(format!(
                "need at least 2 speakers, got {}",
                self.num_speakers
            )));
        }
        if self.utterances_per_speaker < 2 {
            return Err(CorpusError::Config(
                "need at least 2 utterances per speaker so both splits are populated".into(),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CorpusError::Config(format!(
                "test fraction {} must lie in (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Held-out utterances per speaker; at least one in each split.
    pub fn test_count(&self) -> u32 {
        let n = self.utterances_per_speaker;
        ((n as f64 * self.test_fraction).round() as u32).clamp(1, n - 1)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub speaker_id: u32,
    pub index: u32,
    pub split: Split,
    pub segments: Vec<(usize, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub records: Vec<ManifestRecord>,
}

fn utterance_seed(seed: u64, speaker: u32, index: u32) -> u64 {
    mix(seed, &[3, speaker as u64, index as u64])
}

/// Random phoneme sequence of roughly 1.3–1.7 s with no immediate repeats.
fn phoneme_sequence(seed: u64) -> Vec<(usize, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[4]));
    let target: u32 = rng.random_range(1300..=1700);
    let mut seq: Vec<(usize, u32)> = Vec::new();
    let mut total = 0;
    while total < target || seq.len() < 4 {
        let mut p = rng.random_range(0..PHONEMES.len());
        if seq.last().is_some_and(|&(q, _)| q == p) {
            p = (p + 1 + rng.random_range(0..PHONEMES.len() - 1)) % PHONEMES.len();
        }
        let ms = rng.random_range(MIN_SEGMENT_MS..=MAX_SEGMENT_MS);
        seq.push((p, ms));
        total += ms;
    }
    seq
}

impl CorpusManifest {
    /// Plans the corpus without synthesizing audio.
    pub fn plan(config: &CorpusConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        let test_from = config.utterances_per_speaker - config.test_count();
        let mut records = Vec::new();
        for spk in 0..config.num_speakers {
            for idx in 0..config.utterances_per_speaker {
                records.push(ManifestRecord {
                    path: format!("wav/s{spk:03}_u{idx:03}.wav"),
                    speaker_id: spk,
                    index: idx,
                    split: if idx >= test_from { Split::Test } else { Split::Train },
                    segments: phoneme_sequence(utterance_seed(config.seed, spk, idx)),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            records,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// Synthesizes the utterance a record describes.
    pub fn synthesize(&self, record: &ManifestRecord) -> Result<Utterance, CorpusError> {
        let profile = generate_profile(self.config.seed, record.speaker_id);
        let mut u = synthesize_utterance(
            &profile,
            &record.segments,
            utterance_seed(self.config.seed, record.speaker_id, record.index),
        )?;
        u.split = record.split;
        Ok(u)
    }

    /// WAV bytes of a record, as written by [`build_corpus`].
    pub fn regenerate_wav(&self, record: &ManifestRecord) -> Result<Vec<u8>, CorpusError> {
        Ok(audio::encode_wav(&self.synthesize(record)?.waveform, Encoding::Pcm16))
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# {MANIFEST_TAG} seed={} speakers={} utterances_per_speaker={} test_fraction={} sample_rate={} train={} test={}\n",
            c.seed,
            c.num_speakers,
            c.utterances_per_speaker,
            c.test_fraction,
            SAMPLE_RATE,
            self.count(Split::Train),
            self.count(Split::Test)
        );
        for r in &self.records {
            let segs: Vec<String> = r
                .segments
                .iter()
                .map(|&(p, ms)| format!("{}:{ms}", PHONEMES[p].symbol))
                .collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.path,
                r.speaker_id,
                r.index,
                r.split.as_str(),
                segs.join(" ")
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let bad = |m: String| CorpusError::Manifest(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("#") || fields.next() != Some(MANIFEST_TAG) {
            return Err(bad("missing manifest header".into()));
        }
        let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")));
        let num = |k: &str| -> Result<u64, CorpusError> {
            get(k)?.parse().map_err(|_| bad(format!("header field {k} is not a number")))
        };
        let config = CorpusConfig {
            seed: num("seed")?,
            num_speakers: num("speakers")? as u32,
            utterances_per_speaker: num("utterances_per_speaker")? as u32,
            test_fraction: get("test_fraction")?
                .parse()
                .map_err(|_| bad("bad test_fraction".into()))?,
        };
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(format!("line {}: expected 5 tab-separated fields", ln + 2)));
            }
            let split = match cols[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(format!("line {}: unknown split {other}", ln + 2))),
            };
            let mut segments = Vec::new();
            for seg in cols[4].split_whitespace() {
                let (sym, ms) = seg
                    .split_once(':')
                    .ok_or_else(|| bad(format!("line {}: bad segment {seg}", ln + 2)))?;
                let p = phoneme_index(sym).ok_or_else(|| bad(format!("unknown phoneme {sym}")))?;
                let ms = ms.parse().map_err(|_| bad(format!("bad duration in {seg}")))?;
                segments.push((p, ms));
            }
            records.push(ManifestRecord {
                path: cols[0].to_string(),
                speaker_id: cols[1].parse().map_err(|_| bad(format!("line {}: bad speaker", ln + 2)))?,
                index: cols[2].parse().map_err(|_| bad(format!("line {}: bad index", ln + 2)))?,
                split,
                segments,
            });
        }
        Ok(Self { config, records })
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CorpusError::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Synthesizes the corpus into `out_dir` (WAV files plus manifest).
pub fn build_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusManifest, CorpusError> {
    let manifest = CorpusManifest::plan(config)?;
    let root = out_dir.as_ref();
    fs::create_dir_all(root.join("wav"))?;
    for r in &manifest.records {
        fs::write(root.join(&r.path), manifest.regenerate_wav(r)?)?;
    }
    fs::write(root.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// A corpus held in memory, split into train and test utterances.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Synthesizes everything in memory without touching disk.
    pub fn generate(config: &CorpusConfig) -> Result<Self, CorpusError> {
        let manifest = CorpusManifest::plan(config)?;
        let utterances = manifest
            .records
            .iter()
            .map(|r| manifest.synthesize(r))
            .collect::<Result<_, _>>()?;
        Ok(Self { manifest, utterances })
    }

    /// Loads WAVs and rebuilds per-sample labels from the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let manifest = CorpusManifest::read(dir)?;
        let mut utterances = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let waveform = audio::load_wav(dir.join(&r.path))?;
            waveform.ensure_rate(SAMPLE_RATE)?;
            let per_ms = SAMPLE_RATE as usize / 1000;
            let mut labels = Vec::with_capacity(waveform.len());
            for &(p, ms) in &r.segments {
                labels.extend(std::iter::repeat_n(p as u8, ms as usize * per_ms));
            }
            if labels.len() != waveform.len() {
                return Err(CorpusError::Manifest(format!(
                    "{}: {} samples but segments cover {}",
                    r.path,
                    waveform.len(),
                    labels.len()
                )));
            }
            utterances.push(Utterance {
                waveform,
                speaker_id: r.speaker_id,
                phoneme_labels: labels,
                segments: r.segments.clone(),
                split: r.split,
            });
        }
        Ok(Self { manifest, utterances })
    }

    pub fn num_speakers(&self) -> usize {
        self.manifest.config.num_speakers as usize
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn wav_path(dir: &Path, record: &ManifestRecord) -> PathBuf {
        dir.join(&record.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_deterministic_and_valid() {
        for id in 0..30 {
            let p = generate_profile(7, id);
            assert_eq!(p, generate_profile(7, id));
            assert!((80.0..=300.0).contains(&p.pitch_hz));
            assert!(p.formants.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(p.formants.iter().all(|f| f.0 < 8000.0));
            for ph in 0..PHONEMES.len() {
                let f = phoneme_formants(&p, ph);
                assert!(f.windows(2).all(|w| w[0].0 < w[1].0), "{ph}: {f:?}");
                assert!(f.iter().all(|x| x.0 > 0.0 && x.0 < 8000.0));
            }
        }
    }

    #[test]
    fn profiles_pairwise_distinct() {
        let ps: Vec<_> = (0..20).map(|i| generate_profile(11, i)).collect();
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                assert!(ps[i].pitch_hz != ps[j].pitch_hz);
                assert!(ps[i].formants != ps[j].formants);
            }
        }
    }

    #[test]
    fn synthesis_rejects_bad_sequences() {
        let p = generate_profile(1, 0);
        assert!(synthesize_utterance(&p, &[], 0).is_err());
        assert!(synthesize_utterance(&p, &[(0, 30)], 0).is_err());
        assert!(synthesize_utterance(&p, &[(99, 100)], 0).is_err());
    }

    #[test]
    fn labels_align_with_samples() {
        let p = generate_profile(3, 2);
        let u = synthesize_utterance(&p, &[(0, 100), (10, 60), (4, 200)], 9).unwrap();
        assert_eq!(u.waveform.len(), 16 * 360);
        assert_eq!(u.phoneme_labels.len(), u.waveform.len());
        assert_eq!(u.phoneme_labels[1600], 10);
        let peak = u.waveform.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn sequences_meet_segment_rules() {
        for s in 0..200 {
            let seq = phoneme_sequence(s);
            assert!(seq.len() >= 4);
            assert!(seq.iter().all(|&(_, ms)| (60..=200).contains(&ms)));
            assert!(seq.windows(2).all(|w| w[0].0 != w[1].0));
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let cfg = CorpusConfig {
            seed: 5,
            num_speakers: 3,
            utterances_per_speaker: 4,
            test_fraction: 0.25,
        };
        let m = CorpusManifest::plan(&cfg).unwrap();
        assert_eq!(CorpusManifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.count(Split::Test), 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CorpusConfig {
            num_speakers: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(CorpusError::Config(_))));
        cfg.num_speakers = 2;
        cfg.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
