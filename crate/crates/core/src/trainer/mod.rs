//! Classifier pretraining, attacker training and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, ModelKind, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{frame_count, normalize_frame};
use crate::corpus::{num_phonemes, Corpus, CorpusError, Split, Utterance};
use crate::grad::{AdamState, GradError, Tape, Tensor};
use crate::losses::{self, AttackLossConfig, LossBreakdown, LossError};
use crate::models::{
    sentence_decision, AttackerConfig, AttackerNet, ClassifierConfig, ClassifierKind, Logits, Mode, ModelError,
    PhonemeNet, SincClassifier, SpeakerNet,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    Kind { expected: &'static str, found: &'static str },
    #[error("frozen model parameters changed during training")]
    FrozenModified,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub frame_len: usize,
    pub hop: usize,
    /// Frames drawn from the shuffled pool each epoch; 0 uses all of them.
    pub frames_per_epoch: usize,
    /// Hop between frames when scoring whole utterances.
    pub eval_hop: usize,
    pub loss: AttackLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            frame_len: 3200,
            hop: 160,
            frames_per_epoch: 2048,
            eval_hop: 1600,
            loss: AttackLossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for classifier pretraining.
    pub fn pretrain() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        let sizes = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("frame_len", self.frame_len),
            ("hop", self.hop),
            ("eval_hop", self.eval_hop),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `key=value` echo of every field, for checkpoint metadata.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("train.{k}"), v);
        };
        put("learning_rate", self.learning_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("frame_len", self.frame_len.to_string());
        put("hop", self.hop.to_string());
        put("frames_per_epoch", self.frames_per_epoch.to_string());
        put("eval_hop", self.eval_hop.to_string());
        put("lambda_phn", self.loss.lambda_phn.to_string());
        put("lambda_norm", self.loss.lambda_norm.to_string());
        put("margin", self.loss.margin.to_string());
        put("target", self.loss.target.map_or("none".into(), |t| t.to_string()));
        m
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One training frame: utterance index and first sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRef {
    pub utterance: usize,
    pub start: usize,
}

/// Every frame position of one split at the given hop.
pub fn frame_pool(corpus: &Corpus, split: Split, frame_len: usize, hop: usize) -> Vec<FrameRef> {
    let mut pool = Vec::new();
    for (u, utt) in corpus.utterances.iter().enumerate() {
        if utt.split != split {
            continue;
        }
        for i in 0..frame_count(utt.waveform.len(), frame_len, hop) {
            pool.push(FrameRef { utterance: u, start: i * hop });
        }
    }
    pool
}

/// Seeded shuffle of the pool truncated to the per-epoch budget.
pub fn epoch_frames(pool: &[FrameRef], cfg: &TrainConfig, epoch: usize, stream: u64) -> Vec<FrameRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream.wrapping_mul(1000) + epoch as u64));
    let mut order = pool.to_vec();
    order.shuffle(&mut rng);
    if cfg.frames_per_epoch > 0 {
        order.truncate(cfg.frames_per_epoch);
    }
    order
}

fn gather_frames(corpus: &Corpus, refs: &[FrameRef], frame_len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(refs.len() * frame_len);
    for r in refs {
        out.extend_from_slice(&corpus.utterances[r.utterance].waveform.samples[r.start..r.start + frame_len]);
    }
    out
}

/// Phoneme class at the centre sample of a frame.
pub fn center_label(utt: &Utterance, start: usize, frame_len: usize) -> usize {
    utt.phoneme_labels[start + frame_len / 2] as usize
}

fn frame_label(corpus: &Corpus, r: &FrameRef, kind: ClassifierKind, frame_len: usize) -> usize {
    let utt = &corpus.utterances[r.utterance];
    match kind {
        ClassifierKind::Speaker => utt.speaker_id as usize,
        ClassifierKind::Phoneme => center_label(utt, r.start, frame_len),
    }
}

/// Per-epoch summary of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_frame_accuracy: f64,
    pub test_frame_accuracy: f64,
    /// Speaker models only.
    pub test_sentence_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: SincClassifier<f32>,
    pub report: PretrainReport,
    pub config: TrainConfig,
}

impl Pretrained {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.metadata();
        meta.insert("epochs_completed".into(), self.report.epoch_losses.len().to_string());
        let losses: Vec<String> = self.report.epoch_losses.iter().map(|l| format!("{l:e}")).collect();
        meta.insert("epoch_losses".into(), losses.join(","));
        meta.insert("train_frame_accuracy".into(), self.report.train_frame_accuracy.to_string());
        meta.insert("test_frame_accuracy".into(), self.report.test_frame_accuracy.to_string());
        if let Some(a) = self.report.test_sentence_accuracy {
            meta.insert("test_sentence_accuracy".into(), a.to_string());
        }
        Checkpoint::from_classifier(&self.model, meta)
    }
}

pub fn pretrain_speaker(corpus: &Corpus, cfg: &TrainConfig) -> Result<Pretrained, TrainError> {
    let mut mc = ClassifierConfig::speaker(corpus.num_speakers());
    mc.frame_len = cfg.frame_len;
    pretrain_classifier(corpus, cfg, mc)
}

pub fn pretrain_phoneme(corpus: &Corpus, cfg: &TrainConfig) -> Result<Pretrained, TrainError> {
    let mut mc = ClassifierConfig::phoneme(num_phonemes());
    mc.frame_len = cfg.frame_len;
    pretrain_classifier(corpus, cfg, mc)
}

/// Cross-entropy training of a frame classifier with Adam.
pub fn pretrain_classifier(corpus: &Corpus, cfg: &TrainConfig, model_cfg: ClassifierConfig) -> Result<Pretrained, TrainError> {
    cfg.validate()?;
    if corpus.num_speakers() < 2 {
        return Err(TrainError::Config("corpus needs at least two speakers".into()));
    }
    let kind = model_cfg.kind;
    let stream = match kind {
        ClassifierKind::Speaker => 1,
        ClassifierKind::Phoneme => 2,
    };
    let mut model = SincClassifier::<f32>::new(model_cfg, derive_seed(cfg.seed, stream))?;
    let pool = frame_pool(corpus, Split::Train, cfg.frame_len, cfg.hop);
    if pool.is_empty() {
        return Err(TrainError::Config("no training frames in corpus".into()));
    }
    let shapes: Vec<Vec<usize>> = model.params().values().iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = AdamState::<f32>::new(shapes.iter().map(Vec::as_slice));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_frames(&pool, cfg, epoch, stream);
        let (mut total, mut count) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let frames = gather_frames(corpus, batch, cfg.frame_len);
            let labels: Vec<usize> = batch.iter().map(|r| frame_label(corpus, r, kind, cfg.frame_len)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![batch.len(), 1, cfg.frame_len], frames)?);
            let fw = model.forward(&mut tape, x, Mode::Train, true)?;
            let logp = tape.log_softmax(fw.output)?;
            let picked = tape.gather(logp, &labels)?;
            let mean = tape.mean(picked, None)?;
            let loss = tape.scale(mean, -1.0);
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(TrainError::NonFinite(format!("cross-entropy at epoch {epoch}: {lv}")));
            }
            tape.backward(loss)?;
            let grads = model.params().grads(&tape, &fw.params);
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam.step(&mut model.params_mut().values_mut(), &grad_refs, cfg.learning_rate)?;
            model.update_running_stats(&fw.batch_stats);
            total += lv * batch.len() as f64;
            count += batch.len();
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    let train_frame_accuracy = frame_accuracy(&model, corpus, Split::Train, cfg.eval_hop)?;
    let test_frame_accuracy = frame_accuracy(&model, corpus, Split::Test, cfg.eval_hop)?;
    let test_sentence_accuracy = match kind {
        ClassifierKind::Speaker => Some(sentence_accuracy(&model, corpus, Split::Test, cfg.eval_hop)?),
        ClassifierKind::Phoneme => None,
    };
    Ok(Pretrained {
        model,
        report: PretrainReport {
            epoch_losses,
            train_frame_accuracy,
            test_frame_accuracy,
            test_sentence_accuracy,
        },
        config: cfg.clone(),
    })
}

/// Frames of one waveform at `hop`, falling back to a single zero-padded
/// frame for signals shorter than a frame.
pub fn utterance_frames(samples: &[f32], frame_len: usize, hop: usize) -> Vec<f32> {
    if samples.len() < frame_len {
        let mut f = samples.to_vec();
        f.resize(frame_len, 0.0);
        return f;
    }
    crate::audio::frame_signal(samples, frame_len, hop).frames
}

/// Fraction of frames (at `hop`) whose top class matches the label.
pub fn frame_accuracy(model: &SincClassifier<f32>, corpus: &Corpus, split: Split, hop: usize) -> Result<f64, TrainError> {
    let fl = model.frame_len();
    let pool = frame_pool(corpus, split, fl, hop);
    if pool.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in pool.chunks(256) {
        let logits = model.logits(&gather_frames(corpus, chunk, fl))?;
        for (r, l) in chunk.iter().zip(&logits) {
            correct += (l.first == frame_label(corpus, r, model.kind(), fl)) as usize;
        }
    }
    Ok(correct as f64 / pool.len() as f64)
}

/// Sentence-level speaker accuracy with mean log-softmax aggregation.
pub fn sentence_accuracy(model: &SpeakerNet<f32>, corpus: &Corpus, split: Split, hop: usize) -> Result<f64, TrainError> {
    let utts: Vec<&Utterance> = corpus.split(split).collect();
    if utts.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for u in &utts {
        let logits = model.logits(&utterance_frames(&u.waveform.samples, model.frame_len(), hop))?;
        correct += (sentence_decision(&logits)? == u.speaker_id as usize) as usize;
    }
    Ok(correct as f64 / utts.len() as f64)
}

/// Loss breakdown of one attacker training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    /// Fraction of frames in the batch whose speaker term was already zero.
    pub fooled_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct AttackerRun {
    pub attacker: AttackerNet<f32>,
    pub log: Vec<BatchLog>,
    pub config: TrainConfig,
}

impl AttackerRun {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.metadata();
        let epochs_done = self.log.last().map_or(0, |l| l.epoch + 1);
        meta.insert("epochs_completed".into(), epochs_done.to_string());
        if let Some(l) = self.log.last() {
            meta.insert("final_l_total".into(), format!("{:e}", l.loss.l_total));
        }
        Checkpoint::from_attacker(&self.attacker, meta)
    }

    /// Per-batch loss log as tab-separated text with a header line.
    pub fn log_text(&self) -> String {
        let mut s = String::from("epoch\tbatch\tl_total\tl_spk\tl_phn\tl_norm\tfooled\n");
        for l in &self.log {
            s.push_str(&format!(
                "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\n",
                l.epoch, l.batch, l.loss.l_total, l.loss.l_spk, l.loss.l_phn, l.loss.l_norm, l.fooled_fraction
            ));
        }
        s
    }
}

/// Trains the attacker against frozen speaker and phoneme classifiers.
///
/// Each frame is peak-normalized, transformed, and scaled back before the
/// classifiers and the hinge see it; the scale is treated as data.
pub fn train_attacker(
    corpus: &Corpus,
    speaker: &SpeakerNet<f32>,
    phoneme: &PhonemeNet<f32>,
    cfg: &TrainConfig,
    mut on_batch: impl FnMut(&BatchLog),
) -> Result<AttackerRun, TrainError> {
    cfg.validate()?;
    cfg.loss.validate(speaker.classes())?;
    for m in [speaker, phoneme] {
        if m.frame_len() != cfg.frame_len {
            return Err(TrainError::Config(format!(
                "{} model expects {}-sample frames, config has {}",
                m.kind().as_str(),
                m.frame_len(),
                cfg.frame_len
            )));
        }
    }
    if speaker.kind() != ClassifierKind::Speaker || phoneme.kind() != ClassifierKind::Phoneme {
        return Err(TrainError::Config("speaker and phoneme models are swapped".into()));
    }
    let frozen_before = (speaker.params().fingerprint_bytes(), phoneme.params().fingerprint_bytes());

    let mut attacker = AttackerNet::<f32>::new(AttackerConfig::default(), derive_seed(cfg.seed, 3))?;
    let pool = frame_pool(corpus, Split::Train, cfg.frame_len, cfg.hop);
    if pool.is_empty() {
        return Err(TrainError::Config("no training frames in corpus".into()));
    }
    let shapes: Vec<Vec<usize>> = attacker.params().values().iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = AdamState::<f32>::new(shapes.iter().map(Vec::as_slice));
    let fl = cfg.frame_len;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_frames(&pool, cfg, epoch, 3);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let b = batch.len();
            let clean = gather_frames(corpus, batch, fl);
            let labels: Vec<usize> = batch
                .iter()
                .map(|r| corpus.utterances[r.utterance].speaker_id as usize)
                .collect();
            let mut normalized = Vec::with_capacity(clean.len());
            let mut scales = Vec::with_capacity(b);
            for f in clean.chunks(fl) {
                let n = normalize_frame(f).map_err(|_| TrainError::NonFinite("input frame".into()))?;
                normalized.extend(n.values);
                scales.push(n.scale);
            }
            let p_clean: Vec<f32> = phoneme.posteriors(&clean)?.concat();

            let mut tape = Tape::new();
            let xn = tape.constant(Tensor::new(vec![b, 1, fl], normalized)?);
            let clean_v = tape.constant(Tensor::new(vec![b, 1, fl], clean)?);
            let fw = attacker.forward(&mut tape, xn, Mode::Train, true)?;
            let adv = tape.row_scale(fw.output, &scales)?;

            let spk_logits = speaker.forward(&mut tape, adv, Mode::Eval, false)?.output;
            let fooled = Logits::rows(tape.value(spk_logits).data(), speaker.classes())?
                .iter()
                .zip(&labels)
                .filter(|(l, &y)| losses::l_spk(l, y, cfg.loss.target).map(|v| v == 0.0).unwrap_or(false))
                .count();
            let l_spk = losses::spk_loss(&mut tape, spk_logits, &labels, cfg.loss.target)?;

            let l_phn = if cfg.loss.lambda_phn > 0.0 {
                let adv_logits = phoneme.forward(&mut tape, adv, Mode::Eval, false)?.output;
                losses::phn_loss(&mut tape, &p_clean, adv_logits)?
            } else {
                // Weight is zero: report the term without recording its graph.
                let p_adv = phoneme.posteriors(tape.value(adv).data())?;
                let classes = phoneme.classes();
                let kl: f64 = p_adv
                    .iter()
                    .enumerate()
                    .map(|(i, q)| losses::l_phn(&p_clean[i * classes..(i + 1) * classes], q))
                    .sum::<Result<f64, _>>()?;
                tape.constant(Tensor::scalar((kl / b as f64).max(0.0) as f32))
            };
            let l_norm = losses::norm_loss(&mut tape, clean_v, adv, cfg.loss.margin)?;
            let total = losses::total_loss(&mut tape, l_spk, l_phn, l_norm, &cfg.loss)?;
            let breakdown = total.breakdown(&tape, &cfg.loss);
            if !breakdown.all_finite() {
                return Err(TrainError::NonFinite(format!("epoch {epoch} batch {bi}: {breakdown}")));
            }
            if !breakdown.is_consistent(&cfg.loss, 1e-6) {
                return Err(TrainError::NonFinite(format!("loss decomposition mismatch at epoch {epoch} batch {bi}: {breakdown}")));
            }
            tape.backward(total.total)?;
            let grads = attacker.params().grads(&tape, &fw.params);
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            adam.step(&mut attacker.params_mut().values_mut(), &grad_refs, cfg.learning_rate)
                .map_err(|e| TrainError::NonFinite(format!("{e} at epoch {epoch} batch {bi}: {breakdown}")))?;
            attacker.update_running_stats(&fw.batch_stats);
            let entry = BatchLog {
                epoch,
                batch: bi,
                loss: breakdown,
                fooled_fraction: fooled as f64 / b as f64,
            };
            on_batch(&entry);
            log.push(entry);
        }
    }
    let frozen_after = (speaker.params().fingerprint_bytes(), phoneme.params().fingerprint_bytes());
    if frozen_before != frozen_after {
        return Err(TrainError::FrozenModified);
    }
    Ok(AttackerRun {
        attacker,
        log,
        config: cfg.clone(),
    })
}
