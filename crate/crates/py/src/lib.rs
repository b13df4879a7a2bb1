//! Python bindings: corpus synthesis, training, attacker inference and the
//! evaluation metrics.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use srak_core::audio::{self, Encoding, Waveform};
use srak_core::corpus::{self, Corpus, CorpusConfig};
use srak_core::eval::{self, EvalConfig};
use srak_core::losses::{self, AttackLossConfig};
use srak_core::models::{AttackerConfig, AttackerNet, ClassifierKind, Logits, SincClassifier};
use srak_core::trainer::{self, Checkpoint, TrainConfig, TrainError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Io(io) => PyIOError::new_err(io.to_string()),
        TrainError::NonFinite(m) => PyRuntimeError::new_err(m),
        other => value_err(other),
    }
}

fn load_corpus(dir: &str) -> PyResult<Corpus> {
    Corpus::load(dir).map_err(|e| match e {
        corpus::CorpusError::Io(io) => PyIOError::new_err(format!("{dir}: {io}")),
        other => value_err(other),
    })
}

fn kind_of(name: &str) -> PyResult<ClassifierKind> {
    ClassifierKind::parse(name).ok_or_else(|| value_err(format!("model must be 'speaker' or 'phoneme', got {name:?}")))
}

/// Residual dilated-convolution attacker.
#[pyclass(name = "Attacker", module = "srak")]
struct PyAttacker {
    inner: AttackerNet<f32>,
}

#[pymethods]
impl PyAttacker {
    /// Freshly initialized attacker; it returns its input unchanged.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: AttackerNet::new(AttackerConfig::default(), seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(train_err)?;
        Ok(Self {
            inner: ck.attacker().map_err(train_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_attacker(&self.inner, BTreeMap::new()).save(path).map_err(train_err)
    }

    /// Adversarial version of a waveform of any length.
    fn perturb(&self, py: Python<'_>, samples: Vec<f32>) -> PyResult<Vec<f32>> {
        py.detach(|| self.inner.perturb(&samples)).map_err(value_err)
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        self.inner.config().receptive_field()
    }
}

/// Frozen speaker or phoneme classifier loaded from a checkpoint.
#[pyclass(name = "Classifier", module = "srak")]
struct PyClassifier {
    inner: SincClassifier<f32>,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: &str, model: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(train_err)?;
        Ok(Self {
            inner: ck.classifier(kind_of(model)?).map_err(train_err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn frame_len(&self) -> usize {
        self.inner.frame_len()
    }

    /// Class posteriors for each frame of a flat buffer of frames.
    fn posteriors(&self, frames: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        self.inner.posteriors(&frames).map_err(value_err)
    }

    /// Sentence-level decision over a whole utterance.
    #[pyo3(signature = (samples, hop = 1600))]
    fn predict(&self, samples: Vec<f32>, hop: usize) -> PyResult<usize> {
        if hop == 0 {
            return Err(value_err("hop must be positive"));
        }
        eval::predict_speaker(&self.inner, &samples, hop).map_err(value_err)
    }
}

/// Writes the synthetic corpus and returns the number of utterances.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, speakers = 20, utterances = 40, test_fraction = 0.2))]
fn build_corpus(py: Python<'_>, out_dir: &str, seed: u64, speakers: u32, utterances: u32, test_fraction: f64) -> PyResult<usize> {
    let cfg = CorpusConfig {
        seed,
        num_speakers: speakers,
        utterances_per_speaker: utterances,
        test_fraction,
    };
    let m = py.detach(|| corpus::build_corpus(&cfg, out_dir)).map_err(|e| match e {
        corpus::CorpusError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    })?;
    Ok(m.records.len())
}

/// Pretrains a classifier and saves its checkpoint; returns test accuracy
/// (sentence level for speakers, frame level for phonemes).
#[pyfunction]
#[pyo3(signature = (corpus_dir, model, out, epochs = 10, frames_per_epoch = 2048, seed = 0))]
fn pretrain(py: Python<'_>, corpus_dir: &str, model: &str, out: &str, epochs: usize, frames_per_epoch: usize, seed: u64) -> PyResult<f64> {
    let kind = kind_of(model)?;
    let corpus = load_corpus(corpus_dir)?;
    let cfg = TrainConfig {
        epochs,
        frames_per_epoch,
        seed,
        ..TrainConfig::pretrain()
    };
    let run = py
        .detach(|| match kind {
            ClassifierKind::Speaker => trainer::pretrain_speaker(&corpus, &cfg),
            ClassifierKind::Phoneme => trainer::pretrain_phoneme(&corpus, &cfg),
        })
        .map_err(train_err)?;
    run.checkpoint().save(out).map_err(train_err)?;
    Ok(run.report.test_sentence_accuracy.unwrap_or(run.report.test_frame_accuracy))
}

/// Trains an attacker against frozen checkpoints and saves it.
#[pyfunction]
#[pyo3(signature = (
    corpus_dir, speaker, phoneme, out, lambda_phn = 1.0, lambda_norm = 1000.0, margin = 0.01,
    target = None, lr = 3e-4, epochs = 10, frames_per_epoch = 2048, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train_attacker(
    py: Python<'_>,
    corpus_dir: &str,
    speaker: &str,
    phoneme: &str,
    out: &str,
    lambda_phn: f64,
    lambda_norm: f64,
    margin: f64,
    target: Option<usize>,
    lr: f64,
    epochs: usize,
    frames_per_epoch: usize,
    seed: u64,
) -> PyResult<Attacker> {
    let corpus = load_corpus(corpus_dir)?;
    let spk = Checkpoint::load(speaker).and_then(|c| c.classifier(ClassifierKind::Speaker)).map_err(train_err)?;
    let phn = Checkpoint::load(phoneme).and_then(|c| c.classifier(ClassifierKind::Phoneme)).map_err(train_err)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        frames_per_epoch,
        seed,
        loss: AttackLossConfig {
            lambda_phn,
            lambda_norm,
            margin,
            target,
        },
        ..TrainConfig::default()
    };
    let run = py.detach(|| trainer::train_attacker(&corpus, &spk, &phn, &cfg, |_| {})).map_err(train_err)?;
    run.checkpoint().save(out).map_err(train_err)?;
    Ok(PyAttacker { inner: run.attacker })
}

type Attacker = PyAttacker;

/// Scores an attacker on the test split; returns the aggregate metrics.
#[pyfunction]
#[pyo3(signature = (attacker, speaker, corpus_dir, target = None, hop = 1600))]
fn evaluate<'py>(
    py: Python<'py>,
    attacker: &PyAttacker,
    speaker: &PyClassifier,
    corpus_dir: &str,
    target: Option<usize>,
    hop: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if speaker.inner.kind() != ClassifierKind::Speaker {
        return Err(value_err("evaluation needs a speaker classifier"));
    }
    let corpus = load_corpus(corpus_dir)?;
    let test = eval::test_set(&corpus);
    let (r, _) = eval::evaluate(&attacker.inner, &speaker.inner, &test, &EvalConfig { hop, target }).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("utterances", r.rows.len())?;
    d.set_item("ser_percent", r.ser_percent)?;
    d.set_item("clean_ser_percent", r.clean_ser_percent)?;
    d.set_item("ptr_percent", r.ptr_percent)?;
    d.set_item("mean_snr_db", r.mean_snr_db)?;
    d.set_item("mean_perceptual_proxy", r.mean_perceptual_proxy)?;
    d.set_item("rtf", r.rtf)?;
    Ok(d)
}

/// `10·log10` power ratio of clean signal to error; `inf` for no error.
#[pyfunction]
fn snr(clean: Vec<f32>, adversarial: Vec<f32>) -> PyResult<f64> {
    eval::snr(&clean, &adversarial).map_err(value_err)
}

#[pyfunction]
fn perceptual_proxy(clean: Vec<f32>, adversarial: Vec<f32>) -> PyResult<f64> {
    eval::perceptual_proxy(&clean, &adversarial).map_err(value_err)
}

/// Speaker hinge on one logit vector; non-targeted when `target` is None.
#[pyfunction]
#[pyo3(signature = (logits, label, target = None))]
fn l_spk(logits: Vec<f64>, label: usize, target: Option<usize>) -> PyResult<f64> {
    let l = Logits::new(logits).map_err(value_err)?;
    losses::l_spk(&l, label, target).map_err(value_err)
}

#[pyfunction]
fn l_phn(p_clean: Vec<f64>, p_adv: Vec<f64>) -> PyResult<f64> {
    losses::l_phn(&p_clean, &p_adv).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (clean, adversarial, margin = 0.01))]
fn l_norm(clean: Vec<f64>, adversarial: Vec<f64>, margin: f64) -> PyResult<f64> {
    losses::l_norm(&clean, &adversarial, margin).map_err(value_err)
}

/// Returns `(samples, sample_rate)`.
#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f32>, u32)> {
    let w = audio::load_wav(path).map_err(|e| match e {
        audio::AudioError::Io(io) => PyIOError::new_err(format!("{path}: {io}")),
        other => value_err(other),
    })?;
    Ok((w.samples, w.sample_rate))
}

/// Writes 16-bit PCM, or 32-bit float when `float32` is set.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = 16000, float32 = false))]
fn write_wav(path: &str, samples: Vec<f32>, sample_rate: u32, float32: bool) -> PyResult<()> {
    let enc = if float32 { Encoding::Float32 } else { Encoding::Pcm16 };
    audio::save_wav(&Waveform::new(samples, sample_rate), path, enc).map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
fn srak(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAttacker>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train_attacker, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(snr, m)?)?;
    m.add_function(wrap_pyfunction!(perceptual_proxy, m)?)?;
    m.add_function(wrap_pyfunction!(l_spk, m)?)?;
    m.add_function(wrap_pyfunction!(l_phn, m)?)?;
    m.add_function(wrap_pyfunction!(l_norm, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    Ok(())
}
