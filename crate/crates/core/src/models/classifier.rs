use super::params::{rng, uniform, BatchNorm, ParamStore};
use super::{Forward, Logits, Mode, ModelError};
use crate::grad::{kernels, BatchStats, Scalar, SincBankParams, Tape, Tensor, Var};

/// Which label a [`SincClassifier`] predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Speaker,
    Phoneme,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Speaker => "speaker",
            Self::Phoneme => "phoneme",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speaker" => Some(Self::Speaker),
            "phoneme" => Some(Self::Phoneme),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub frame_len: usize,
    pub sample_rate: u32,
    pub sinc_filters: usize,
    pub sinc_len: usize,
    pub sinc_stride: usize,
    pub sinc_pool: usize,
    /// Lower bound on the low cutoff and on the bandwidth, Hz.
    pub min_band_hz: f64,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_pool: usize,
    pub hidden: usize,
    pub classes: usize,
    pub leaky_slope: f64,
}

impl ClassifierConfig {
    pub fn speaker(num_speakers: usize) -> Self {
        Self {
            kind: ClassifierKind::Speaker,
            frame_len: 3200,
            sample_rate: 16_000,
            sinc_filters: 80,
            sinc_len: 251,
            sinc_stride: 4,
            sinc_pool: 3,
            min_band_hz: 50.0,
            conv_channels: vec![32, 32],
            conv_kernel: 5,
            conv_pool: 3,
            hidden: 128,
            classes: num_speakers,
            leaky_slope: 0.2,
        }
    }

    pub fn phoneme(num_phonemes: usize) -> Self {
        Self {
            kind: ClassifierKind::Phoneme,
            sinc_filters: 40,
            sinc_len: 129,
            sinc_pool: 4,
            conv_channels: vec![24, 24],
            conv_pool: 4,
            hidden: 64,
            classes: num_phonemes,
            ..Self::speaker(num_phonemes)
        }
    }

    /// `(channels, length)` after the front end and each conv block.
    fn stage_shapes(&self) -> Result<Vec<(usize, usize)>, ModelError> {
        let bad = |what: &str| ModelError::Config(format!("{what} leaves no samples for a {}-sample frame", self.frame_len));
        if self.frame_len < self.sinc_len {
            return Err(bad("sinc filter length"));
        }
        let len = (self.frame_len - self.sinc_len) / self.sinc_stride + 1;
        let mut len = len / self.sinc_pool;
        if len == 0 {
            return Err(bad("sinc pooling"));
        }
        let mut shapes = vec![(self.sinc_filters, len)];
        for &c in &self.conv_channels {
            if len < self.conv_kernel || (len - self.conv_kernel + 1) / self.conv_pool == 0 {
                return Err(bad("conv block"));
            }
            len = (len - self.conv_kernel + 1) / self.conv_pool;
            shapes.push((c, len));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::Config("classifier needs at least two classes".into()));
        }
        if self.sinc_filters == 0 || self.sinc_len.is_multiple_of(2) || self.sinc_stride == 0 || self.sinc_pool == 0 {
            return Err(ModelError::Config("sinc front end needs filters, an odd length, stride and pool".into()));
        }
        if self.conv_kernel == 0 || self.conv_pool == 0 || self.hidden == 0 || self.conv_channels.contains(&0) {
            return Err(ModelError::Config("conv blocks need positive sizes".into()));
        }
        if self.min_band_hz <= 0.0 || 2.0 * self.min_band_hz >= self.sample_rate as f64 / 2.0 {
            return Err(ModelError::Config("minimum band must be positive and below a quarter of the rate".into()));
        }
        self.stage_shapes().map(|_| ())
    }

    fn sinc_params(&self) -> SincBankParams {
        SincBankParams {
            length: self.sinc_len,
            sample_rate: self.sample_rate as f64,
            floor_hz: self.min_band_hz,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    norm: BatchNorm,
}

/// SincNet-style frame classifier: learnable band-pass front end, conv
/// blocks with max pooling, batch norm and leaky ReLU, then two affine
/// layers.
#[derive(Clone, Debug)]
pub struct SincClassifier<T> {
    config: ClassifierConfig,
    store: ParamStore<T>,
    low: usize,
    band: usize,
    front_norm: BatchNorm,
    blocks: Vec<ConvBlock>,
    fc1: (usize, usize),
    fc2: (usize, usize),
    flat: usize,
}

/// Speaker classifier; emits one logit per speaker.
pub type SpeakerNet<T> = SincClassifier<T>;
/// Phoneme classifier; its softmax is the phoneme posterior.
pub type PhonemeNet<T> = SincClassifier<T>;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl<T: Scalar> SincClassifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.stage_shapes()?;
        let mut r = rng(seed);
        let mut store = ParamStore::new();

        // Mel-spaced initial bands between 30 Hz and just under Nyquist.
        let nf = config.sinc_filters;
        let top = config.sample_rate as f64 / 2.0 - 2.0 * config.min_band_hz;
        let (m0, m1) = (hz_to_mel(30.0), hz_to_mel(top));
        let edges: Vec<f64> = (0..=nf)
            .map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / nf as f64))
            .collect();
        let low_init = edges[..nf].iter().map(|&v| T::from_f64_lossy(v)).collect();
        let band_init = edges.windows(2).map(|w| T::from_f64_lossy(w[1] - w[0])).collect();
        let low = store.add("sinc.low_hz", Tensor::new(vec![nf], low_init)?);
        let band = store.add("sinc.band_hz", Tensor::new(vec![nf], band_init)?);
        let front_norm = BatchNorm::new(&mut store, "sinc.bn", nf);

        let mut blocks = Vec::new();
        let mut cin = nf;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            let bound = 1.0 / ((cin * config.conv_kernel) as f64).sqrt();
            let weight = store.add(format!("conv{i}.weight"), uniform(&mut r, &[cout, cin, config.conv_kernel], bound));
            let bias = store.add(format!("conv{i}.bias"), uniform(&mut r, &[cout], bound));
            let norm = BatchNorm::new(&mut store, &format!("conv{i}.bn"), cout);
            blocks.push(ConvBlock { weight, bias, norm });
            cin = cout;
        }
        let (c, l) = *shapes.last().expect("front end stage");
        let flat = c * l;
        let b1 = 1.0 / (flat as f64).sqrt();
        let fc1 = (
            store.add("fc1.weight", uniform(&mut r, &[config.hidden, flat], b1)),
            store.add("fc1.bias", Tensor::zeros(&[config.hidden])),
        );
        let b2 = 1.0 / (config.hidden as f64).sqrt();
        let fc2 = (
            store.add("fc2.weight", uniform(&mut r, &[config.classes, config.hidden], b2)),
            store.add("fc2.bias", Tensor::zeros(&[config.classes])),
        );
        Ok(Self {
            config,
            store,
            low,
            band,
            front_norm,
            blocks,
            fc1,
            fc2,
            flat,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn kind(&self) -> ClassifierKind {
        self.config.kind
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn frame_len(&self) -> usize {
        self.config.frame_len
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Effective `(f1, f2)` band edges in Hz after the reparameterization.
    pub fn band_edges(&self) -> Vec<(f64, f64)> {
        let nyq = self.config.sample_rate as f64 / 2.0;
        let floor = self.config.min_band_hz;
        self.store
            .get(self.low)
            .data()
            .iter()
            .zip(self.store.get(self.band).data())
            .map(|(lo, bw)| {
                let f1 = (lo.as_f64().abs() + floor).min(nyq - floor);
                let f2 = (f1 + bw.as_f64().abs() + floor).min(nyq);
                (f1, f2)
            })
            .collect()
    }

    /// Current front-end kernels as `[filters × sinc_len]`.
    pub fn sinc_kernels(&self) -> Vec<T> {
        let fs = self.config.sample_rate as f64;
        let (f1, f2): (Vec<T>, Vec<T>) = self
            .band_edges()
            .into_iter()
            .map(|(a, b)| (T::from_f64_lossy(a / fs), T::from_f64_lossy(b / fs)))
            .unzip();
        kernels::sinc_bank(&f1, &f2, self.config.sinc_len)
    }

    /// Records the forward pass for `x: [batch, 1, frame_len]`, producing
    /// `[batch, classes]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<Forward<T>, ModelError> {
        let params = self.store.bind(tape, trainable);
        let mut batch_stats = Vec::new();
        let output = self.forward_bound(tape, &params, x, mode, &mut batch_stats)?;
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != 1 {
            return Err(ModelError::Config(format!("classifier input must be [batch, 1, len], got {s:?}")));
        }
        if s[2] != self.config.frame_len {
            return Err(ModelError::FrameLength {
                expected: self.config.frame_len,
                got: s[2],
            });
        }
        let c = &self.config;
        let slope = c.leaky_slope;
        let bank = tape.sinc_bank(p[self.low], p[self.band], c.sinc_params())?;
        let mut h = tape.conv1d(x, bank, None, c.sinc_stride, 1, 0)?;
        h = tape.abs(h);
        h = tape.max_pool1d(h, c.sinc_pool)?;
        h = self.front_norm.forward(tape, &self.store, p, h, mode, stats)?;
        h = tape.leaky_relu(h, slope);
        for b in &self.blocks {
            h = tape.conv1d(h, p[b.weight], Some(p[b.bias]), 1, 1, 0)?;
            h = tape.max_pool1d(h, c.conv_pool)?;
            h = b.norm.forward(tape, &self.store, p, h, mode, stats)?;
            h = tape.leaky_relu(h, slope);
        }
        h = tape.reshape(h, &[s[0], self.flat])?;
        h = tape.affine(h, p[self.fc1.0], p[self.fc1.1])?;
        h = tape.leaky_relu(h, slope);
        Ok(tape.affine(h, p[self.fc2.0], p[self.fc2.1])?)
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let norms: Vec<BatchNorm> = std::iter::once(self.front_norm)
            .chain(self.blocks.iter().map(|b| b.norm))
            .collect();
        for (bn, s) in norms.iter().zip(stats) {
            bn.update(&mut self.store, s);
        }
    }

    /// Eval-mode logits for row-major `[n × frame_len]` frames.
    pub fn logits(&self, frames: &[T]) -> Result<Vec<Logits<T>>, ModelError> {
        let raw = self.raw_logits(frames)?;
        Logits::rows(&raw, self.config.classes)
    }

    /// Eval-mode softmax posteriors, one row per frame.
    pub fn posteriors(&self, frames: &[T]) -> Result<Vec<Vec<T>>, ModelError> {
        let raw = self.raw_logits(frames)?;
        Ok(kernels::log_softmax_rows(&raw, self.config.classes)
            .chunks(self.config.classes)
            .map(|r| r.iter().map(|v| v.exp()).collect())
            .collect())
    }

    fn raw_logits(&self, frames: &[T]) -> Result<Vec<T>, ModelError> {
        let fl = self.config.frame_len;
        if frames.is_empty() {
            return Err(ModelError::Empty);
        }
        if !frames.len().is_multiple_of(fl) {
            return Err(ModelError::FrameLength {
                expected: fl,
                got: frames.len() % fl,
            });
        }
        let mut out = Vec::with_capacity(frames.len() / fl * self.config.classes);
        for chunk in frames.chunks(64 * fl) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len() / fl, 1, fl], chunk.to_vec())?);
            let f = self.forward(&mut tape, x, Mode::Eval, false)?;
            out.extend_from_slice(tape.value(f.output).data());
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> SincClassifier<U> {
        SincClassifier {
            config: self.config.clone(),
            store: self.store.cast(),
            low: self.low,
            band: self.band,
            front_norm: self.front_norm,
            blocks: self.blocks.clone(),
            fc1: self.fc1,
            fc2: self.fc2,
            flat: self.flat,
        }
    }
}
