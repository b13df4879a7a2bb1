use std::collections::BTreeMap;
use std::path::Path;

use super::TrainError;
use crate::grad::Tensor;
use crate::models::{AttackerConfig, AttackerNet, ClassifierConfig, ClassifierKind, ParamStore, SincClassifier};

const MAGIC: &[u8; 4] = b"SRAK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Attacker,
    Speaker,
    Phoneme,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attacker => "attacker",
            Self::Speaker => "speaker",
            Self::Phoneme => "phoneme",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attacker" => Some(Self::Attacker),
            "speaker" => Some(Self::Speaker),
            "phoneme" => Some(Self::Phoneme),
            _ => None,
        }
    }
}

impl From<ClassifierKind> for ModelKind {
    fn from(k: ClassifierKind) -> Self {
        match k {
            ClassifierKind::Speaker => Self::Speaker,
            ClassifierKind::Phoneme => Self::Phoneme,
        }
    }
}

/// Serialized model: named tensors (parameters then batch-norm running
/// statistics) plus `key=value` metadata, including the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Format("invalid UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind.as_str());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &meta);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(TrainError::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version(version));
        }
        let tag = r.string()?;
        let kind = ModelKind::parse(&tag).ok_or_else(|| TrainError::Format(format!("unknown model kind {tag:?}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| TrainError::Format(format!("tensor {name} is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let text = r.string()?;
        if r.pos != buf.len() {
            return Err(TrainError::Format("trailing bytes after metadata".into()));
        }
        let mut metadata = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Format(format!("bad metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        Ok(Self { kind, tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn tensor_map(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors.iter().cloned().collect()
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), TrainError> {
        if self.kind != kind {
            return Err(TrainError::Kind {
                expected: kind.as_str(),
                found: self.kind.as_str(),
            });
        }
        Ok(())
    }

    fn meta(&self, key: &str) -> Result<&str, TrainError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TrainError::Format(format!("missing metadata key {key}")))
    }

    fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, TrainError> {
        self.meta(key)?
            .parse()
            .map_err(|_| TrainError::Format(format!("bad metadata value for {key}")))
    }

    fn meta_list(&self, key: &str) -> Result<Vec<usize>, TrainError> {
        let s = self.meta(key)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|v| v.parse().map_err(|_| TrainError::Format(format!("bad metadata value for {key}"))))
            .collect()
    }

    fn from_store(kind: ModelKind, store: &ParamStore<f32>, mut metadata: BTreeMap<String, String>, arch: Vec<(String, String)>) -> Self {
        metadata.extend(arch);
        let tensors = store
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Self { kind, tensors, metadata }
    }

    pub fn from_attacker(net: &AttackerNet<f32>, metadata: BTreeMap<String, String>) -> Self {
        let c = net.config();
        let arch = vec![
            ("model.channels".into(), c.channels.to_string()),
            ("model.kernel".into(), c.kernel.to_string()),
            ("model.dilations".into(), join(&c.dilations)),
        ];
        Self::from_store(ModelKind::Attacker, net.params(), metadata, arch)
    }

    pub fn attacker(&self) -> Result<AttackerNet<f32>, TrainError> {
        self.expect_kind(ModelKind::Attacker)?;
        let cfg = AttackerConfig {
            channels: self.meta_parse("model.channels")?,
            kernel: self.meta_parse("model.kernel")?,
            dilations: self.meta_list("model.dilations")?,
        };
        let mut net = AttackerNet::new(cfg, 0)?;
        net.params_mut().load_named(&self.tensor_map())?;
        Ok(net)
    }

    pub fn from_classifier(net: &SincClassifier<f32>, metadata: BTreeMap<String, String>) -> Self {
        let c = net.config();
        let arch = vec![
            ("model.frame_len".into(), c.frame_len.to_string()),
            ("model.sample_rate".into(), c.sample_rate.to_string()),
            ("model.sinc_filters".into(), c.sinc_filters.to_string()),
            ("model.sinc_len".into(), c.sinc_len.to_string()),
            ("model.sinc_stride".into(), c.sinc_stride.to_string()),
            ("model.sinc_pool".into(), c.sinc_pool.to_string()),
            ("model.min_band_hz".into(), c.min_band_hz.to_string()),
            ("model.conv_channels".into(), join(&c.conv_channels)),
            ("model.conv_kernel".into(), c.conv_kernel.to_string()),
            ("model.conv_pool".into(), c.conv_pool.to_string()),
            ("model.hidden".into(), c.hidden.to_string()),
            ("model.classes".into(), c.classes.to_string()),
            ("model.leaky_slope".into(), c.leaky_slope.to_string()),
        ];
        Self::from_store(c.kind.into(), net.params(), metadata, arch)
    }

    /// Rebuilds a classifier, requiring the checkpoint to be of `kind`.
    pub fn classifier(&self, kind: ClassifierKind) -> Result<SincClassifier<f32>, TrainError> {
        self.expect_kind(kind.into())?;
        let cfg = ClassifierConfig {
            kind,
            frame_len: self.meta_parse("model.frame_len")?,
            sample_rate: self.meta_parse("model.sample_rate")?,
            sinc_filters: self.meta_parse("model.sinc_filters")?,
            sinc_len: self.meta_parse("model.sinc_len")?,
            sinc_stride: self.meta_parse("model.sinc_stride")?,
            sinc_pool: self.meta_parse("model.sinc_pool")?,
            min_band_hz: self.meta_parse("model.min_band_hz")?,
            conv_channels: self.meta_list("model.conv_channels")?,
            conv_kernel: self.meta_parse("model.conv_kernel")?,
            conv_pool: self.meta_parse("model.conv_pool")?,
            hidden: self.meta_parse("model.hidden")?,
            classes: self.meta_parse("model.classes")?,
            leaky_slope: self.meta_parse("model.leaky_slope")?,
        };
        let mut net = SincClassifier::new(cfg, 0)?;
        net.params_mut().load_named(&self.tensor_map())?;
        Ok(net)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
