//! Decoder-only transformer over the joint vocabulary.
//!
//! Pre-norm residual blocks with causal multi-head attention (rotary
//! positions) and a GELU feed-forward layer. The output head is tied to the
//! token embedding matrix `E`: logits are `h E^T`, so there is no separate
//! output matrix, and growing `E` grows the head with it.

mod decode;
mod forward;
mod ops;
mod optim;
mod train;

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub use decode::{decode, DecodeConfig, DecodeOutput, Strategy};
pub use forward::{loss, loss_and_grad, Gradients, Mode};
pub use ops::Scalar;
pub use optim::{Adafactor, LrSchedule, OptimConfig, OptimizerState};
pub use train::{train, train_step, StepRecord, TrainConfig, TrainOutcome};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Rope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub text_vocab: usize,
    /// Zero until audio rows are added by [`surgery`].
    pub audio_vocab: usize,
    pub positional: Positional,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_dim: 512,
            max_len: 1024,
            dropout: 0.1,
            text_vocab: 300,
            audio_vocab: 0,
            positional: Positional::Rope,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        self.text_vocab + self.audio_vocab
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer count and sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary positions need an even head dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab() < 2 || self.max_len == 0 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        binio::short_hash(serde_json::to_string(self).unwrap().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![T::zero(); n],
        }
    }

    fn filled(name: String, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![v; n],
        }
    }
}

/// Offsets of the per-layer tensors within a layer's block.
pub(crate) mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_GAIN: usize = 6;
    pub const LN2_BIAS: usize = 7;
    pub const W1: usize = 8;
    pub const B1: usize = 9;
    pub const W2: usize = 10;
    pub const B2: usize = 11;
    pub const PER_LAYER: usize = 12;
}

pub(crate) const EMBED: usize = 0;

pub(crate) fn layer_base(l: usize) -> usize {
    1 + l * slot::PER_LAYER
}

pub(crate) fn final_gain(layers: usize) -> usize {
    1 + layers * slot::PER_LAYER
}

/// Configuration plus every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
    pub step: u64,
}

/// A single-precision model as stored on disk.
pub type Checkpoint = Model<f32>;

fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (m, f) = (cfg.dim, cfg.ffn_dim);
    let mut out = vec![("embed".to_string(), vec![cfg.vocab(), m])];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![m]),
            (p("ln1.bias"), vec![m]),
            (p("attn.wq"), vec![m, m]),
            (p("attn.wk"), vec![m, m]),
            (p("attn.wv"), vec![m, m]),
            (p("attn.wo"), vec![m, m]),
            (p("ln2.gain"), vec![m]),
            (p("ln2.bias"), vec![m]),
            (p("ffn.w1"), vec![m, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, m]),
            (p("ffn.b2"), vec![m]),
        ]);
    }
    out.push(("final_ln.gain".to_string(), vec![m]));
    out.push(("final_ln.bias".to_string(), vec![m]));
    out
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization: `E ~ N(0, 1/m)`, weight matrices `N(0, 1/fan_in)`,
    /// biases zero and layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gain") {
                    Tensor::filled(name, shape, T::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(name, shape)
                } else {
                    let fan_in = if name == "embed" { shape[1] } else { shape[0] };
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(z * scale)
                        })
                        .collect();
                    Tensor { name, shape, data }
                }
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            step: 0,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn embedding(&self) -> &[T] {
        &self.tensors[EMBED].data
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
                })
                .collect(),
            step: self.step,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("{}[{i}] is not finite", t.name)));
            }
        }
        Ok(())
    }

    /// Shape and naming consistency with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = tensor_layout(&self.config);
        if layout.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        self.check_finite()
    }
}

/// Appends `audio_vocab` zero rows to the embedding of a text-only model.
///
/// Text rows and every other tensor are copied unchanged; since the head is
/// tied, the new tokens start with logit exactly zero.
pub fn surgery<T: Scalar>(text_model: &Model<T>, audio_vocab: usize) -> Result<Model<T>> {
    if audio_vocab == 0 {
        return Err(Error::Checkpoint("audio vocabulary must be positive".into()));
    }
    if text_model.config.audio_vocab != 0 {
        return Err(Error::Checkpoint(format!(
            "checkpoint already has {} audio tokens",
            text_model.config.audio_vocab
        )));
    }
    let mut out = text_model.clone();
    out.config.audio_vocab = audio_vocab;
    let embed = &mut out.tensors[EMBED];
    embed.shape[0] += audio_vocab;
    embed
        .data
        .resize(embed.data.len() + audio_vocab * out.config.dim, T::zero());
    Ok(out)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        binio::write_u32(w, CHECKPOINT_VERSION)?;
        binio::write_str(w, &serde_json::to_string(&self.config)?)?;
        binio::write_str(w, &self.config.config_hash())?;
        binio::write_u64(w, self.step)?;
        binio::write_u32(w, self.tensors.len() as u32)?;
        for t in &self.tensors {
            binio::write_str(w, &t.name)?;
            binio::write_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                binio::write_u32(w, d as u32)?;
            }
            binio::write_f32_slice(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, CHECKPOINT_MAGIC)?;
        let version = binio::read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&binio::read_str(r)?)?;
        let hash = binio::read_str(r)?;
        if hash != config.config_hash() {
            return Err(Error::Checkpoint("config hash does not match header".into()));
        }
        let step = binio::read_u64(r)?;
        let count = binio::read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = binio::read_str(r)?;
            let rank = binio::read_u32(r)? as usize;
            if rank > 4 {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| binio::read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = binio::read_f32_vec(r, shape.iter().product())?;
            tensors.push(Tensor { name, shape, data });
        }
        binio::expect_eof(r)?;
        let model = Self { config, tensors, step };
        model.validate()?;
        Ok(model)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_len: 32,
            text_vocab: 260,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(small(), 3).unwrap();
        let b = Model::<f32>::init(small(), 3).unwrap();
        let c = Model::<f32>::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn surgery_appends_zero_rows() {
        let text = Model::<f32>::init(small(), 1).unwrap();
        let joint = surgery(&text, 40).unwrap();
        assert_eq!(joint.config.vocab(), 300);
        assert_eq!(joint.tensors[EMBED].shape, vec![300, 16]);
        let e = joint.embedding();
        assert_eq!(&e[..260 * 16], text.embedding());
        assert!(e[260 * 16..].iter().all(|&v| v == 0.0));
        for (a, b) in text.tensors.iter().zip(&joint.tensors).skip(1) {
            assert_eq!(a, b);
        }
        assert!(surgery(&joint, 4).is_err());
        assert!(surgery(&text, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = surgery(&Model::<f32>::init(small(), 2).unwrap(), 8).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TFK1");
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        buf.push(0);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
