//! Post-layernorm transformer encoder with task heads.
//!
//! Parameters live in a name-ordered map so that every routine that walks
//! them (optimizers, checkpoints, fingerprints, sparse deltas) sees the same
//! order. Weights are stored `[in, out]`.

mod checkpoint;
mod cost;
mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with_map, Checkpoint};
pub(crate) use checkpoint::{read_tensors, write_tensors};
pub use cost::{count_flops, count_params, HeadCost, GELU_FLOPS, LAYER_NORM_FLOPS, SOFTMAX_FLOPS};
pub use forward::{encode, register_params, PAD_SCORE_BIAS, ActivationTrace, Batch, Dropout, ParamVars, TraceVars};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::VocabMap;

pub type ParamSet = BTreeMap<String, Tensor>;

pub const INIT_STD: f32 = 0.02;
/// Standard deviation of a unit normal truncated at ±2.
const TRUNCATED_STD_FACTOR: f32 = 0.879_625_66;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn field<T: FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<T> {
            let raw = get(key).ok_or_else(|| Error::Config(format!("missing {key}")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("{key} = {raw} is not a valid value")))
        }
        let config = ModelConfig {
            num_layers: field(&get, "num_layers")?,
            hidden_dim: field(&get, "hidden_dim")?,
            num_heads: field(&get, "num_heads")?,
            ffn_dim: field(&get, "ffn_dim")?,
            vocab_size: field(&get, "vocab_size")?,
            max_seq_len: field(&get, "max_seq_len")?,
            dropout: field(&get, "dropout")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Prediction head attached on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mlm,
    /// Single linear layer per token.
    Token { num_labels: usize },
    /// Dense + tanh over the CLS vector, then a linear classifier.
    Sequence { num_labels: usize },
    /// Independent start and end logits per token.
    Span,
}

impl HeadKind {
    pub fn param_shapes(&self, config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden_dim;
        let s = |n: &str, shape: &[usize]| (n.to_string(), shape.to_vec());
        match *self {
            HeadKind::Mlm => vec![
                s("head.mlm.transform.weight", &[d, d]),
                s("head.mlm.transform.bias", &[d]),
                s("head.mlm.norm.gain", &[d]),
                s("head.mlm.norm.bias", &[d]),
                s("head.mlm.decoder.weight", &[config.vocab_size, d]),
                s("head.mlm.decoder.bias", &[config.vocab_size]),
            ],
            HeadKind::Token { num_labels } => vec![
                s("head.token.weight", &[d, num_labels]),
                s("head.token.bias", &[num_labels]),
            ],
            HeadKind::Sequence { num_labels } => vec![
                s("head.seq.dense.weight", &[d, d]),
                s("head.seq.dense.bias", &[d]),
                s("head.seq.out.weight", &[d, num_labels]),
                s("head.seq.out.bias", &[num_labels]),
            ],
            HeadKind::Span => vec![s("head.span.weight", &[d, 2]), s("head.span.bias", &[2])],
        }
    }

    pub fn num_outputs(&self, config: &ModelConfig) -> usize {
        match *self {
            HeadKind::Mlm => config.vocab_size,
            HeadKind::Token { num_labels } | HeadKind::Sequence { num_labels } => num_labels,
            HeadKind::Span => 2,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Mlm => write!(f, "mlm"),
            HeadKind::Token { num_labels } => write!(f, "token:{num_labels}"),
            HeadKind::Sequence { num_labels } => write!(f, "sequence:{num_labels}"),
            HeadKind::Span => write!(f, "span"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let labels = |n: &str| {
            n.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("bad label count in head {s:?}")))
        };
        match s.split_once(':') {
            None if s == "mlm" => Ok(HeadKind::Mlm),
            None if s == "span" => Ok(HeadKind::Span),
            Some(("token", n)) => Ok(HeadKind::Token { num_labels: labels(n)? }),
            Some(("sequence", n)) => Ok(HeadKind::Sequence { num_labels: labels(n)? }),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn layer_prefix(layer: usize) -> String {
    format!("layer.{layer}.")
}

/// Names and shapes of the encoder parameters (no head), in no particular order.
pub fn encoder_param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![config.vocab_size, d]),
        ("embeddings.position".to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 1..=config.num_layers {
        let p = layer_prefix(i);
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("{p}attn.{proj}.weight"), vec![d, d]));
            out.push((format!("{p}attn.{proj}.bias"), vec![d]));
        }
        out.push((format!("{p}attn_norm.gain"), vec![d]));
        out.push((format!("{p}attn_norm.bias"), vec![d]));
        out.push((format!("{p}ffn.inner.weight"), vec![d, f]));
        out.push((format!("{p}ffn.inner.bias"), vec![f]));
        out.push((format!("{p}ffn.outer.weight"), vec![f, d]));
        out.push((format!("{p}ffn.outer.bias"), vec![d]));
        out.push((format!("{p}ffn_norm.gain"), vec![d]));
        out.push((format!("{p}ffn_norm.bias"), vec![d]));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head: Option<HeadKind>,
    pub params: ParamSet,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Fresh tensor for a named parameter: gains 1, biases 0, everything else
/// truncated normal with standard deviation 0.02.
pub fn init_param(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".gain") {
        return Tensor::filled(shape, 1.0);
    }
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let sigma = INIT_STD / TRUNCATED_STD_FACTOR;
    let normal = Normal::new(0.0f32, sigma).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = normal.sample(&mut rng);
            if x.abs() <= 2.0 * sigma {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Model {
    pub fn init(config: ModelConfig, head: Option<HeadKind>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in encoder_param_shapes(&config) {
            params.insert(name.clone(), init_param(&name, &shape, seed));
        }
        let mut model = Model { config, head: None, params };
        if let Some(h) = head {
            model.attach_head(h, seed)?;
        }
        Ok(model)
    }

    /// Replaces any existing head with a freshly initialized one.
    pub fn attach_head(&mut self, head: HeadKind, seed: u64) -> Result<()> {
        if head.num_outputs(&self.config) == 0 {
            return Err(Error::Config("head has no outputs".into()));
        }
        self.remove_head();
        for (name, shape) in head.param_shapes(&self.config) {
            let t = init_param(&name, &shape, seed);
            self.params.insert(name, t);
        }
        self.head = Some(head);
        Ok(())
    }

    pub fn remove_head(&mut self) {
        self.params.retain(|k, _| !is_head_param(k));
        self.head = None;
    }

    pub fn without_head(&self) -> Model {
        let mut m = self.clone();
        m.remove_head();
        m
    }

    pub fn head_params(&self) -> ParamSet {
        self.params
            .iter()
            .filter(|(k, _)| is_head_param(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    /// Checks that the parameter set is exactly what config and head imply.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut expected = encoder_param_shapes(&self.config);
        if let Some(h) = &self.head {
            expected.extend(h.param_shapes(&self.config));
        }
        if expected.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "model has {} parameters, config implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.param(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Student with every `lrf`-th teacher layer (1-based, so the top layer is
/// kept) and the vocabulary restricted by `vmap`.
pub fn init_student_from_teacher(teacher: &Model, lrf: usize, vmap: &VocabMap) -> Result<Model> {
    let lt = teacher.config.num_layers;
    if lrf == 0 || lt % lrf != 0 {
        return Err(Error::Config(format!(
            "layer reduction factor {lrf} does not divide {lt} teacher layers"
        )));
    }
    let ls = lt / lrf;
    let mut params = ParamSet::new();
    for (name, t) in &teacher.params {
        match name.strip_prefix("layer.") {
            Some(rest) => {
                let (idx, tail) = rest.split_once('.').expect("layer names have a tail");
                let j: usize = idx.parse().expect("layer index is numeric");
                if j % lrf == 0 {
                    params.insert(format!("layer.{}.{tail}", j / lrf), t.clone());
                }
            }
            None => {
                params.insert(name.clone(), t.clone());
            }
        }
    }
    let config = ModelConfig { num_layers: ls, ..teacher.config.clone() };
    let student = Model { config, head: teacher.head, params };
    crate::vocab::slice_embeddings(&student, vmap)
}
