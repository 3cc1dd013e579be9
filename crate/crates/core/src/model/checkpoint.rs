//! Checkpoint directories: `manifest.tsv`, `weights.bin`, `config.txt` and
//! optionally `vocab.txt` (the tokenizer vocabulary) and `vocab_map.txt`
//! (the id map from that vocabulary onto the model's embedding rows).

use std::fs;
use std::path::Path;

use super::{HeadKind, Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::Tensor;
use crate::vocab::{VocabMap, Vocabulary};

pub const MANIFEST: &str = "manifest.tsv";
pub const WEIGHTS: &str = "weights.bin";
pub const CONFIG: &str = "config.txt";
pub const VOCAB: &str = "vocab.txt";
pub const VOCAB_MAP: &str = "vocab_map.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocabulary>,
    pub vocab_map: Option<VocabMap>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes named fp32 tensors as a manifest plus a little-endian blob.
pub(crate) fn write_tensors(dir: &Path, manifest: &str, blob: &str, params: &ParamSet) -> Result<()> {
    let mut text = String::new();
    let mut bytes = Vec::new();
    for (name, t) in params {
        text.push_str(&format!("{name}\tf32\t{}\t{}\n", shape_text(t.shape()), bytes.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mp = dir.join(manifest);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(blob);
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))
}

pub(crate) fn read_tensors(dir: &Path, manifest: &str, blob: &str) -> Result<ParamSet> {
    let mp = dir.join(manifest);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(blob);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let origin = mp.display().to_string();
    let mut out = ParamSet::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::parse(&origin, i + 1, m);
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, offset] = cols[..] else {
            return Err(bad("expected 4 tab-separated columns"));
        };
        if dtype != "f32" {
            return Err(bad("only f32 tensors are supported"));
        }
        let shape: Vec<usize> = shape
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad byte offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad("tensor extends past the end of the weights file"));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        if out.insert(name.to_string(), t).is_some() {
            return Err(bad("duplicate tensor name"));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(dir: &Path, model: &Model, vocab: Option<&Vocabulary>) -> Result<()> {
    save_checkpoint_with_map(dir, model, vocab, None)
}

pub fn save_checkpoint_with_map(
    dir: &Path,
    model: &Model,
    vocab: Option<&Vocabulary>,
    map: Option<&VocabMap>,
) -> Result<()> {
    if let Some(m) = map {
        if m.new_len() != model.config.vocab_size || vocab.is_some_and(|v| v.len() != m.old_len()) {
            return Err(Error::Contract("vocabulary map does not fit the model and vocabulary".into()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensors(dir, MANIFEST, WEIGHTS, &model.params)?;
    let mut pairs = model.config.to_pairs();
    pairs.push(("head", model.head.map_or("none".to_string(), |h| h.to_string())));
    kv::write(&dir.join(CONFIG), pairs)?;
    if let Some(v) = vocab {
        v.save(&dir.join(VOCAB))?;
    }
    if let Some(m) = map {
        m.save(&dir.join(VOCAB_MAP))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg = kv::read(&dir.join(CONFIG))?;
    let config = ModelConfig::from_pairs(|k| cfg.get(k).cloned())?;
    let head = match cfg.get("head").map(String::as_str) {
        None | Some("none") => None,
        Some(h) => Some(h.parse::<HeadKind>()?),
    };
    let params = read_tensors(dir, MANIFEST, WEIGHTS)?;
    let model = Model { config, head, params };
    model.validate()?;
    let vp = dir.join(VOCAB);
    let vocab = if vp.exists() { Some(Vocabulary::load(&vp)?) } else { None };
    let mp = dir.join(VOCAB_MAP);
    let vocab_map = if mp.exists() { Some(VocabMap::load(&mp)?) } else { None };
    Ok(Checkpoint { model, vocab, vocab_map })
}
