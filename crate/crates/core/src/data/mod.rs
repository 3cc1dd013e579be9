//! Corpora, sequence encoding, batching and task datasets.

mod mlm;
pub mod synth;
mod task;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use mlm::{mlm_mask, MaskedBatch, IGNORE_LABEL};
pub use task::{
    encode_task, load_task_dataset, render_task, save_task_dataset, Encoded, TaskDataset, TaskExample, TaskKind, Target,
};

use crate::error::{Error, Result};
use crate::vocab::{VocabMap, Vocabulary, CLS, SEP};

/// Reads a corpus: one sequence per line, blank lines skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Turns text into model input ids: tokenized with the root vocabulary,
/// framed by CLS/SEP, truncated to `max_len`, then re-indexed through the
/// model's vocabulary map if it has one.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub map: Option<VocabMap>,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} cannot hold CLS, a token and SEP")));
        }
        Ok(TextEncoder { vocab, map: None, max_len })
    }

    pub fn with_map(mut self, map: VocabMap) -> Self {
        self.map = Some(map);
        self
    }

    /// `[CLS] text [SEP]` in root-vocabulary ids, without the map applied.
    pub fn encode_root(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(self.vocab.tokenize(text));
        ids.truncate(self.max_len - 1);
        ids.push(SEP);
        ids
    }

    /// `[CLS] a [SEP] b [SEP]`, or the single-segment form when `b` is empty.
    /// The first segment is cut first when the pair is too long.
    pub fn encode_pair_root(&self, a: &str, b: &str) -> Vec<usize> {
        let tb = self.vocab.tokenize(b);
        if tb.is_empty() {
            return self.encode_root(a);
        }
        let mut ta = self.vocab.tokenize(a);
        let budget = self.max_len.saturating_sub(3);
        let keep_b = tb.len().min(budget.saturating_sub(1).max(budget / 2));
        ta.truncate(budget - keep_b);
        let mut ids = vec![CLS];
        ids.extend(ta);
        ids.push(SEP);
        ids.extend(&tb[..keep_b]);
        ids.push(SEP);
        ids
    }

    pub fn apply_map(&self, ids: &[usize]) -> Vec<usize> {
        match &self.map {
            Some(m) => m.map_ids(ids),
            None => ids.to_vec(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.apply_map(&self.encode_root(text))
    }

    /// Size of the vocabulary the encoded ids index into.
    pub fn output_vocab_size(&self) -> usize {
        self.map.as_ref().map_or(self.vocab.len(), VocabMap::new_len)
    }
}

/// Epoch-shuffled index batches that wrap around forever.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("cannot sample batches from no examples".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            batch_size: batch_size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Next batch of indices; a batch never straddles an epoch boundary.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Deterministic split of every `every`-th item into a held-out set.
pub fn holdout_split<T: Clone>(items: &[T], every: usize) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, x) in items.iter().enumerate() {
        if every > 0 && i % every == every - 1 {
            held.push(x.clone());
        } else {
            train.push(x.clone());
        }
    }
    (train, held)
}
