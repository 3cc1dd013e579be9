//! WordPiece-style vocabulary, unigram statistics and vocabulary reduction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Prefix marking a piece that continues the previous one inside a word.
pub const CONTINUATION: &str = "##";

/// Probability threshold below which a token is dropped from the student.
pub const DEFAULT_REDUCTION_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Wraps an explicit token list. Specials must occupy ids 0–4.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Input(format!("token {i} must be {s}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("token {i} is empty or contains whitespace")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        let max_piece_chars = tokens
            .iter()
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocabulary { tokens, ids, max_piece_chars })
    }

    /// Builds a vocabulary from corpus frequencies: specials, then every
    /// character seen (as a word-initial and a continuation piece), then
    /// whole words by descending frequency until `max_size` is reached.
    pub fn build<'s>(lines: impl IntoIterator<Item = &'s str>, max_size: usize) -> Result<Self> {
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        let mut chars = std::collections::BTreeSet::new();
        for line in lines {
            for w in line.split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
                chars.extend(w.chars());
            }
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for c in &chars {
            tokens.push(c.to_string());
        }
        for c in &chars {
            tokens.push(format!("{CONTINUATION}{c}"));
        }
        if tokens.len() > max_size {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} cannot hold the {} specials and characters",
                tokens.len()
            )));
        }
        let mut words: Vec<(&str, u64)> = word_counts
            .into_iter()
            .filter(|(w, _)| w.chars().count() > 1)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size - tokens.len();
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Greedy longest-match segmentation of one whitespace-free word.
    /// Runs of characters no piece covers collapse into a single UNK.
    pub fn tokenize_word(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let byte_at = |i: usize| chars.get(i).map_or(word.len(), |c| c.0);
        let mut piece = String::new();
        let mut i = 0;
        let mut in_unk = false;
        while i < chars.len() {
            let mut found = None;
            let longest = (chars.len() - i).min(self.max_piece_chars);
            for len in (1..=longest).rev() {
                piece.clear();
                if i > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[byte_at(i)..byte_at(i + len)]);
                if let Some(&id) = self.ids.get(piece.as_str()) {
                    found = Some((id, len));
                    break;
                }
            }
            match found {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                    in_unk = false;
                }
                None => {
                    if !in_unk {
                        out.push(UNK);
                    }
                    in_unk = true;
                    i += 1;
                }
            }
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.tokenize_word(w, &mut out);
        }
        out
    }

    /// Joins pieces back into text; continuation pieces attach to the
    /// previous piece, everything else starts a new word.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// Restricts the vocabulary to the tokens a map keeps, in new-id order.
    pub fn reduce(&self, map: &VocabMap) -> Result<Vocabulary> {
        if map.old_len() != self.len() {
            return Err(Error::Dimension(format!(
                "map covers {} ids, vocabulary has {}",
                map.old_len(),
                self.len()
            )));
        }
        Self::from_tokens(map.kept().iter().map(|&o| self.tokens[o].clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| Error::parse(path.display(), 0, e.to_string()))
    }
}

/// Relative frequency of every vocabulary id in the tokenized corpus.
pub fn unigram_probs<'s>(lines: impl IntoIterator<Item = &'s str>, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; vocab.len()];
    let mut ids = Vec::new();
    for line in lines {
        ids.clear();
        for w in line.split_whitespace() {
            vocab.tokenize_word(w, &mut ids);
        }
        for &id in &ids {
            counts[id] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("corpus contains no tokens".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Writes `token<TAB>prob` lines.
pub fn save_probs(path: &Path, vocab: &Vocabulary, probs: &[f64]) -> Result<()> {
    let text: String = vocab
        .tokens()
        .iter()
        .zip(probs)
        .map(|(t, p)| format!("{t}\t{p:e}\n"))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Order-preserving injection from the kept old ids onto `0..kept.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMap {
    kept: Vec<usize>,
    old_to_new: Vec<Option<usize>>,
}

impl VocabMap {
    pub fn identity(size: usize) -> Self {
        VocabMap {
            kept: (0..size).collect(),
            old_to_new: (0..size).map(Some).collect(),
        }
    }

    /// `kept` is deduplicated and sorted; specials are always added.
    pub fn from_kept(mut kept: Vec<usize>, old_size: usize) -> Result<Self> {
        if old_size < NUM_SPECIALS {
            return Err(Error::Contract(format!("vocabulary of {old_size} ids lacks the specials")));
        }
        kept.extend(0..NUM_SPECIALS);
        kept.sort_unstable();
        kept.dedup();
        if let Some(&bad) = kept.iter().find(|&&k| k >= old_size) {
            return Err(Error::Contract(format!("kept id {bad} outside a vocabulary of {old_size}")));
        }
        let mut old_to_new = vec![None; old_size];
        for (new, &old) in kept.iter().enumerate() {
            old_to_new[old] = Some(new);
        }
        Ok(VocabMap { kept, old_to_new })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn old_len(&self) -> usize {
        self.old_to_new.len()
    }

    pub fn new_len(&self) -> usize {
        self.kept.len()
    }

    pub fn old_to_new(&self, old: usize) -> Option<usize> {
        self.old_to_new.get(old).copied().flatten()
    }

    pub fn new_to_old(&self, new: usize) -> Option<usize> {
        self.kept.get(new).copied()
    }

    pub fn is_identity(&self) -> bool {
        self.kept.len() == self.old_to_new.len()
    }

    /// First line `old_size<TAB>N`, then one kept old id per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("old_size\t{}\n", self.old_len());
        for k in &self.kept {
            text.push_str(&format!("{k}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut lines = text.lines();
        let old_size = lines
            .next()
            .and_then(|l| l.strip_prefix("old_size\t"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::parse(&origin, 1, "expected old_size<TAB>N"))?;
        let mut kept = Vec::new();
        for (i, l) in lines.enumerate() {
            kept.push(l.trim().parse().map_err(|_| Error::parse(&origin, i + 2, "expected an id"))?);
        }
        if kept.windows(2).any(|w: &[usize]| w[0] >= w[1]) {
            return Err(Error::parse(&origin, 0, "kept ids must be strictly increasing"));
        }
        Self::from_kept(kept, old_size)
    }

    /// Re-indexes a sequence; dropped ids become UNK.
    pub fn map_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.old_to_new(i).unwrap_or(UNK)).collect()
    }
}

/// Keeps specials plus every token whose probability reaches `threshold`
/// in either language.
pub fn reduce_vocabulary(p_src: &[f64], p_tgt: &[f64], threshold: f64) -> Result<VocabMap> {
    if p_src.len() != p_tgt.len() {
        return Err(Error::Dimension(format!(
            "probability vectors of length {} and {}",
            p_src.len(),
            p_tgt.len()
        )));
    }
    let kept = (0..p_src.len())
        .filter(|&t| p_src[t] >= threshold || p_tgt[t] >= threshold)
        .collect();
    VocabMap::from_kept(kept, p_src.len())
}

/// Rows of the embedding table and MLM output layer indexed by vocabulary id.
const VOCAB_ROW_PARAMS: [&str; 3] = ["embeddings.token", "head.mlm.decoder.weight", "head.mlm.decoder.bias"];

/// Copies the model with every vocabulary-indexed parameter restricted to
/// the kept rows, in new-id order. Nothing else changes.
pub fn slice_embeddings(model: &Model, map: &VocabMap) -> Result<Model> {
    let v = model.config.vocab_size;
    if map.old_len() != v {
        return Err(Error::Contract(format!(
            "map covers {} ids, model vocabulary has {v}",
            map.old_len()
        )));
    }
    if let Some(&bad) = map.kept().iter().find(|&&k| k >= v) {
        return Err(Error::Contract(format!("kept id {bad} outside a vocabulary of {v}")));
    }
    let mut out = model.clone();
    if map.is_identity() {
        return Ok(out);
    }
    for name in VOCAB_ROW_PARAMS {
        let Some(t) = model.params.get(name) else { continue };
        let width = t.numel() / v;
        let mut data = Vec::with_capacity(map.new_len() * width);
        for &old in map.kept() {
            data.extend_from_slice(&t.data()[old * width..(old + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = map.new_len();
        out.params.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    out.config.vocab_size = map.new_len();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.extend(words.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn empty_text_gives_no_tokens() {
        assert!(vocab(&["a"]).tokenize("").is_empty());
    }

    #[test]
    fn in_vocab_word_is_one_token() {
        let v = vocab(&["hello", "h", "##e"]);
        assert_eq!(v.tokenize("hello"), vec![5]);
    }

    #[test]
    fn longest_prefix_wins_and_gaps_become_one_unk() {
        let v = vocab(&["ab", "a", "##b", "##c", "##bc"]);
        assert_eq!(v.tokenize("abc"), vec![5, 8]);
        assert_eq!(v.tokenize("abcbc"), vec![5, 8, 9]);
        assert_eq!(v.tokenize("axyb"), vec![6, UNK, 7]);
        assert_eq!(v.tokenize("zz ab"), vec![UNK, 5]);
    }

    #[test]
    fn detokenize_round_trips_covered_text() {
        let v = Vocabulary::build(["the cat sat", "a dog ran"], 64).unwrap();
        let text = "the  dog\tsat cart";
        assert_eq!(v.detokenize(&v.tokenize(text)), "the dog sat cart");
    }

    #[test]
    fn specials_must_lead() {
        let err = Vocabulary::from_tokens(vec!["x".into()]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.push("[PAD]".into());
        assert!(Vocabulary::from_tokens(t).is_err());
    }

    #[test]
    fn unigram_counts() {
        let v = vocab(&["x", "y"]);
        let p = unigram_probs(["x x", "x"], &v).unwrap();
        assert_eq!(p[5], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        let p = unigram_probs(["x y x", "x"], &v).unwrap();
        assert_eq!((p[5], p[6]), (0.75, 0.25));
        assert!(matches!(unigram_probs(["", " "], &v), Err(Error::Domain(_))));
    }

    #[test]
    fn reduction_rule() {
        let mut src = vec![0.0; 8];
        let mut tgt = vec![0.0; 8];
        src[5] = 2e-6;
        src[6] = 5e-7;
        tgt[6] = 5e-7;
        src[7] = 1e-6;
        let m = reduce_vocabulary(&src, &tgt, 1e-6).unwrap();
        assert_eq!(m.kept(), &[0, 1, 2, 3, 4, 5, 7]);
        assert_eq!(m.old_to_new(7), Some(6));
        assert_eq!(m.old_to_new(6), None);
        assert_eq!(m.map_ids(&[6, 7]), vec![UNK, 6]);
        assert!(matches!(reduce_vocabulary(&src, &tgt[..3], 1e-6), Err(Error::Dimension(_))));
    }

    #[test]
    fn slicing_copies_kept_rows() {
        use crate::model::{HeadKind, ModelConfig};
        let config = ModelConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_heads: 2,
            ffn_dim: 8,
            vocab_size: 12,
            max_seq_len: 4,
            dropout: 0.0,
        };
        let m = Model::init(config, Some(HeadKind::Mlm), 3).unwrap();
        assert_eq!(slice_embeddings(&m, &VocabMap::identity(12)).unwrap(), m);
        let map = VocabMap::from_kept(vec![7, 9], 12).unwrap();
        let s = slice_embeddings(&m, &map).unwrap();
        assert_eq!(s.config.vocab_size, 7);
        assert_eq!(s.params["embeddings.token"].row(5), m.params["embeddings.token"].row(7));
        assert_eq!(s.params["head.mlm.decoder.weight"].row(6), m.params["head.mlm.decoder.weight"].row(9));
        assert_eq!(s.params["head.mlm.decoder.bias"].data()[6], m.params["head.mlm.decoder.bias"].data()[9]);
        assert_eq!(s.params["layer.1.attn.key.weight"], m.params["layer.1.attn.key.weight"]);
        s.validate().unwrap();
        let wrong = VocabMap::identity(13);
        assert!(matches!(slice_embeddings(&m, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["un deux trois"], 100).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
