//! Task dataset formats.
//!
//! * token classification: CoNLL style, `token<TAB>label` per line, a blank
//!   line after every sentence;
//! * pair classification: TSV `premise<TAB>hypothesis<TAB>label`;
//! * span extraction: JSON lines with `context`, `question`,
//!   `answer_start` (character offset) and `answer_text`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value};

use super::{TextEncoder, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::vocab::{CLS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    TokenClassification,
    PairClassification,
    SpanExtraction,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::TokenClassification => "tokens",
            TaskKind::PairClassification => "pairs",
            TaskKind::SpanExtraction => "spans",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(TaskKind::TokenClassification),
            "pairs" => Ok(TaskKind::PairClassification),
            "spans" => Ok(TaskKind::SpanExtraction),
            _ => Err(Error::Config(format!("unknown task kind {s:?} (tokens, pairs, spans)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskExample {
    Tokens { tokens: Vec<String>, labels: Vec<usize> },
    Pair { premise: String, hypothesis: String, label: usize },
    Span { context: String, question: String, answer_start: usize, answer_text: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    /// Label strings; a label id is an index into this list. Empty for spans.
    pub labels: Vec<String>,
    pub examples: Vec<TaskExample>,
}

fn char_slice(s: &str, start: usize, len: usize) -> Option<String> {
    let total = s.chars().count();
    (start + len <= total).then(|| s.chars().skip(start).take(len).collect())
}

/// Loads a dataset. Labels are resolved against `labels` when given,
/// otherwise against the sorted set of labels present in the file.
pub fn load_task_dataset(path: &Path, kind: TaskKind, labels: Option<&[String]>) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    parse_task(&text, &origin, kind, labels)
}

pub(crate) fn parse_task(text: &str, origin: &str, kind: TaskKind, labels: Option<&[String]>) -> Result<TaskDataset> {
    // raw label strings, resolved to ids once the label vocabulary is known
    let mut raw: Vec<(usize, RawExample)> = Vec::new();
    enum RawExample {
        Tokens(Vec<String>, Vec<String>),
        Pair(String, String, String),
        Span(TaskExample),
    }
    match kind {
        TaskKind::TokenClassification => {
            let (mut toks, mut labs, mut start) = (Vec::new(), Vec::new(), 0);
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    if !toks.is_empty() {
                        raw.push((start, RawExample::Tokens(std::mem::take(&mut toks), std::mem::take(&mut labs))));
                    }
                    continue;
                }
                let Some((t, l)) = line.split_once('\t') else {
                    return Err(Error::parse(origin, i + 1, "expected `token<TAB>label`"));
                };
                if t.is_empty() || l.is_empty() || l.contains('\t') || t.chars().any(char::is_whitespace) {
                    return Err(Error::parse(origin, i + 1, "expected `token<TAB>label`"));
                }
                if toks.is_empty() {
                    start = i + 1;
                }
                toks.push(t.to_string());
                labs.push(l.to_string());
            }
            if !toks.is_empty() {
                raw.push((start, RawExample::Tokens(toks, labs)));
            }
        }
        TaskKind::PairClassification => {
            for (i, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                let [p, h, l] = cols[..] else {
                    return Err(Error::parse(origin, i + 1, "expected `premise<TAB>hypothesis<TAB>label`"));
                };
                if p.trim().is_empty() || l.is_empty() {
                    return Err(Error::parse(origin, i + 1, "empty premise or label"));
                }
                raw.push((i + 1, RawExample::Pair(p.into(), h.into(), l.into())));
            }
        }
        TaskKind::SpanExtraction => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |m: &str| Error::parse(origin, i + 1, m);
                let v: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
                let field = |k: &str| v.get(k).and_then(Value::as_str).map(str::to_string);
                let (Some(context), Some(question), Some(answer_text)) =
                    (field("context"), field("question"), field("answer_text"))
                else {
                    return Err(bad("missing context, question or answer_text"));
                };
                let answer_start = v
                    .get("answer_start")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| bad("answer_start must be a non-negative integer"))? as usize;
                if answer_text.is_empty()
                    || char_slice(&context, answer_start, answer_text.chars().count()).as_deref() != Some(&answer_text)
                {
                    return Err(Error::Data(format!(
                        "{origin}:{}: answer_text does not match the context at answer_start",
                        i + 1
                    )));
                }
                raw.push((i + 1, RawExample::Span(TaskExample::Span { context, question, answer_start, answer_text })));
            }
        }
    }

    let label_vocab: Vec<String> = match (kind, labels) {
        (TaskKind::SpanExtraction, _) => Vec::new(),
        (_, Some(l)) => l.to_vec(),
        (_, None) => {
            let mut set = BTreeSet::new();
            for (_, r) in &raw {
                match r {
                    RawExample::Tokens(_, ls) => set.extend(ls.iter().cloned()),
                    RawExample::Pair(_, _, l) => {
                        set.insert(l.clone());
                    }
                    RawExample::Span(_) => {}
                }
            }
            set.into_iter().collect()
        }
    };
    let resolve = |l: &str, line: usize| {
        label_vocab
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::Data(format!("{origin}:{line}: label {l:?} is not in the label vocabulary")))
    };
    let mut examples = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        examples.push(match r {
            RawExample::Tokens(tokens, ls) => {
                let labels = ls
                    .iter()
                    .enumerate()
                    .map(|(j, l)| resolve(l, line + j))
                    .collect::<Result<_>>()?;
                TaskExample::Tokens { tokens, labels }
            }
            RawExample::Pair(premise, hypothesis, l) => TaskExample::Pair { premise, hypothesis, label: resolve(&l, line)? },
            RawExample::Span(e) => e,
        });
    }
    Ok(TaskDataset { kind, labels: label_vocab, examples })
}

/// Canonical text form; `load_task_dataset` reads it back unchanged.
pub fn render_task(ds: &TaskDataset) -> String {
    let mut out = String::new();
    for e in &ds.examples {
        match e {
            TaskExample::Tokens { tokens, labels } => {
                for (t, &l) in tokens.iter().zip(labels) {
                    out.push_str(&format!("{t}\t{}\n", ds.labels[l]));
                }
                out.push('\n');
            }
            TaskExample::Pair { premise, hypothesis, label } => {
                out.push_str(&format!("{premise}\t{hypothesis}\t{}\n", ds.labels[*label]));
            }
            TaskExample::Span { context, question, answer_start, answer_text } => {
                let v = json!({
                    "context": context,
                    "question": question,
                    "answer_start": answer_start,
                    "answer_text": answer_text,
                });
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
    }
    out
}

pub fn save_task_dataset(path: &Path, ds: &TaskDataset) -> Result<()> {
    fs::write(path, render_task(ds)).map_err(|e| Error::io(path, e))
}

/// Supervision for one encoded example.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Per input position; `IGNORE_LABEL` on specials and continuation pieces.
    Tokens(Vec<i64>),
    Class(usize),
    /// Token positions of the answer; `IGNORE_LABEL` if truncated away.
    Span { start: i64, end: i64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// Root-vocabulary ids (before any vocabulary map).
    pub ids: Vec<usize>,
    pub target: Target,
}

/// Whitespace-separated words with their character offsets.
fn words_with_offsets(s: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    let mut ci = 0;
    for (bi, ch) in s.char_indices() {
        if ch.is_whitespace() {
            if let Some((cs, bs)) = start.take() {
                out.push((cs, ci, &s[bs..bi]));
            }
        } else if start.is_none() {
            start = Some((ci, bi));
        }
        ci += 1;
    }
    if let Some((cs, bs)) = start {
        out.push((cs, ci, &s[bs..]));
    }
    out
}

pub fn encode_task(ds: &TaskDataset, enc: &TextEncoder) -> Vec<Encoded> {
    let max = enc.max_len;
    ds.examples
        .iter()
        .map(|e| match e {
            TaskExample::Tokens { tokens, labels } => {
                let mut ids = vec![CLS];
                let mut tl = vec![IGNORE_LABEL];
                for (t, &l) in tokens.iter().zip(labels) {
                    let before = ids.len();
                    enc.vocab.tokenize_word(t, &mut ids);
                    tl.push(l as i64);
                    tl.extend(std::iter::repeat_n(IGNORE_LABEL, ids.len() - before - 1));
                }
                ids.truncate(max - 1);
                tl.truncate(max - 1);
                ids.push(SEP);
                tl.push(IGNORE_LABEL);
                Encoded { ids, target: Target::Tokens(tl) }
            }
            TaskExample::Pair { premise, hypothesis, label } => Encoded {
                ids: enc.encode_pair_root(premise, hypothesis),
                target: Target::Class(*label),
            },
            TaskExample::Span { context, question, answer_start, answer_text } => {
                let mut ids = vec![CLS];
                ids.extend(enc.vocab.tokenize(question));
                ids.push(SEP);
                let answer_end = answer_start + answer_text.chars().count();
                let (mut start, mut end) = (IGNORE_LABEL, IGNORE_LABEL);
                for (cs, ce, w) in words_with_offsets(context) {
                    let before = ids.len();
                    enc.vocab.tokenize_word(w, &mut ids);
                    if ce > *answer_start && cs < answer_end {
                        if start == IGNORE_LABEL {
                            start = before as i64;
                        }
                        end = ids.len() as i64 - 1;
                    }
                }
                ids.truncate(max - 1);
                ids.push(SEP);
                if end >= max as i64 - 1 {
                    start = IGNORE_LABEL;
                    end = IGNORE_LABEL;
                }
                Encoded { ids, target: Target::Span { start, end } }
            }
        })
        .collect()
}
