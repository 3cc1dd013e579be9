//! Synthetic multilingual world for desk-scale experiments.
//!
//! A latent grammar emits sentences over abstract concepts (function words,
//! topic words, generic words). Each language renders every concept as a
//! word built from its own syllable inventory, so languages share no
//! surface forms except the concepts `overlap` marks as shared. The
//! downstream task is topic classification: a sentence's label is the
//! topic most of its topic words come from, which is recoverable in every
//! language.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_corpus, TaskDataset, TaskExample, TaskKind};
use crate::error::{Error, Result};

/// Consonant and vowel inventories, one script per language.
const SCRIPTS: [(&str, &str); 4] = [
    ("bdfgklmnprstvz", "aeiou"),
    ("βγδζθκλμνξπρστφχψ", "αεηιουω"),
    ("бвгджзклмнпрстфх", "аеиоуэюя"),
    ("ბგდვზთკლმნპრსტფქ", "აეიოუ"),
];

pub const MAX_LANGUAGES: usize = SCRIPTS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of latent concepts (the size of each language's lexicon).
    pub concepts: usize,
    /// Lines in each of the source and target corpora.
    pub lines: usize,
    /// Fraction of concepts whose target form equals the source form.
    pub overlap: f64,
    pub topics: usize,
    /// Extra languages that only appear in the pretraining mixture.
    pub aux_languages: usize,
    /// Code-switched lines in the pretraining mixture, as a fraction of `lines`.
    pub code_switch: f64,
    pub task_train: usize,
    pub task_val: usize,
    pub task_test: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, concepts: usize, lines: usize, overlap: f64) -> Self {
        SynthConfig {
            seed,
            concepts,
            lines,
            overlap,
            topics: 4,
            aux_languages: 2,
            code_switch: 0.5,
            task_train: 2000,
            task_val: 400,
            task_test: 1000,
            min_len: 6,
            max_len: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if self.aux_languages + 2 > MAX_LANGUAGES {
            return Err(Error::Config(format!("at most {} auxiliary languages", MAX_LANGUAGES - 2)));
        }
        if self.topics < 2 || self.concepts < 10 * self.topics {
            return Err(Error::Config(format!(
                "need at least 2 topics and 10 concepts per topic, got {} concepts for {} topics",
                self.concepts, self.topics
            )));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Config("sentence lengths must satisfy 3 <= min_len <= max_len".into()));
        }
        if !(0.0..=10.0).contains(&self.code_switch) {
            return Err(Error::Config("code_switch must be in [0, 10]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Concept {
    Function,
    Topic(usize),
    Generic,
}

/// Concept inventory and per-language surface forms.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub concepts: Vec<Concept>,
    /// `forms[language][concept]`; language 0 is the source, 1 the target.
    pub forms: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn render(&self, sentence: &[usize], language: usize) -> String {
        sentence
            .iter()
            .map(|&c| self.forms[language][c].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("concept\tkind");
        for l in 0..self.forms.len() {
            let _ = write!(out, "\tlang{l}");
        }
        out.push('\n');
        for (i, c) in self.concepts.iter().enumerate() {
            let kind = match c {
                Concept::Function => "function".to_string(),
                Concept::Topic(t) => format!("topic{t}"),
                Concept::Generic => "generic".to_string(),
            };
            let _ = write!(out, "{i}\t{kind}");
            for f in &self.forms {
                let _ = write!(out, "\t{}", f[i]);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub lexicon: Lexicon,
    /// Parallel source/target renderings of the same latent sentences.
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// Mixture used to pretrain the multilingual teacher: monolingual text
    /// in every language plus code-switched lines.
    pub pretrain: Vec<String>,
    pub task_train: TaskDataset,
    pub task_val: TaskDataset,
    pub task_test_src: TaskDataset,
    pub task_test_tgt: TaskDataset,
}

pub fn topic_label(t: usize) -> String {
    format!("topic{t}")
}

fn make_word(rng: &mut ChaCha8Rng, script: (&str, &str), used: &mut HashSet<String>) -> String {
    let cons: Vec<char> = script.0.chars().collect();
    let vows: Vec<char> = script.1.chars().collect();
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*cons.choose(rng).expect("nonempty inventory"));
            w.push(*vows.choose(rng).expect("nonempty inventory"));
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn build_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Lexicon {
    let n = cfg.concepts;
    let function = (n / 10).max(4);
    let per_topic = (2 * n / 5) / cfg.topics;
    let mut concepts = vec![Concept::Function; function];
    for t in 0..cfg.topics {
        concepts.extend(std::iter::repeat_n(Concept::Topic(t), per_topic));
    }
    concepts.resize(n, Concept::Generic);

    let languages = 2 + cfg.aux_languages;
    let shared: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.overlap).collect();
    let mut forms: Vec<Vec<String>> = Vec::with_capacity(languages);
    for (l, script) in SCRIPTS.iter().enumerate().take(languages) {
        let mut used = HashSet::new();
        let words: Vec<String> = (0..n)
            .map(|c| {
                if l == 1 && shared[c] {
                    forms[0][c].clone()
                } else {
                    make_word(rng, *script, &mut used)
                }
            })
            .collect();
        forms.push(words);
    }
    Lexicon { concepts, forms }
}

/// One latent sentence and its topic. The labelled topic strictly
/// outnumbers every other topic among the sentence's topic words.
fn latent_sentence(cfg: &SynthConfig, lex: &Lexicon, by_kind: &ByKind, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let topic = rng.random_range(0..cfg.topics);
    loop {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut counts = vec![0usize; cfg.topics];
        let sentence: Vec<usize> = (0..len)
            .map(|_| {
                let r: f64 = rng.random();
                if r < 0.15 {
                    *by_kind.function.choose(rng).expect("function words exist")
                } else if r < 0.7 {
                    let t = if rng.random::<f64>() < 0.1 { rng.random_range(0..cfg.topics) } else { topic };
                    counts[t] += 1;
                    *by_kind.topic[t].choose(rng).expect("topic words exist")
                } else {
                    *by_kind.generic.choose(rng).expect("generic words exist")
                }
            })
            .collect();
        let rival = (0..cfg.topics).filter(|&t| t != topic).map(|t| counts[t]).max().unwrap_or(0);
        if counts[topic] >= 2 && counts[topic] > rival {
            debug_assert!(sentence.iter().all(|&c| c < lex.concepts.len()));
            return (sentence, topic);
        }
    }
}

struct ByKind {
    function: Vec<usize>,
    topic: Vec<Vec<usize>>,
    generic: Vec<usize>,
}

fn task_set(items: Vec<(String, usize)>, topics: usize) -> TaskDataset {
    TaskDataset {
        kind: TaskKind::PairClassification,
        labels: (0..topics).map(topic_label).collect(),
        examples: items
            .into_iter()
            .map(|(premise, label)| TaskExample::Pair { premise, hypothesis: String::new(), label })
            .collect(),
    }
}

/// Generates the whole synthetic world from `(seed, config)`.
pub fn synth_bilingual_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let lexicon = build_lexicon(cfg, &mut stream(1));
    let by_kind = ByKind {
        function: (0..cfg.concepts).filter(|&c| lexicon.concepts[c] == Concept::Function).collect(),
        topic: (0..cfg.topics)
            .map(|t| (0..cfg.concepts).filter(|&c| lexicon.concepts[c] == Concept::Topic(t)).collect())
            .collect(),
        generic: (0..cfg.concepts).filter(|&c| lexicon.concepts[c] == Concept::Generic).collect(),
    };

    let mut rng = stream(2);
    let mut src = Vec::with_capacity(cfg.lines);
    let mut tgt = Vec::with_capacity(cfg.lines);
    for _ in 0..cfg.lines {
        let (s, _) = latent_sentence(cfg, &lexicon, &by_kind, &mut rng);
        src.push(lexicon.render(&s, 0));
        tgt.push(lexicon.render(&s, 1));
    }

    let mut rng = stream(3);
    let languages = lexicon.forms.len();
    let mut pretrain = Vec::new();
    for l in 0..languages {
        for _ in 0..cfg.lines {
            let (s, _) = latent_sentence(cfg, &lexicon, &by_kind, &mut rng);
            pretrain.push(lexicon.render(&s, l));
        }
    }
    let switched = (cfg.code_switch * cfg.lines as f64).round() as usize;
    for _ in 0..switched {
        let (s, _) = latent_sentence(cfg, &lexicon, &by_kind, &mut rng);
        let a = rng.random_range(0..languages);
        let b = (a + rng.random_range(1..languages)) % languages;
        let words: Vec<&str> = s
            .iter()
            .map(|&c| lexicon.forms[if rng.random::<bool>() { a } else { b }][c].as_str())
            .collect();
        pretrain.push(words.join(" "));
    }
    // interleave deterministically so any prefix mixes languages
    let mut order: Vec<usize> = (0..pretrain.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let pretrain = order.into_iter().map(|i| pretrain[i].clone()).collect();

    let mut rng = stream(4);
    let mut draw = |n: usize, language: usize| -> Vec<(String, usize)> {
        (0..n)
            .map(|_| {
                let (s, t) = latent_sentence(cfg, &lexicon, &by_kind, &mut rng);
                (lexicon.render(&s, language), t)
            })
            .collect()
    };
    let task_train = task_set(draw(cfg.task_train, 0), cfg.topics);
    let task_val = task_set(draw(cfg.task_val, 0), cfg.topics);
    let test: Vec<(Vec<usize>, usize)> = (0..cfg.task_test)
        .map(|_| latent_sentence(cfg, &lexicon, &by_kind, &mut rng))
        .collect();
    let render_all = |l: usize| test.iter().map(|(s, t)| (lexicon.render(s, l), *t)).collect();
    let task_test_src = task_set(render_all(0), cfg.topics);
    let task_test_tgt = task_set(render_all(1), cfg.topics);

    Ok(SynthCorpus { lexicon, src, tgt, pretrain, task_train, task_val, task_test_src, task_test_tgt })
}

pub const FILES: [&str; 9] = [
    "src.txt",
    "tgt.txt",
    "pretrain.txt",
    "lexicon.tsv",
    "task_train.tsv",
    "task_val.tsv",
    "task_test_src.tsv",
    "task_test_tgt.tsv",
    "synth.cfg",
];

impl SynthCorpus {
    pub fn save(&self, dir: &Path, cfg: &SynthConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&dir.join(FILES[0]), &self.src)?;
        write_corpus(&dir.join(FILES[1]), &self.tgt)?;
        write_corpus(&dir.join(FILES[2]), &self.pretrain)?;
        let lp = dir.join(FILES[3]);
        fs::write(&lp, self.lexicon.to_tsv()).map_err(|e| Error::io(&lp, e))?;
        for (name, ds) in FILES[4..8]
            .iter()
            .zip([&self.task_train, &self.task_val, &self.task_test_src, &self.task_test_tgt])
        {
            super::save_task_dataset(&dir.join(name), ds)?;
        }
        crate::kv::write(
            &dir.join(FILES[8]),
            [
                ("seed", cfg.seed.to_string()),
                ("concepts", cfg.concepts.to_string()),
                ("lines", cfg.lines.to_string()),
                ("overlap", cfg.overlap.to_string()),
                ("topics", cfg.topics.to_string()),
                ("aux_languages", cfg.aux_languages.to_string()),
                ("code_switch", cfg.code_switch.to_string()),
                ("task_train", cfg.task_train.to_string()),
                ("task_val", cfg.task_val.to_string()),
                ("task_test", cfg.task_test.to_string()),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, overlap: f64) -> SynthConfig {
        SynthConfig { task_train: 20, task_val: 5, task_test: 10, ..SynthConfig::new(seed, 60, 50, overlap) }
    }

    #[test]
    fn full_overlap_gives_identical_corpora() {
        let c = synth_bilingual_corpus(&small(3, 1.0)).unwrap();
        assert_eq!(c.src, c.tgt);
        assert_eq!(c.lexicon.forms[0], c.lexicon.forms[1]);
    }

    #[test]
    fn zero_overlap_shares_no_words() {
        let c = synth_bilingual_corpus(&small(3, 0.0)).unwrap();
        let src: HashSet<&str> = c.src.iter().flat_map(|l| l.split(' ')).collect();
        assert!(c.tgt.iter().flat_map(|l| l.split(' ')).all(|w| !src.contains(w)));
    }

    #[test]
    fn seeded_output_is_stable() {
        assert_eq!(synth_bilingual_corpus(&small(9, 0.2)).unwrap(), synth_bilingual_corpus(&small(9, 0.2)).unwrap());
        assert_ne!(synth_bilingual_corpus(&small(9, 0.2)).unwrap().src, synth_bilingual_corpus(&small(10, 0.2)).unwrap().src);
    }

    #[test]
    fn labels_follow_the_majority_topic() {
        let cfg = small(5, 0.0);
        let c = synth_bilingual_corpus(&cfg).unwrap();
        let topic_of = |w: &str| {
            let i = c.lexicon.forms[1].iter().position(|f| f == w).unwrap();
            match c.lexicon.concepts[i] {
                Concept::Topic(t) => Some(t),
                _ => None,
            }
        };
        for e in &c.task_test_tgt.examples {
            let TaskExample::Pair { premise, label, .. } = e else { panic!() };
            let mut counts = vec![0; cfg.topics];
            premise.split(' ').filter_map(topic_of).for_each(|t| counts[t] += 1);
            let best = (0..cfg.topics).max_by_key(|&t| counts[t]).unwrap();
            assert_eq!(best, *label);
        }
    }

    #[test]
    fn bad_overlap_is_rejected() {
        assert!(synth_bilingual_corpus(&small(1, 1.5)).is_err());
    }
}
