//! Task metrics, efficiency measurement and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{encode_task, Encoded, Target, TaskDataset, TaskExample, TaskKind, TextEncoder, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{count_flops, count_params, Batch, HeadCost, HeadKind, Model};
use crate::tensor::Tensor;
use crate::train::DEFAULT_EVAL_BATCH;
use crate::vocab::SEP;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "BISTIL_THREADS";

/// Longest answer, in tokens, considered during span decoding.
pub const MAX_ANSWER_TOKENS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    /// Percentage in `[0, 100]`.
    pub value: f64,
    pub per_class: Vec<(String, f64)>,
    pub count: usize,
    /// Extra metrics reported alongside the main one (span F1).
    pub extra: Vec<(String, f64)>,
}

/// Threads used for evaluation: `BISTIL_THREADS` when set to a positive
/// integer, otherwise rayon's default.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Head logits for every chunk of `seqs`, in order. Chunking is fixed, so
/// the output does not depend on the thread count.
pub fn batched_logits(model: &Model, seqs: &[Vec<usize>], max_len: usize, threads: usize) -> Result<Vec<(Batch, Tensor)>> {
    let chunks: Vec<&[Vec<usize>]> = seqs.chunks(DEFAULT_EVAL_BATCH).collect();
    let job = |c: &&[Vec<usize>]| -> Result<(Batch, Tensor)> {
        let b = Batch::from_sequences(c, max_len)?;
        let z = model.logits(&b)?;
        Ok((b, z))
    };
    if threads <= 1 {
        return chunks.iter().map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} evaluation threads: {e}")))?;
    pool.install(|| chunks.par_iter().map(job).collect())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Typed entity `(type, first, last)` with inclusive word indices.
pub type Entity = (String, usize, usize);

fn split_tag(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some((p, t)) if p.len() == 1 => (p.chars().next().expect("one char"), t),
        _ => ('O', ""),
    }
}

/// Entities in a BIO sequence. As in conlleval, an `I-X` that does not
/// continue an `X` entity starts a new one.
pub fn bio_entities(tags: &[String]) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (p, t) = split_tag(tag);
        let continues = p == 'I' && open.as_ref().is_some_and(|(ot, _)| ot == t);
        if !continues {
            if let Some((ot, s)) = open.take() {
                out.push((ot, s, i - 1));
            }
            if p == 'B' || p == 'I' {
                open = Some((t.to_string(), i));
            }
        }
    }
    if let Some((ot, s)) = open {
        out.push((ot, s, tags.len() - 1));
    }
    out
}

fn f1(correct: usize, predicted: usize, gold: usize) -> f64 {
    if correct == 0 {
        return 0.0;
    }
    let p = correct as f64 / predicted as f64;
    let r = correct as f64 / gold as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Micro-averaged entity F1 over sentences, plus F1 per entity type.
pub fn entity_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<(f64, Vec<(String, f64)>)> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold and {} predicted sentences", gold.len(), pred.len())));
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    let mut total = [0usize; 3];
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::Contract("gold and predicted tag sequences differ in length".into()));
        }
        let ge = bio_entities(g);
        let pe = bio_entities(p);
        for e in &ge {
            counts.entry(e.0.clone()).or_default()[2] += 1;
            total[2] += 1;
            if pe.contains(e) {
                counts.entry(e.0.clone()).or_default()[0] += 1;
                total[0] += 1;
            }
        }
        for e in &pe {
            counts.entry(e.0.clone()).or_default()[1] += 1;
            total[1] += 1;
        }
    }
    let per = counts.into_iter().map(|(t, c)| (t, f1(c[0], c[1], c[2]))).collect();
    Ok((f1(total[0], total[1], total[2]), per))
}

/// Accuracy and per-class recall, as percentages.
pub fn accuracy(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<(f64, Vec<(String, f64)>)> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold and {} predicted labels", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut per = vec![[0usize; 2]; labels.len()];
    let mut right = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        if g < per.len() {
            per[g][1] += 1;
            if g == p {
                per[g][0] += 1;
            }
        }
        right += usize::from(g == p);
    }
    let per_class = labels
        .iter()
        .zip(&per)
        .filter(|(_, c)| c[1] > 0)
        .map(|(l, c)| (l.clone(), 100.0 * c[0] as f64 / c[1] as f64))
        .collect();
    Ok((100.0 * right as f64 / gold.len() as f64, per_class))
}

fn normalize_answer(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Exact match and token-overlap F1 between two answer strings.
pub fn span_scores(pred: &str, gold: &str) -> (f64, f64) {
    let (p, g) = (normalize_answer(pred), normalize_answer(gold));
    let em = if p == g { 100.0 } else { 0.0 };
    if p.is_empty() || g.is_empty() {
        return (em, if p == g { 100.0 } else { 0.0 });
    }
    let mut pool: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &g {
        *pool.entry(w).or_default() += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = pool.get_mut(w.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    (em, f1(common, p.len(), g.len()))
}

/// Span `(start, end)` within `lo..hi` maximizing `start_logit + end_logit`
/// with `start ≤ end` and at most `MAX_ANSWER_TOKENS` tokens; the earliest
/// such span wins ties.
pub fn best_span(start: &[f32], end: &[f32], lo: usize, hi: usize) -> Option<(usize, usize)> {
    let mut best: Option<(f32, usize, usize)> = None;
    for s in lo..hi {
        for e in s..hi.min(s + MAX_ANSWER_TOKENS) {
            let v = start[s] + end[e];
            if best.is_none_or(|b| v > b.0) {
                best = Some((v, s, e));
            }
        }
    }
    best.map(|b| (b.1, b.2))
}

fn expected_head(kind: TaskKind, head: HeadKind, labels: usize) -> Result<()> {
    let ok = match (kind, head) {
        (TaskKind::TokenClassification, HeadKind::Token { num_labels }) => num_labels == labels,
        (TaskKind::PairClassification, HeadKind::Sequence { num_labels }) => num_labels == labels,
        (TaskKind::SpanExtraction, HeadKind::Span) => true,
        _ => false,
    };
    if !ok {
        return Err(Error::Contract(format!("{head} head cannot be evaluated on a {kind} dataset with {labels} labels")));
    }
    Ok(())
}

/// Context word index of every position of a span example's encoding.
fn span_word_positions(ex: &TaskExample, enc: &TextEncoder) -> Vec<Option<usize>> {
    let TaskExample::Span { context, question, .. } = ex else {
        return Vec::new();
    };
    let mut ids = Vec::new();
    let mut words = vec![None];
    words.extend(enc.vocab.tokenize(question).iter().map(|_| None));
    words.push(None);
    for (wi, w) in context.split_whitespace().enumerate() {
        ids.clear();
        enc.vocab.tokenize_word(w, &mut ids);
        words.extend(std::iter::repeat_n(Some(wi), ids.len()));
    }
    words
}

/// Scores `model` on `ds`, tokenizing with `enc` (whose map, if any, takes
/// root ids to the model's vocabulary).
pub fn evaluate(model: &Model, ds: &TaskDataset, enc: &TextEncoder) -> Result<EvalReport> {
    let head = model.head.ok_or_else(|| Error::Contract("model has no task head".into()))?;
    expected_head(ds.kind, head, ds.labels.len())?;
    let encoded: Vec<Encoded> = encode_task(ds, enc);
    let seqs: Vec<Vec<usize>> = encoded.iter().map(|e| enc.apply_map(&e.ids)).collect();
    let out = batched_logits(model, &seqs, enc.max_len, eval_threads())?;
    let count = ds.examples.len();

    match ds.kind {
        TaskKind::PairClassification => {
            let pred: Vec<usize> = out.iter().flat_map(|(_, z)| (0..z.rows()).map(|r| argmax(z.row(r)))).collect();
            let gold: Vec<usize> = encoded
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    _ => unreachable!("pair datasets encode class targets"),
                })
                .collect();
            let (value, per_class) = accuracy(&gold, &pred, &ds.labels)?;
            Ok(EvalReport { metric: "accuracy".into(), value, per_class, count, extra: Vec::new() })
        }
        TaskKind::TokenClassification => {
            let mut gold = Vec::with_capacity(count);
            let mut pred = Vec::with_capacity(count);
            let mut i = 0;
            for (b, z) in &out {
                for r in 0..b.batch {
                    let (ex, e) = (&ds.examples[i], &encoded[i]);
                    i += 1;
                    let TaskExample::Tokens { labels, .. } = ex else { unreachable!("token dataset") };
                    let Target::Tokens(tl) = &e.target else { unreachable!("token dataset") };
                    let mut p: Vec<String> = tl
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| l != IGNORE_LABEL)
                        .map(|(pos, _)| ds.labels[argmax(z.row(r * b.len + pos))].clone())
                        .collect();
                    p.resize(labels.len(), "O".to_string());
                    pred.push(p);
                    gold.push(labels.iter().map(|&l| ds.labels[l].clone()).collect());
                }
            }
            let (value, per_class) = entity_f1(&gold, &pred)?;
            Ok(EvalReport { metric: "entity_f1".into(), value, per_class, count, extra: Vec::new() })
        }
        TaskKind::SpanExtraction => {
            let (mut em, mut f) = (0.0, 0.0);
            let mut i = 0;
            for (b, z) in &out {
                for r in 0..b.batch {
                    let ex = &ds.examples[i];
                    let ids = &seqs[i];
                    i += 1;
                    let TaskExample::Span { context, answer_text, .. } = ex else { unreachable!("span dataset") };
                    let words: Vec<&str> = context.split_whitespace().collect();
                    let positions = span_word_positions(ex, enc);
                    let lo = ids.iter().position(|&t| t == SEP).map_or(ids.len(), |p| p + 1);
                    let hi = ids.len().saturating_sub(1);
                    let row = |c: usize| -> Vec<f32> { (0..b.len).map(|p| z.row(r * b.len + p)[c]).collect() };
                    let text = best_span(&row(0), &row(1), lo, hi)
                        .and_then(|(s, e)| Some((positions.get(s).copied().flatten()?, positions.get(e).copied().flatten()?)))
                        .map(|(ws, we)| words[ws..=we].join(" "))
                        .unwrap_or_default();
                    let (a, b2) = span_scores(&text, answer_text);
                    em += a;
                    f += b2;
                }
            }
            let n = count.max(1) as f64;
            Ok(EvalReport { metric: "exact_match".into(), value: em / n, per_class: Vec::new(), count, extra: vec![("f1".into(), f / n)] })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    pub params: u64,
    pub flops_per_example: f64,
    pub seconds_per_example: f64,
}

/// Candidate over reference. Speed is the inverse time ratio, so a model
/// twice as fast scores 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EfficiencyRatios {
    pub params: f64,
    pub flops: f64,
    pub speed: f64,
}

impl EfficiencyReport {
    pub fn relative_to(&self, reference: &EfficiencyReport) -> EfficiencyRatios {
        EfficiencyRatios {
            params: self.params as f64 / reference.params as f64,
            flops: self.flops_per_example / reference.flops_per_example,
            speed: reference.seconds_per_example / self.seconds_per_example,
        }
    }
}

/// Minimum timed repetitions.
pub const MIN_REPETITIONS: usize = 5;

/// Analytic FLOPs at the observed lengths and the median batch-size-one
/// CPU time per example over `repetitions` passes after one warm-up pass.
pub fn measure_efficiency(model: &Model, sample: &[Vec<usize>], repetitions: usize) -> Result<EfficiencyReport> {
    if sample.is_empty() {
        return Err(Error::Domain("efficiency sample is empty".into()));
    }
    let cfg = &model.config;
    let hc = HeadCost::of(model.head, cfg);
    let lens: Vec<usize> = sample.iter().map(|s| s.len().clamp(1, cfg.max_seq_len)).collect();
    let flops = lens.iter().map(|&l| count_flops(cfg, hc, l) as f64).sum::<f64>() / lens.len() as f64;
    let batches = sample
        .iter()
        .map(|s| Batch::from_sequences(std::slice::from_ref(s), cfg.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let pass = || -> Result<f64> {
        let t = Instant::now();
        for b in &batches {
            std::hint::black_box(model.forward(b)?);
        }
        Ok(t.elapsed().as_secs_f64() / batches.len() as f64)
    };
    pass()?;
    let mut times = (0..repetitions.max(MIN_REPETITIONS)).map(|_| pass()).collect::<Result<Vec<_>>>()?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    Ok(EfficiencyReport { params: count_params(model), flops_per_example: flops, seconds_per_example: median })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub report: EvalReport,
    pub efficiency: EfficiencyReport,
}

pub const COMPARE_HEADER: &str = "name\tmetric\tvalue\tdelta\tparams\tflops_ratio\tspeed_ratio";

/// TSV table with one row per run; deltas and ratios are relative to the
/// first run.
pub fn compare_report(runs: &[RunSummary]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Domain("no runs to compare".into()))?;
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in runs {
        let ratio = r.efficiency.relative_to(&first.efficiency);
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}\t{:.2}\t{}\t{:.3}\t{:.3}",
            r.name,
            r.report.metric,
            r.report.value,
            r.report.value - first.report.value,
            r.efficiency.params,
            ratio.flops,
            ratio.speed
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn conlleval_entity_boundaries() {
        let t = tags("B-PER I-PER O I-LOC B-LOC B-LOC I-PER O");
        assert_eq!(
            bio_entities(&t),
            vec![
                ("PER".to_string(), 0, 1),
                ("LOC".to_string(), 3, 3),
                ("LOC".to_string(), 4, 4),
                ("LOC".to_string(), 5, 5),
                ("PER".to_string(), 6, 6),
            ]
        );
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![tags("B-PER I-PER O B-ORG"), tags("O B-LOC")];
        assert_eq!(entity_f1(&gold, &gold).unwrap().0, 100.0);
        let none = vec![tags("O O O O"), tags("O O")];
        assert_eq!(entity_f1(&gold, &none).unwrap().0, 0.0);
    }

    #[test]
    fn hand_counted_f1() {
        let gold = vec![tags("B-PER I-PER O B-ORG"), tags("O B-LOC")];
        let pred = vec![tags("B-PER O O B-ORG"), tags("B-LOC B-LOC")];
        // correct: ORG, LOC(1); predicted 4; gold 3
        let (f, per) = entity_f1(&gold, &pred).unwrap();
        let (p, r) = (2.0 / 4.0, 2.0 / 3.0);
        assert!((f - 100.0 * 2.0 * p * r / (p + r)).abs() < 1e-9);
        assert_eq!(per.iter().find(|x| x.0 == "PER").unwrap().1, 0.0);
        assert_eq!(per.iter().find(|x| x.0 == "ORG").unwrap().1, 100.0);
    }

    #[test]
    fn majority_prediction_accuracy() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let gold = vec![0, 0, 0, 1];
        let (acc, per) = accuracy(&gold, &[0; 4], &labels).unwrap();
        assert_eq!(acc, 75.0);
        assert_eq!(per, vec![("a".to_string(), 100.0), ("b".to_string(), 0.0)]);
    }

    #[test]
    fn span_selection_and_scores() {
        let s = [0.0, 5.0, 1.0, 0.0, 9.0];
        let e = [0.0, 0.0, 4.0, 1.0, 0.0];
        // start may not follow end
        assert_eq!(best_span(&s, &e, 1, 4), Some((1, 2)));
        assert_eq!(best_span(&s, &e, 1, 1), None);
        assert_eq!(span_scores("The cat.", "the cat"), (100.0, 100.0));
        let (em, f) = span_scores("black cat", "the cat");
        assert_eq!(em, 0.0);
        assert!((f - 50.0).abs() < 1e-9);
    }

    fn summary(name: &str, v: f64, params: u64, flops: f64, secs: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            report: EvalReport { metric: "accuracy".into(), value: v, per_class: vec![], count: 10, extra: vec![] },
            efficiency: EfficiencyReport { params, flops_per_example: flops, seconds_per_example: secs },
        }
    }

    #[test]
    fn comparison_table_deltas() {
        let one = compare_report(&[summary("t", 90.0, 100, 8.0, 2.0)]).unwrap();
        assert_eq!(one.lines().nth(1).unwrap(), "t\taccuracy\t90.00\t0.00\t100\t1.000\t1.000");
        let t = compare_report(&[
            summary("t", 90.0, 100, 8.0, 2.0),
            summary("s2", 88.5, 60, 4.0, 1.0),
            summary("s3", 91.25, 50, 2.0, 0.5),
        ])
        .unwrap();
        let rows: Vec<Vec<&str>> = t.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        assert_eq!(rows[1][3], "-1.50");
        assert_eq!(rows[2][3], "1.25");
        assert_eq!(rows[1][5], "0.500");
        assert_eq!(rows[2][6], "4.000");
        assert!(compare_report(&[]).is_err());
    }

    #[test]
    fn self_comparison_ratios_are_one() {
        let r = EfficiencyReport { params: 7, flops_per_example: 3.5, seconds_per_example: 0.25 };
        assert_eq!(r.relative_to(&r), EfficiencyRatios { params: 1.0, flops: 1.0, speed: 1.0 });
    }
}
