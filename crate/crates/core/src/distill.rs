//! Bilingual distillation: a general stage that aligns a shallower student
//! with a language-adapted teacher on unlabelled text, and a task stage
//! that distils a task-adapted teacher into a sparse student delta.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{holdout_split, BatchSampler, Encoded};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{encode, init_student_from_teacher, is_head_param, register_params, ActivationTrace, Batch, Dropout, HeadKind, Model, ParamVars, PAD_SCORE_BIAS};
use crate::sft::{apply_deltas, attach_delta_head, fingerprint, lt_sft_train, SftConfig, SftDelta, SftOutcome};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{check_targets, mask_where, train, LossTerms, Objective, RunLog, TaskBatch, TrainConfig, DEFAULT_EVAL_BATCH};
use crate::vocab::VocabMap;

/// Held-out fraction denominator: every 20th sequence, 5% of the corpus.
pub const HOLDOUT_EVERY: usize = 20;

/// Student layer `i` imitates teacher layer `i·stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerAlignment {
    pub stride: usize,
    pub student_layers: usize,
}

impl LayerAlignment {
    pub fn new(teacher_layers: usize, student_layers: usize) -> Result<Self> {
        if student_layers == 0 || teacher_layers % student_layers != 0 {
            return Err(Error::Config(format!(
                "{student_layers} student layers do not divide {teacher_layers} teacher layers"
            )));
        }
        Ok(LayerAlignment { stride: teacher_layers / student_layers, student_layers })
    }

    /// `(student, teacher)` layer numbers `1..=L_S`.
    pub fn attention_pairs(&self) -> Vec<(usize, usize)> {
        (1..=self.student_layers).map(|i| (i, i * self.stride)).collect()
    }

    /// `(student, teacher)` hidden-state indices `0..=L_S`, embeddings first.
    pub fn hidden_pairs(&self) -> Vec<(usize, usize)> {
        (0..=self.student_layers).map(|i| (i, i * self.stride)).collect()
    }
}

fn check_trace(t: &ActivationTrace, align: &LayerAlignment) -> Result<()> {
    let need = align.student_layers * align.stride;
    if t.attn.len() < need || t.hidden.len() < need + 1 {
        return Err(Error::Contract(format!(
            "teacher trace has {} layers, alignment needs {need}",
            t.attn.len()
        )));
    }
    Ok(())
}

fn pair_mask(mask: &[bool], batch: usize, len: usize, heads: usize) -> Vec<f32> {
    let mut w = Vec::with_capacity(batch * heads * len * len);
    for b in 0..batch {
        let m = &mask[b * len..(b + 1) * len];
        for _ in 0..heads {
            for &qi in m {
                w.extend(m.iter().map(|&kj| if qi && kj { 1.0 } else { 0.0 }));
            }
        }
    }
    w
}

fn row_mask(mask: &[bool], dim: usize) -> Vec<f32> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, dim)).collect()
}

/// Attention loss on the tape: the mean over aligned layers of the MSE
/// between post-softmax attention maps, over real (query, key) pairs of
/// every head.
pub fn attn_loss_on_tape(tape: &mut Tape<'_>, student: &[Var], teacher: &ActivationTrace, align: &LayerAlignment) -> Result<Var> {
    check_trace(teacher, align)?;
    if student.len() != align.student_layers {
        return Err(Error::Contract(format!("student has {} layers, expected {}", student.len(), align.student_layers)));
    }
    let mut terms = Vec::with_capacity(student.len());
    let w = 1.0 / align.student_layers as f32;
    for (s, t) in align.attention_pairs() {
        let sv = student[s - 1];
        let target = &teacher.attn[t - 1];
        if tape.value(sv).shape() != target.shape() {
            return Err(Error::Contract(format!(
                "attention maps {:?} and {:?} differ in shape",
                tape.value(sv).shape(),
                target.shape()
            )));
        }
        let heads = target.shape()[1];
        let weights = pair_mask(&teacher.mask, teacher.batch, teacher.len, heads);
        let tv = tape.constant(target.clone());
        terms.push((tape.mse(sv, tv, Some(weights))?, w));
    }
    tape.combine(&terms)
}

/// Hidden-state loss on the tape: the mean over `L_S + 1` aligned states
/// of the MSE over real positions.
pub fn hidden_loss_on_tape(tape: &mut Tape<'_>, student: &[Var], teacher: &ActivationTrace, align: &LayerAlignment) -> Result<Var> {
    check_trace(teacher, align)?;
    if student.len() != align.student_layers + 1 {
        return Err(Error::Contract(format!("student has {} hidden states, expected {}", student.len(), align.student_layers + 1)));
    }
    let mut terms = Vec::with_capacity(student.len());
    let w = 1.0 / (align.student_layers + 1) as f32;
    for (s, t) in align.hidden_pairs() {
        let sv = student[s];
        let target = &teacher.hidden[t];
        if tape.value(sv).shape() != target.shape() {
            return Err(Error::Contract(format!(
                "hidden states {:?} and {:?} differ in shape",
                tape.value(sv).shape(),
                target.shape()
            )));
        }
        let weights = row_mask(&teacher.mask, target.cols());
        let tv = tape.constant(target.clone());
        terms.push((tape.mse(sv, tv, Some(weights))?, w));
    }
    tape.combine(&terms)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Start and end position logits `[batch, len]` with padding pushed to
/// `PAD_SCORE_BIAS`.
fn span_columns(logits: &Tensor, mask: &[bool], batch: usize, len: usize) -> (Tensor, Tensor) {
    let col = |c: usize| {
        let data = (0..batch * len)
            .map(|r| logits.row(r)[c] + if mask[r] { 0.0 } else { PAD_SCORE_BIAS })
            .collect();
        Tensor::new(vec![batch, len], data).expect("batch × len")
    };
    (col(0), col(1))
}

/// Prediction loss on the tape: cross entropy of the student's softmax
/// against the teacher's, averaged over real positions (token heads), over
/// sequences (sequence heads), or over the start and end distributions
/// (span heads).
pub fn pred_loss_on_tape(tape: &mut Tape<'_>, head: HeadKind, student: Var, teacher: &ActivationTrace) -> Result<Var> {
    let tz = teacher
        .logits
        .as_ref()
        .ok_or_else(|| Error::Contract("teacher trace carries no logits".into()))?;
    if tape.value(student).shape() != tz.shape() {
        return Err(Error::Contract(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            tape.value(student).shape(),
            tz.shape()
        )));
    }
    match head {
        HeadKind::Sequence { .. } => {
            let p = tape.constant(softmax_rows(tz));
            tape.soft_cross_entropy(student, p, None)
        }
        HeadKind::Token { .. } | HeadKind::Mlm => {
            let p = tape.constant(softmax_rows(tz));
            let w = teacher.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            tape.soft_cross_entropy(student, p, Some(w))
        }
        HeadKind::Span => {
            let (b, l) = (teacher.batch, teacher.len);
            let (ts, te) = span_columns(tz, &teacher.mask, b, l);
            let bias = Tensor::new(
                vec![b, l],
                teacher.mask.iter().map(|&m| if m { 0.0 } else { PAD_SCORE_BIAS }).collect(),
            )
            .expect("batch × len");
            let mut side = |c: usize, target: &Tensor| -> Result<Var> {
                let v = tape.select_col(student, c)?;
                let v = tape.reshape(v, &[b, l])?;
                let v = tape.add_const(v, &bias)?;
                let p = tape.constant(softmax_rows(target));
                tape.soft_cross_entropy(v, p, None)
            };
            let ls = side(0, &ts)?;
            let le = side(1, &te)?;
            tape.combine(&[(ls, 0.5), (le, 0.5)])
        }
    }
}

fn constants(tape: &mut Tape<'_>, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn same_positions(s: &ActivationTrace, t: &ActivationTrace) -> Result<()> {
    if s.batch != t.batch || s.len != t.len || s.mask != t.mask {
        return Err(Error::Contract(format!(
            "traces cover different positions: {}×{} vs {}×{}",
            s.batch, s.len, t.batch, t.len
        )));
    }
    Ok(())
}

/// Attention loss between two materialized traces.
pub fn loss_attn(student: &ActivationTrace, teacher: &ActivationTrace, align: &LayerAlignment) -> Result<f64> {
    same_positions(student, teacher)?;
    let mut tape = Tape::new();
    let s = constants(&mut tape, &student.attn);
    let l = attn_loss_on_tape(&mut tape, &s, teacher, align)?;
    Ok(tape.item(l) as f64)
}

/// Hidden-state loss between two materialized traces.
pub fn loss_hidden(student: &ActivationTrace, teacher: &ActivationTrace, align: &LayerAlignment) -> Result<f64> {
    same_positions(student, teacher)?;
    let mut tape = Tape::new();
    let s = constants(&mut tape, &student.hidden);
    let l = hidden_loss_on_tape(&mut tape, &s, teacher, align)?;
    Ok(tape.item(l) as f64)
}

/// Prediction loss between two materialized traces.
pub fn loss_pred(head: HeadKind, student: &ActivationTrace, teacher: &ActivationTrace) -> Result<f64> {
    same_positions(student, teacher)?;
    let z = student
        .logits
        .as_ref()
        .ok_or_else(|| Error::Contract("student trace carries no logits".into()))?;
    let mut tape = Tape::new();
    let s = tape.constant(z.clone());
    let l = pred_loss_on_tape(&mut tape, head, s, teacher)?;
    Ok(tape.item(l) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub attn: f32,
    pub hidden: f32,
    pub pred: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { attn: 1.0, hidden: 1.0, pred: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [("attn", self.attn), ("hidden", self.hidden), ("pred", self.pred)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {n} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Language {
    Source,
    Target,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Source => "source",
            Language::Target => "target",
        })
    }
}

/// Picks a language with a fair coin and draws the whole batch from that
/// language's stream.
pub fn sample_language_batch(src: &mut BatchSampler, tgt: &mut BatchSampler, rng: &mut ChaCha8Rng) -> (Language, Vec<usize>) {
    if rng.random::<bool>() {
        (Language::Source, src.next_batch())
    } else {
        (Language::Target, tgt.next_batch())
    }
}

/// Settings shared by both distillation stages.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Layer reduction factor.
    pub lrf: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub eval_interval: usize,
    pub weights: LossWeights,
    pub source: String,
    pub target: String,
    /// Also apply the teacher's target-language delta while distilling the task.
    pub task_teacher_target_sft: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lrf: 2,
            steps: 2000,
            batch_size: 8,
            max_seq_len: 256,
            lr: 1e-4,
            weight_decay: 0.0,
            eval_interval: 1000,
            weights: LossWeights::default(),
            source: "src".into(),
            target: "tgt".into(),
            task_teacher_target_sft: false,
            seed: 0,
        }
    }
}

fn parsed<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lrf == 0 {
            return Err(Error::Config("lrf must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        self.weights.validate()
    }

    /// Overrides fields from `key = value` pairs; unknown keys are errors.
    pub fn apply_pairs(&mut self, pairs: &KeyValues) -> Result<()> {
        for (k, v) in pairs {
            match k.as_str() {
                "lrf" => self.lrf = parsed(k, v)?,
                "steps" => self.steps = parsed(k, v)?,
                "batch_size" => self.batch_size = parsed(k, v)?,
                "max_seq_len" => self.max_seq_len = parsed(k, v)?,
                "lr" => self.lr = parsed(k, v)?,
                "weight_decay" => self.weight_decay = parsed(k, v)?,
                "eval_interval" => self.eval_interval = parsed(k, v)?,
                "w_attn" => self.weights.attn = parsed(k, v)?,
                "w_hidden" => self.weights.hidden = parsed(k, v)?,
                "w_pred" => self.weights.pred = parsed(k, v)?,
                "source" => self.source = v.clone(),
                "target" => self.target = v.clone(),
                "task_teacher_target_sft" => self.task_teacher_target_sft = parsed(k, v)?,
                "seed" => self.seed = parsed(k, v)?,
                _ => return Err(Error::Config(format!("unknown distillation setting {k:?}"))),
            }
        }
        self.validate()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lrf", self.lrf.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("w_attn", self.weights.attn.to_string()),
            ("w_hidden", self.weights.hidden.to_string()),
            ("w_pred", self.weights.pred.to_string()),
            ("source", self.source.clone()),
            ("target", self.target.clone()),
            ("task_teacher_target_sft", self.task_teacher_target_sft.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

fn student_batch(root: &Batch, map: &VocabMap) -> Batch {
    Batch { ids: map.map_ids(&root.ids), ..root.clone() }
}

fn padded(seqs: &[&[usize]], max_len: usize) -> Result<Batch> {
    let owned: Vec<Vec<usize>> = seqs.iter().map(|s| s.to_vec()).collect();
    Batch::from_sequences(&owned, max_len)
}

/// Teacher trace and the student's view of the same batch.
struct Target {
    student: Batch,
    teacher: ActivationTrace,
}

fn headless(m: &Model) -> Model {
    m.without_head()
}

/// Stage one: attention and hidden-state alignment on unlabelled text,
/// one language per batch, with that language's adaptation applied to the
/// teacher.
struct GeneralObjective<'a> {
    teachers: [&'a Model; 2],
    streams: [Vec<Vec<usize>>; 2],
    samplers: [BatchSampler; 2],
    map: &'a VocabMap,
    align: LayerAlignment,
    weights: LossWeights,
    max_len: usize,
    coin: ChaCha8Rng,
    dropout: ChaCha8Rng,
    val: Vec<Target>,
    pub picks: [usize; 2],
}

fn general_terms(
    tape: &mut Tape<'_>,
    model: &Model,
    pv: &ParamVars,
    t: &Target,
    align: &LayerAlignment,
    weights: &LossWeights,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<LossTerms> {
    let tv = encode(tape, &model.config, None, pv, &t.student, dropout)?;
    let la = attn_loss_on_tape(tape, &tv.attn, &t.teacher, align)?;
    let lh = hidden_loss_on_tape(tape, &tv.hidden, &t.teacher, align)?;
    let total = tape.combine(&[(la, weights.attn), (lh, weights.hidden)])?;
    Ok(LossTerms { total, attn: tape.item(la) as f64, hidden: tape.item(lh) as f64, pred: 0.0 })
}

fn weighted_mean(parts: &[(f64, f64)]) -> f64 {
    let w: f64 = parts.iter().map(|p| p.1).sum();
    if w > 0.0 {
        parts.iter().map(|p| p.0 * p.1).sum::<f64>() / w
    } else {
        0.0
    }
}

impl Objective for GeneralObjective<'_> {
    fn loss(&mut self, tape: &mut Tape<'_>, model: &Model, pv: &ParamVars) -> Result<LossTerms> {
        let [s, t] = &mut self.samplers;
        let (lang, idx) = sample_language_batch(s, t, &mut self.coin);
        let li = lang as usize;
        self.picks[li] += 1;
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| self.streams[li][i].as_slice()).collect();
        let root = padded(&seqs, self.max_len)?;
        let teacher = self.teachers[li].forward(&root)?;
        let target = Target { student: student_batch(&root, self.map), teacher };
        let p = model.config.dropout;
        let mut d = Dropout { rng: &mut self.dropout, p };
        general_terms(tape, model, pv, &target, &self.align, &self.weights, (p > 0.0).then_some(&mut d))
    }

    fn validation_loss(&mut self, model: &Model) -> Result<f64> {
        let mut parts = Vec::with_capacity(self.val.len());
        for t in &self.val {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &model.params, |_| false);
            let terms = general_terms(&mut tape, model, &pv, t, &self.align, &self.weights, None)?;
            parts.push((tape.item(terms.total) as f64, t.student.batch as f64));
        }
        Ok(weighted_mean(&parts))
    }
}

fn precompute(teacher: &Model, seqs: &[Vec<usize>], map: &VocabMap, max_len: usize) -> Result<Vec<Target>> {
    seqs.chunks(DEFAULT_EVAL_BATCH)
        .map(|c| {
            let root = Batch::from_sequences(c, max_len)?;
            let teacher = teacher.forward(&root)?;
            Ok(Target { student: student_batch(&root, map), teacher })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub student: Model,
    pub log: RunLog,
    pub selected_step: usize,
    /// Training batches drawn from the source and target streams.
    pub language_batches: [usize; 2],
}

/// Applies a language delta to a headless copy of the teacher.
pub fn adapt_teacher(teacher: &Model, deltas: &[&SftDelta]) -> Result<Model> {
    apply_deltas(&headless(teacher), deltas, false)
}

/// Stage one. `src` and `tgt` hold sequences in the teacher's vocabulary;
/// the student sees them through `map`. Each language's delta, when given,
/// adapts the teacher for batches of that language.
pub fn general_bistillation(
    teacher: &Model,
    sft_src: Option<&SftDelta>,
    sft_tgt: Option<&SftDelta>,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
    map: &VocabMap,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Domain("both languages need a nonempty corpus".into()));
    }
    let t_src = adapt_teacher(teacher, &sft_src.into_iter().collect::<Vec<_>>())?;
    let t_tgt = adapt_teacher(teacher, &sft_tgt.into_iter().collect::<Vec<_>>())?;
    let mut student = init_student_from_teacher(&headless(teacher), cfg.lrf, map)?;
    let align = LayerAlignment::new(teacher.config.num_layers, student.config.num_layers)?;

    let (src_train, src_val) = holdout_split(src, HOLDOUT_EVERY);
    let (tgt_train, tgt_val) = holdout_split(tgt, HOLDOUT_EVERY);
    if src_train.is_empty() || tgt_train.is_empty() {
        return Err(Error::Domain("corpus too small to leave training data after the held-out split".into()));
    }
    let mut val = precompute(&t_src, &src_val, map, cfg.max_seq_len)?;
    val.extend(precompute(&t_tgt, &tgt_val, map, cfg.max_seq_len)?);

    let seed = cfg.seed;
    let samplers = [
        BatchSampler::new(src_train.len(), cfg.batch_size, seed ^ 0x51)?,
        BatchSampler::new(tgt_train.len(), cfg.batch_size, seed ^ 0x7a)?,
    ];
    let mut obj = GeneralObjective {
        teachers: [&t_src, &t_tgt],
        streams: [src_train, tgt_train],
        samplers,
        map,
        align,
        weights: LossWeights { pred: 0.0, ..cfg.weights },
        max_len: cfg.max_seq_len,
        coin: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xc0)),
        dropout: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xd0)),
        val,
        picks: [0, 0],
    };
    let has_val = !obj.val.is_empty();
    let tc = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        eval_interval: if has_val { cfg.eval_interval } else { 0 },
        select_best: has_val && cfg.eval_interval > 0,
    };
    let mask = mask_where(&student.params, |_| true);
    let out = train(&mut student, &mut obj, &tc, &mask)?;
    Ok(DistillOutcome { student, log: out.log, selected_step: out.selected_step, language_batches: obj.picks })
}

/// Teacher for the task stage: base plus language deltas plus the task
/// delta, with the task head attached.
pub fn compose_task_teacher(base: &Model, language: &[&SftDelta], task: &SftDelta) -> Result<Model> {
    let mut all: Vec<&SftDelta> = language.to_vec();
    all.push(task);
    let mut m = apply_deltas(&headless(base), &all, false)?;
    attach_delta_head(&mut m, task)?;
    Ok(m)
}

/// Stage two: the loss combines all three terms against a fixed teacher on
/// labelled source-language examples.
struct TaskDistillObjective<'a> {
    teacher: &'a Model,
    train: Vec<Encoded>,
    sampler: BatchSampler,
    map: &'a VocabMap,
    align: LayerAlignment,
    weights: LossWeights,
    max_len: usize,
    dropout: ChaCha8Rng,
    val: Vec<Target>,
}

fn task_terms(
    tape: &mut Tape<'_>,
    model: &Model,
    pv: &ParamVars,
    t: &Target,
    align: &LayerAlignment,
    w: &LossWeights,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<LossTerms> {
    let head = model.head.ok_or_else(|| Error::Contract("student has no task head".into()))?;
    let tv = encode(tape, &model.config, Some(head), pv, &t.student, dropout)?;
    let la = attn_loss_on_tape(tape, &tv.attn, &t.teacher, align)?;
    let lh = hidden_loss_on_tape(tape, &tv.hidden, &t.teacher, align)?;
    let lp = pred_loss_on_tape(tape, head, tv.logits.expect("head attached"), &t.teacher)?;
    let total = tape.combine(&[(la, w.attn), (lh, w.hidden), (lp, w.pred)])?;
    Ok(LossTerms { total, attn: tape.item(la) as f64, hidden: tape.item(lh) as f64, pred: tape.item(lp) as f64 })
}

fn task_target(teacher: &Model, ex: &[&Encoded], map: &VocabMap, max_len: usize) -> Result<Target> {
    let tb = TaskBatch::new(ex, max_len)?;
    let teacher = teacher.forward(&tb.batch)?;
    Ok(Target { student: student_batch(&tb.batch, map), teacher })
}

impl Objective for TaskDistillObjective<'_> {
    fn loss(&mut self, tape: &mut Tape<'_>, model: &Model, pv: &ParamVars) -> Result<LossTerms> {
        let idx = self.sampler.next_batch();
        let ex: Vec<&Encoded> = idx.iter().map(|&i| &self.train[i]).collect();
        let target = task_target(self.teacher, &ex, self.map, self.max_len)?;
        let p = model.config.dropout;
        let mut d = Dropout { rng: &mut self.dropout, p };
        task_terms(tape, model, pv, &target, &self.align, &self.weights, (p > 0.0).then_some(&mut d))
    }

    fn validation_loss(&mut self, model: &Model) -> Result<f64> {
        let mut parts = Vec::with_capacity(self.val.len());
        for t in &self.val {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &model.params, |_| false);
            let terms = task_terms(&mut tape, model, &pv, t, &self.align, &self.weights, None)?;
            parts.push((tape.item(terms.total) as f64, t.student.batch as f64));
        }
        Ok(weighted_mean(&parts))
    }
}

/// Copies the teacher's task head onto a headless student.
pub fn student_with_teacher_head(student: &Model, teacher: &Model) -> Result<Model> {
    let head = teacher.head.ok_or_else(|| Error::Contract("task teacher has no head".into()))?;
    if student.config.hidden_dim != teacher.config.hidden_dim {
        return Err(Error::Contract(format!(
            "student width {} differs from teacher width {}",
            student.config.hidden_dim, teacher.config.hidden_dim
        )));
    }
    let mut m = headless(student);
    for (k, t) in teacher.params.iter().filter(|(k, _)| is_head_param(k)) {
        m.params.insert(k.clone(), t.clone());
    }
    m.head = Some(head);
    m.validate()?;
    Ok(m)
}

/// Stage two. `teacher` is the composed task teacher, `student` the
/// stage-one student; examples are in the teacher's vocabulary. Returns
/// the student's task delta, whose head is the distilled task head.
#[allow(clippy::too_many_arguments)]
pub fn task_specific_distillation(
    teacher: &Model,
    student: &Model,
    train_set: &[Encoded],
    val_set: &[Encoded],
    map: &VocabMap,
    sft: &SftConfig,
    weights: LossWeights,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<SftOutcome> {
    weights.validate()?;
    if train_set.is_empty() {
        return Err(Error::Domain("no task examples to distil on".into()));
    }
    let head = teacher.head.ok_or_else(|| Error::Contract("task teacher has no head".into()))?;
    check_targets(head, train_set)?;
    check_targets(head, val_set)?;
    let start = student_with_teacher_head(student, teacher)?;
    let align = LayerAlignment::new(teacher.config.num_layers, start.config.num_layers)?;
    let val = val_set
        .chunks(DEFAULT_EVAL_BATCH)
        .map(|c| task_target(teacher, &c.iter().collect::<Vec<_>>(), map, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut obj = TaskDistillObjective {
        teacher,
        train: train_set.to_vec(),
        sampler: BatchSampler::new(train_set.len(), batch_size, seed ^ 0x7a5c)?,
        map,
        align,
        weights,
        max_len,
        dropout: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xd1)),
        val,
    };
    let mut cfg = sft.clone();
    if val_set.is_empty() {
        cfg.eval_interval = 0;
    }
    lt_sft_train(&start, fingerprint(&start.params), &mut obj, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{CLS, SEP};

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig { num_layers: layers, hidden_dim: 8, num_heads: 2, ffn_dim: 16, vocab_size: 20, max_seq_len: 8, dropout: 0.0 }
    }

    fn batch() -> Batch {
        Batch::from_sequences(&[vec![CLS, 5, 6, 7, SEP], vec![CLS, 9, SEP]], 8).unwrap()
    }

    #[test]
    fn alignment_pairs() {
        let a = LayerAlignment::new(6, 3).unwrap();
        assert_eq!(a.attention_pairs(), vec![(1, 2), (2, 4), (3, 6)]);
        assert_eq!(a.hidden_pairs(), vec![(0, 0), (1, 2), (2, 4), (3, 6)]);
        assert!(LayerAlignment::new(6, 4).is_err());
    }

    #[test]
    fn identical_traces_give_zero_loss() {
        let m = Model::init(cfg(4), Some(HeadKind::Token { num_labels: 3 }), 1).unwrap();
        let t = m.forward(&batch()).unwrap();
        let a = LayerAlignment::new(4, 4).unwrap();
        assert_eq!(loss_attn(&t, &t, &a).unwrap(), 0.0);
        assert_eq!(loss_hidden(&t, &t, &a).unwrap(), 0.0);
        let p = loss_pred(m.head.unwrap(), &t, &t).unwrap();
        assert!(p > 0.0);
    }

    #[test]
    fn constant_embedding_offset_gives_half_its_square() {
        let m = Model::init(cfg(1), None, 1).unwrap();
        let t = m.forward(&batch()).unwrap();
        let mut s = t.clone();
        for x in s.hidden[0].data_mut() {
            *x += 0.5;
        }
        let a = LayerAlignment::new(1, 1).unwrap();
        assert!((loss_hidden(&s, &t, &a).unwrap() - 0.125).abs() < 1e-7);
    }

    #[test]
    fn mismatched_positions_are_contract_errors() {
        let m = Model::init(cfg(2), None, 1).unwrap();
        let t = m.forward(&batch()).unwrap();
        let other = m.forward(&Batch::from_sequences(&[vec![CLS, 5, SEP]], 8).unwrap()).unwrap();
        let a = LayerAlignment::new(2, 2).unwrap();
        assert!(matches!(loss_attn(&other, &t, &a), Err(Error::Contract(_))));
        let wide = Model::init(ModelConfig { hidden_dim: 12, num_heads: 2, ..cfg(2) }, None, 1).unwrap();
        let w = wide.forward(&batch()).unwrap();
        assert!(matches!(loss_hidden(&w, &t, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn language_coin_is_fair_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = BatchSampler::new(10, 2, 1).unwrap();
        let mut t = BatchSampler::new(7, 2, 2).unwrap();
        let draws: Vec<Language> = (0..10_000).map(|_| sample_language_batch(&mut s, &mut t, &mut rng).0).collect();
        let frac = draws.iter().filter(|&&l| l == Language::Source).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut s2 = BatchSampler::new(10, 2, 1).unwrap();
        let mut t2 = BatchSampler::new(7, 2, 2).unwrap();
        for d in draws.iter().take(100) {
            assert_eq!(sample_language_batch(&mut s2, &mut t2, &mut rng2).0, *d);
        }
    }

    #[test]
    fn config_pairs_round_trip() {
        let c = DistillConfig { lrf: 3, steps: 17, lr: 5e-4, task_teacher_target_sft: true, ..Default::default() };
        let pairs: KeyValues = c.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut back = DistillConfig::default();
        back.apply_pairs(&pairs).unwrap();
        assert_eq!(back, c);
        let mut bad = KeyValues::new();
        bad.insert("nope".into(), "1".into());
        assert!(back.apply_pairs(&bad).is_err());
    }

    fn corpus(n: usize, base: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![CLS, base + i % 5, base + (i * 3) % 5, SEP]).collect()
    }

    #[test]
    fn zero_steps_return_the_initialized_student() {
        let t = Model::init(cfg(4), None, 2).unwrap();
        let map = VocabMap::identity(20);
        let dc = DistillConfig { steps: 0, max_seq_len: 8, ..Default::default() };
        let out = general_bistillation(&t, None, None, &corpus(40, 5), &corpus(40, 10), &map, &dc).unwrap();
        assert_eq!(out.student, init_student_from_teacher(&t, 2, &map).unwrap());
    }

    #[test]
    fn full_depth_student_is_a_fixed_point() {
        let t = Model::init(cfg(2), None, 2).unwrap();
        let map = VocabMap::identity(20);
        let dc = DistillConfig { lrf: 1, steps: 100, max_seq_len: 8, lr: 1e-3, eval_interval: 50, ..Default::default() };
        let out = general_bistillation(&t, None, None, &corpus(40, 5), &corpus(40, 10), &map, &dc).unwrap();
        assert_eq!(out.log.validation_points()[0].1, 0.0);
        for (k, v) in &out.student.params {
            for (a, b) in v.data().iter().zip(t.params[k].data()) {
                assert!((a - b).abs() <= 1e-6, "{k}");
            }
        }
    }

    #[test]
    fn general_stage_reduces_loss_and_leaves_teacher_alone() {
        let mut t = Model::init(cfg(4), None, 2).unwrap();
        for (k, v) in t.params.iter_mut() {
            if k.ends_with(".weight") || k.starts_with("embeddings") {
                v.data_mut().iter_mut().for_each(|x| *x *= 25.0);
            }
        }
        let before = t.clone();
        let map = VocabMap::from_kept((5..15).collect(), 20).unwrap();
        let dc = DistillConfig { steps: 300, max_seq_len: 8, lr: 3e-3, eval_interval: 50, batch_size: 8, ..Default::default() };
        let out = general_bistillation(&t, None, None, &corpus(80, 5), &corpus(80, 10), &map, &dc).unwrap();
        assert_eq!(t, before);
        let v = out.log.validation_points();
        assert!(v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) < 0.5 * v[0].1, "{v:?}");
        assert_eq!(out.student.config.vocab_size, 15);
        assert!(out.language_batches[0] > 0 && out.language_batches[1] > 0);
    }

    #[test]
    fn task_stage_respects_budget_and_label_space() {
        let mut teacher = Model::init(cfg(4), Some(HeadKind::Sequence { num_labels: 2 }), 3).unwrap();
        teacher.config.dropout = 0.0;
        let student = init_student_from_teacher(&teacher.without_head(), 2, &VocabMap::identity(20)).unwrap();
        let ex: Vec<Encoded> = corpus(30, 5)
            .into_iter()
            .enumerate()
            .map(|(i, ids)| Encoded { ids, target: crate::data::Target::Class(i % 2) })
            .collect();
        let sft = SftConfig { density: 0.08, dense_steps: 10, sparse_steps: 10, lr: 1e-3, eval_interval: 5, ..SftConfig::task_default() };
        let out = task_specific_distillation(&teacher, &student, &ex, &ex[..8], &VocabMap::identity(20), &sft, LossWeights::default(), 4, 8, 1).unwrap();
        let n: usize = student.params.values().map(|t| t.numel()).sum();
        assert!(out.delta.nnz() <= crate::sft::budget(0.08, n));
        assert_eq!(out.delta.head.as_ref().unwrap().kind, HeadKind::Sequence { num_labels: 2 });
        let bad: Vec<Encoded> = vec![Encoded { ids: vec![CLS, 5, SEP], target: crate::data::Target::Class(4) }];
        let err = task_specific_distillation(&teacher, &student, &bad, &[], &VocabMap::identity(20), &sft, LossWeights::default(), 4, 8, 1);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
