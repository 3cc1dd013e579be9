//! Generic optimization loop with held-out checkpoint selection, plus the
//! masked-language-model and supervised task objectives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mlm_mask, BatchSampler, Encoded, MaskedBatch, Target, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::model::{encode, register_params, Batch, Dropout, HeadKind, Model, ParamSet, ParamVars, PAD_SCORE_BIAS};
use crate::tensor::{adamw_step, AdamWConfig, OptimizerState, ParamMask, Tape, Tensor, TrainMask, Var};

/// One step's loss on the tape plus its components for the run log.
pub struct LossTerms {
    pub total: Var,
    pub attn: f64,
    pub hidden: f64,
    pub pred: f64,
}

pub trait Objective {
    /// Records the loss of the next training batch.
    fn loss(&mut self, tape: &mut Tape<'_>, model: &Model, params: &ParamVars) -> Result<LossTerms>;

    /// Loss on the fixed held-out set.
    fn validation_loss(&mut self, model: &Model) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_interval: usize,
    /// Restore the lowest-validation-loss checkpoint at the end. The
    /// starting point and the final step are always among the candidates.
    pub select_best: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.select_best && self.eval_interval == 0 && self.steps > 0 {
            return Err(Error::Config("checkpoint selection needs a positive eval_interval".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_attn: f64,
    pub loss_hidden: f64,
    pub loss_pred: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub const HEADER: &'static str = "step\tloss_attn\tloss_hidden\tloss_pred\tval_loss";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let val = r.val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}\t{val}", r.step, r.loss_attn, r.loss_hidden, r.loss_pred);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn validation_points(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.val_loss.map(|v| (r.step, v))).collect()
    }

    pub fn extend(&mut self, other: RunLog, step_offset: usize) {
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.step += step_offset;
            r
        }));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: RunLog,
    /// Step whose parameters the model holds on return.
    pub selected_step: usize,
    pub selected_val: Option<f64>,
}

fn is_trainable(mask: &TrainMask, name: &str) -> bool {
    mask.get(name).is_some_and(|m| !m.is_frozen())
}

/// Trains the parameters `mask` marks trainable; everything else stays
/// bit-for-bit unchanged.
pub fn train(model: &mut Model, objective: &mut dyn Objective, cfg: &TrainConfig, mask: &TrainMask) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trainable: Vec<String> = model.params.keys().filter(|k| is_trainable(mask, k)).cloned().collect();
    let subset: ParamSet = trainable.iter().map(|k| (k.clone(), model.params[k].clone())).collect();
    let mut opt = OptimizerState::new(
        &subset,
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, total_steps: cfg.steps, ..Default::default() },
    );

    let mut log = RunLog::default();
    let validating = cfg.eval_interval > 0 && cfg.steps > 0;
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let consider = |model: &Model, step: usize, val: f64, best: &mut Option<(f64, usize, ParamSet)>| {
        if cfg.select_best && best.as_ref().is_none_or(|b| val < b.0) {
            let snap = trainable.iter().map(|k| (k.clone(), model.params[k].clone())).collect();
            *best = Some((val, step, snap));
        }
    };
    if validating {
        let v = objective.validation_loss(model)?;
        consider(model, 0, v, &mut best);
        log.rows.push(LogRow { step: 0, loss_attn: f64::NAN, loss_hidden: f64::NAN, loss_pred: f64::NAN, val_loss: Some(v) });
    }

    for step in 1..=cfg.steps {
        let (terms, grads) = {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &model.params, |k| is_trainable(mask, k));
            let terms = objective.loss(&mut tape, model, &pv)?;
            let value = tape.item(terms.total);
            if !value.is_finite() {
                return Err(Error::Training { step, message: format!("loss is {value}") });
            }
            tape.backward(terms.total)?;
            let mut grads = BTreeMap::new();
            for k in &trainable {
                if let Some(g) = tape.take_grad(pv[k]) {
                    grads.insert(k.clone(), g);
                }
            }
            (terms, grads)
        };
        if grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Training { step, message: "non-finite gradient".into() });
        }
        adamw_step(&mut model.params, &grads, &mut opt, Some(mask))?;

        let val = if validating && (step % cfg.eval_interval == 0 || step == cfg.steps) {
            let v = objective.validation_loss(model)?;
            if !v.is_finite() {
                return Err(Error::Training { step, message: format!("validation loss is {v}") });
            }
            consider(model, step, v, &mut best);
            Some(v)
        } else {
            None
        };
        log.rows.push(LogRow { step, loss_attn: terms.attn, loss_hidden: terms.hidden, loss_pred: terms.pred, val_loss: val });
    }

    let (selected_step, selected_val) = match best {
        Some((v, s, snap)) => {
            for (k, t) in snap {
                model.params.insert(k, t);
            }
            (s, Some(v))
        }
        None => (cfg.steps, log.rows.last().and_then(|r| r.val_loss)),
    };
    Ok(TrainOutcome { log, selected_step, selected_val })
}

/// Marks every parameter accepted by `pred` as fully trainable.
pub fn mask_where(params: &ParamSet, pred: impl Fn(&str) -> bool) -> TrainMask {
    params
        .keys()
        .filter(|k| pred(k))
        .map(|k| (k.clone(), ParamMask::All))
        .collect()
}

/// Pads borrowed sequences into a batch.
fn batch_of(seqs: &[&[usize]], max_len: usize) -> Result<Batch> {
    let owned: Vec<Vec<usize>> = seqs.iter().map(|s| s.to_vec()).collect();
    Batch::from_sequences(&owned, max_len)
}

pub const DEFAULT_EVAL_BATCH: usize = 64;

/// Masked language modelling over pre-encoded sequences.
pub struct MlmObjective {
    seqs: Vec<Vec<usize>>,
    sampler: BatchSampler,
    val: Vec<MaskedBatch>,
    rate: f64,
    max_len: usize,
    rng: ChaCha8Rng,
}

impl MlmObjective {
    pub fn new(
        train: Vec<Vec<usize>>,
        held_out: &[Vec<usize>],
        vocab_size: usize,
        batch_size: usize,
        rate: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let sampler = BatchSampler::new(train.len(), batch_size, seed)?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1);
        let val = held_out
            .chunks(DEFAULT_EVAL_BATCH)
            .map(|c| mlm_mask(&Batch::from_sequences(c, max_len)?, rate, vocab_size, &mut val_rng))
            .collect::<Result<_>>()?;
        Ok(MlmObjective { seqs: train, sampler, val, rate, max_len, rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)) })
    }
}

fn mlm_loss(tape: &mut Tape<'_>, model: &Model, pv: &ParamVars, mb: &MaskedBatch, dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
    if model.head != Some(HeadKind::Mlm) {
        return Err(Error::Contract("masked language modelling needs an MLM head".into()));
    }
    let tv = encode(tape, &model.config, model.head, pv, &mb.batch, dropout)?;
    tape.cross_entropy(tv.logits.expect("MLM head attached"), &mb.labels)
}

impl Objective for MlmObjective {
    fn loss(&mut self, tape: &mut Tape<'_>, model: &Model, pv: &ParamVars) -> Result<LossTerms> {
        let idx = self.sampler.next_batch();
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| self.seqs[i].as_slice()).collect();
        let batch = batch_of(&seqs, self.max_len)?;
        let mb = mlm_mask(&batch, self.rate, model.config.vocab_size, &mut self.rng)?;
        let p = model.config.dropout;
        let mut d = Dropout { rng: &mut self.rng, p };
        let total = mlm_loss(tape, model, pv, &mb, (p > 0.0).then_some(&mut d))?;
        let v = tape.item(total) as f64;
        Ok(LossTerms { total, attn: 0.0, hidden: 0.0, pred: v })
    }

    fn validation_loss(&mut self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        let mut weight = 0.0;
        for mb in &self.val {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &model.params, |_| false);
            let l = mlm_loss(&mut tape, model, &pv, mb, None)?;
            let n = mb.labels.iter().filter(|&&l| l != IGNORE_LABEL).count() as f64;
            total += tape.item(l) as f64 * n;
            weight += n;
        }
        Ok(if weight > 0.0 { total / weight } else { 0.0 })
    }
}

/// Padded batch plus the supervision for each row.
pub struct TaskBatch {
    pub batch: Batch,
    pub targets: Vec<Target>,
}

impl TaskBatch {
    pub fn new(examples: &[&Encoded], max_len: usize) -> Result<TaskBatch> {
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.ids.as_slice()).collect();
        Ok(TaskBatch { batch: batch_of(&seqs, max_len)?, targets: examples.iter().map(|e| e.target.clone()).collect() })
    }

    /// Per-position labels for token heads, padded with `IGNORE_LABEL`.
    pub fn token_labels(&self) -> Result<Vec<i64>> {
        let l = self.batch.len;
        let mut out = Vec::with_capacity(self.batch.batch * l);
        for t in &self.targets {
            let Target::Tokens(labels) = t else {
                return Err(Error::Contract("token head needs per-token targets".into()));
            };
            let n = labels.len().min(l);
            out.extend_from_slice(&labels[..n]);
            out.extend(std::iter::repeat_n(IGNORE_LABEL, l - n));
        }
        Ok(out)
    }

    pub fn class_labels(&self) -> Result<Vec<i64>> {
        self.targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => Ok(*c as i64),
                _ => Err(Error::Contract("sequence head needs class targets".into())),
            })
            .collect()
    }

    pub fn span_labels(&self) -> Result<(Vec<i64>, Vec<i64>)> {
        let mut s = Vec::new();
        let mut e = Vec::new();
        for t in &self.targets {
            let Target::Span { start, end } = t else {
                return Err(Error::Contract("span head needs span targets".into()));
            };
            let valid = *start >= 0 && (*end as usize) < self.batch.len;
            s.push(if valid { *start } else { IGNORE_LABEL });
            e.push(if valid { *end } else { IGNORE_LABEL });
        }
        Ok((s, e))
    }

    /// Additive bias that removes padded positions from span softmaxes.
    pub fn position_bias(&self) -> Tensor {
        let data = self.batch.mask.iter().map(|&m| if m { 0.0 } else { PAD_SCORE_BIAS }).collect();
        Tensor::new(vec![self.batch.batch, self.batch.len], data).expect("mask covers batch × len")
    }
}

/// Start and end logit matrices `[batch, len]` with padding masked out.
pub fn span_logits(tape: &mut Tape<'_>, logits: Var, tb: &TaskBatch) -> Result<(Var, Var)> {
    let shape = vec![tb.batch.batch, tb.batch.len];
    let bias = tb.position_bias();
    let mut col = |c: usize| -> Result<Var> {
        let v = tape.select_col(logits, c)?;
        let v = tape.reshape(v, &shape)?;
        tape.add_const(v, &bias)
    };
    let s = col(0)?;
    let e = col(1)?;
    Ok((s, e))
}

/// Supervised loss for the model's head against gold targets.
pub fn task_loss(tape: &mut Tape<'_>, head: HeadKind, logits: Var, tb: &TaskBatch) -> Result<Var> {
    match head {
        HeadKind::Token { .. } => tape.cross_entropy(logits, &tb.token_labels()?),
        HeadKind::Sequence { .. } => tape.cross_entropy(logits, &tb.class_labels()?),
        HeadKind::Span => {
            let (sl, el) = tb.span_labels()?;
            let (s, e) = span_logits(tape, logits, tb)?;
            let ls = tape.cross_entropy(s, &sl)?;
            let le = tape.cross_entropy(e, &el)?;
            tape.combine(&[(ls, 0.5), (le, 0.5)])
        }
        HeadKind::Mlm => Err(Error::Contract("task objective needs a task head".into())),
    }
}

/// Checks that every target fits the head's label space.
pub fn check_targets(head: HeadKind, examples: &[Encoded]) -> Result<()> {
    let n = match head {
        HeadKind::Token { num_labels } | HeadKind::Sequence { num_labels } => num_labels as i64,
        _ => i64::MAX,
    };
    for e in examples {
        let ok = match (&e.target, head) {
            (Target::Tokens(ls), HeadKind::Token { .. }) => ls.iter().all(|&l| l < n),
            (Target::Class(c), HeadKind::Sequence { .. }) => (*c as i64) < n,
            (Target::Span { .. }, HeadKind::Span) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Contract(format!("example target {:?} does not fit head {head}", e.target)));
        }
    }
    Ok(())
}

/// Supervised fine-tuning on encoded task examples (ids already in the
/// model's vocabulary).
pub struct TaskObjective {
    train: Vec<Encoded>,
    val: Vec<Encoded>,
    sampler: BatchSampler,
    max_len: usize,
    rng: ChaCha8Rng,
}

impl TaskObjective {
    pub fn new(train: Vec<Encoded>, val: Vec<Encoded>, batch_size: usize, max_len: usize, seed: u64) -> Result<Self> {
        let sampler = BatchSampler::new(train.len(), batch_size, seed)?;
        Ok(TaskObjective { train, val, sampler, max_len, rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)) })
    }
}

fn head_of(model: &Model) -> Result<HeadKind> {
    model.head.ok_or_else(|| Error::Contract("model has no head".into()))
}

impl Objective for TaskObjective {
    fn loss(&mut self, tape: &mut Tape<'_>, model: &Model, pv: &ParamVars) -> Result<LossTerms> {
        let head = head_of(model)?;
        let idx = self.sampler.next_batch();
        let ex: Vec<&Encoded> = idx.iter().map(|&i| &self.train[i]).collect();
        let tb = TaskBatch::new(&ex, self.max_len)?;
        let p = model.config.dropout;
        let mut d = Dropout { rng: &mut self.rng, p };
        let tv = encode(tape, &model.config, Some(head), pv, &tb.batch, (p > 0.0).then_some(&mut d))?;
        let total = task_loss(tape, head, tv.logits.expect("head attached"), &tb)?;
        let v = tape.item(total) as f64;
        Ok(LossTerms { total, attn: 0.0, hidden: 0.0, pred: v })
    }

    fn validation_loss(&mut self, model: &Model) -> Result<f64> {
        let head = head_of(model)?;
        let mut total = 0.0;
        let mut weight = 0.0;
        for chunk in self.val.chunks(DEFAULT_EVAL_BATCH) {
            let ex: Vec<&Encoded> = chunk.iter().collect();
            let tb = TaskBatch::new(&ex, self.max_len)?;
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &model.params, |_| false);
            let tv = encode(&mut tape, &model.config, Some(head), &pv, &tb.batch, None)?;
            let l = task_loss(&mut tape, head, tv.logits.expect("head attached"), &tb)?;
            total += tape.item(l) as f64 * chunk.len() as f64;
            weight += chunk.len() as f64;
        }
        Ok(if weight > 0.0 { total / weight } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{CLS, SEP};

    fn cfg() -> ModelConfig {
        ModelConfig { num_layers: 2, hidden_dim: 16, num_heads: 2, ffn_dim: 32, vocab_size: 12, max_seq_len: 8, dropout: 0.0 }
    }

    /// Class = whether token 5 or token 6 appears.
    fn toy(n: usize, seed: u64) -> Vec<Encoded> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let c = rng.random_range(0..2usize);
                let mut ids = vec![CLS];
                for _ in 0..4 {
                    ids.push(rng.random_range(7..12));
                }
                let at = rng.random_range(1..5);
                ids[at] = 5 + c;
                ids.push(SEP);
                Encoded { ids, target: Target::Class(c) }
            })
            .collect()
    }

    #[test]
    fn task_training_reduces_loss_and_selects_best() {
        let mut m = Model::init(cfg(), Some(HeadKind::Sequence { num_labels: 2 }), 1).unwrap();
        let mut obj = TaskObjective::new(toy(200, 1), toy(50, 2), 16, 8, 3).unwrap();
        let tc = TrainConfig { steps: 150, lr: 3e-3, weight_decay: 0.0, eval_interval: 25, select_best: true };
        let mask = mask_where(&m.params, |_| true);
        let out = train(&mut m, &mut obj, &tc, &mask).unwrap();
        let points = out.log.validation_points();
        assert_eq!(points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 25, 50, 75, 100, 125, 150]);
        let min = points.iter().cloned().fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert_eq!(out.selected_step, min.0);
        assert!(min.1 < 0.5 * points[0].1, "{points:?}");
        // the restored parameters reproduce the selected validation loss
        let again = obj.validation_loss(&m).unwrap();
        assert!((again - min.1).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut m = Model::init(cfg(), Some(HeadKind::Sequence { num_labels: 2 }), 1).unwrap();
        let before = m.clone();
        let mut obj = TaskObjective::new(toy(40, 1), vec![], 8, 8, 3).unwrap();
        let tc = TrainConfig { steps: 5, lr: 1e-2, weight_decay: 0.1, eval_interval: 0, select_best: false };
        let mask = mask_where(&m.params, |k| k.starts_with("head."));
        train(&mut m, &mut obj, &tc, &mask).unwrap();
        for (k, t) in &m.params {
            if k.starts_with("head.") {
                assert_ne!(t, &before.params[k], "{k}");
            } else {
                assert_eq!(t, &before.params[k], "{k}");
            }
        }
    }

    #[test]
    fn divergence_is_a_training_error() {
        let mut m = Model::init(cfg(), Some(HeadKind::Sequence { num_labels: 2 }), 1).unwrap();
        m.params.get_mut("head.seq.out.bias").unwrap().data_mut()[0] = f32::INFINITY;
        let mut obj = TaskObjective::new(toy(10, 1), vec![], 4, 8, 3).unwrap();
        let tc = TrainConfig { steps: 3, lr: 1e-3, weight_decay: 0.0, eval_interval: 0, select_best: false };
        let mask = mask_where(&m.params, |_| true);
        let err = train(&mut m, &mut obj, &tc, &mask).unwrap_err();
        assert!(matches!(err, Error::Training { step: 1, .. }));
    }

    #[test]
    fn mlm_training_runs() {
        let mut m = Model::init(cfg(), Some(HeadKind::Mlm), 2).unwrap();
        let seqs: Vec<Vec<usize>> = (0..64).map(|i| vec![CLS, 5 + i % 3, 8 + i % 4, 5 + i % 3, SEP]).collect();
        let mut obj = MlmObjective::new(seqs.clone(), &seqs[..16], 12, 8, 0.3, 8, 4).unwrap();
        let tc = TrainConfig { steps: 60, lr: 3e-3, weight_decay: 0.0, eval_interval: 20, select_best: true };
        let mask = mask_where(&m.params, |_| true);
        let out = train(&mut m, &mut obj, &tc, &mask).unwrap();
        let p = out.log.validation_points();
        assert!(p.last().unwrap().1 < p[0].1);
        assert!(out.log.to_tsv().starts_with(RunLog::HEADER));
    }
}
