//! The stages of the bilingual distillation recipe as reusable steps, and
//! the seed-fixed desk-scale experiment that chains them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::synth::{synth_bilingual_corpus, SynthConfig, SynthCorpus};
use crate::data::{encode_task, holdout_split, Encoded, TextEncoder};
use crate::distill::{compose_task_teacher, general_bistillation, task_specific_distillation, DistillConfig, DistillOutcome};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{save_checkpoint, save_checkpoint_with_map, HeadKind, Model, ModelConfig};
use crate::sft::{apply_deltas, attach_delta_head, fingerprint, lt_sft_train, save_delta, SftConfig, SftDelta, SftOutcome};
use crate::train::{mask_where, train, MlmObjective, RunLog, TaskObjective, TrainConfig};
use crate::vocab::{reduce_vocabulary, unigram_probs, VocabMap, Vocabulary, DEFAULT_REDUCTION_THRESHOLD};

pub const MLM_RATE: f64 = 0.15;

/// Held-out split used by every unsupervised stage: one line in 20.
const HOLDOUT_EVERY: usize = crate::distill::HOLDOUT_EVERY;

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
}

pub fn encode_lines(enc: &TextEncoder, lines: &[String]) -> Vec<Vec<usize>> {
    lines.iter().map(|l| enc.encode_root(l)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub eval_interval: usize,
    pub seed: u64,
}

/// Masked-language-model training of every parameter with held-out
/// checkpoint selection. `seqs` are in the model's vocabulary.
pub fn train_mlm(model: &mut Model, seqs: &[Vec<usize>], max_len: usize, cfg: &MlmConfig) -> Result<RunLog> {
    if model.head != Some(HeadKind::Mlm) {
        return Err(Error::Contract("masked language modelling needs an MLM head".into()));
    }
    let (tr, held) = holdout_split(seqs, HOLDOUT_EVERY);
    let mut obj = MlmObjective::new(tr, &held, model.config.vocab_size, cfg.batch_size, MLM_RATE, max_len, cfg.seed)?;
    let tc = TrainConfig { steps: cfg.steps, lr: cfg.lr, weight_decay: 0.0, eval_interval: cfg.eval_interval, select_best: cfg.eval_interval > 0 };
    let mask = mask_where(&model.params, |_| true);
    Ok(train(model, &mut obj, &tc, &mask)?.log)
}

/// Language adaptation: LT-SFT of the encoder under the MLM objective on
/// monolingual text. The MLM head stays fixed.
pub fn train_language_sft(teacher: &Model, seqs: &[Vec<usize>], max_len: usize, batch_size: usize, sft: &SftConfig, seed: u64) -> Result<SftOutcome> {
    let (tr, held) = holdout_split(seqs, HOLDOUT_EVERY);
    let mut obj = MlmObjective::new(tr, &held, teacher.config.vocab_size, batch_size, MLM_RATE, max_len, seed)?;
    let cfg = SftConfig { train_head: false, ..sft.clone() };
    lt_sft_train(teacher, fingerprint(&teacher.params), &mut obj, &cfg)
}

/// Task adaptation: LT-SFT with a freshly initialized task head on top of
/// the source-language-adapted teacher. The delta is tagged with the
/// teacher's own fingerprint so it composes with either language delta.
#[allow(clippy::too_many_arguments)]
pub fn train_task_sft(
    teacher: &Model,
    lang: Option<&SftDelta>,
    head: HeadKind,
    train_set: Vec<Encoded>,
    val_set: Vec<Encoded>,
    max_len: usize,
    batch_size: usize,
    sft: &SftConfig,
    seed: u64,
) -> Result<SftOutcome> {
    let base = teacher.without_head();
    let mut start = apply_deltas(&base, &lang.into_iter().collect::<Vec<_>>(), false)?;
    start.attach_head(head, seed)?;
    crate::train::check_targets(head, &train_set)?;
    let mut obj = TaskObjective::new(train_set, val_set, batch_size, max_len, seed)?;
    lt_sft_train(&start, fingerprint(&base.params), &mut obj, sft)
}

/// Base model plus deltas plus the head carried by the task delta.
pub fn task_model(base: &Model, language: &[&SftDelta], task: &SftDelta) -> Result<Model> {
    compose_task_teacher(base, language, task)
}

/// Tokens kept for a student: specials plus every token whose unigram
/// probability reaches the threshold in either language.
pub fn student_vocab_map(vocab: &Vocabulary, src: &[String], tgt: &[String], threshold: f64) -> Result<VocabMap> {
    let ps = unigram_probs(src.iter().map(String::as_str), vocab)?;
    let pt = unigram_probs(tgt.iter().map(String::as_str), vocab)?;
    reduce_vocabulary(&ps, &pt, threshold)
}

/// Everything the desk experiment varies.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub vocab_size: usize,
    pub teacher: ModelConfig,
    pub batch_size: usize,
    pub pretrain: MlmConfig,
    pub lang_sft: SftConfig,
    pub task_sft: SftConfig,
    pub distill: DistillConfig,
    pub student_task_sft: SftConfig,
    pub lrfs: Vec<usize>,
}

impl DeskConfig {
    pub fn new(seed: u64) -> Self {
        let mut synth = SynthConfig::new(seed, 120, 3000, 0.1);
        synth.task_train = 1000;
        synth.task_val = 1000;
        synth.task_test = 2000;
        synth.code_switch = 3.0;
        let teacher = ModelConfig { num_layers: 6, hidden_dim: 32, num_heads: 2, ffn_dim: 64, vocab_size: 0, max_seq_len: 16, dropout: 0.1 };
        let sft = |density: f64, steps: usize, lr: f32, eval: usize| SftConfig {
            density,
            dense_steps: steps,
            sparse_steps: steps,
            lr,
            weight_decay: 0.0,
            eval_interval: eval,
            include_norms_and_biases: true,
            train_head: true,
        };
        DeskConfig {
            seed,
            synth,
            vocab_size: 1000,
            teacher,
            batch_size: 32,
            pretrain: MlmConfig { steps: 9000, batch_size: 32, lr: 1e-3, eval_interval: 250, seed: stage_seed(seed, 1) },
            lang_sft: sft(0.04, 300, 2e-3, 100),
            task_sft: sft(0.08, 300, 2e-3, 50),
            distill: DistillConfig {
                steps: 3000,
                batch_size: 32,
                max_seq_len: 16,
                lr: 2e-3,
                eval_interval: 250,
                seed: stage_seed(seed, 5),
                ..DistillConfig::default()
            },
            student_task_sft: sft(0.08, 600, 2e-3, 50),
            lrfs: vec![2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentResult {
    pub lrf: usize,
    pub src: EvalReport,
    pub tgt: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeskResult {
    pub teacher_src: EvalReport,
    pub teacher_tgt: EvalReport,
    pub students: Vec<StudentResult>,
    pub scratch_tgt: EvalReport,
    pub scratch_src: EvalReport,
    pub student_vocab: usize,
    pub teacher_vocab: usize,
}

impl DeskResult {
    pub fn student(&self, lrf: usize) -> Option<&StudentResult> {
        self.students.iter().find(|s| s.lrf == lrf)
    }

    /// `name<TAB>language<TAB>metric<TAB>value` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tlanguage\tmetric\tvalue\n");
        let mut row = |name: &str, lang: &str, r: &EvalReport| {
            let _ = writeln!(out, "{name}\t{lang}\t{}\t{:.4}", r.metric, r.value);
        };
        row("teacher", "src", &self.teacher_src);
        row("teacher", "tgt", &self.teacher_tgt);
        for s in &self.students {
            let name = format!("bistil_lrf{}", s.lrf);
            row(&name, "src", &s.src);
            row(&name, "tgt", &s.tgt);
        }
        row("scratch", "src", &self.scratch_src);
        row("scratch", "tgt", &self.scratch_tgt);
        out
    }
}

fn log_to(dir: &Path, name: &str, log: &RunLog) -> Result<()> {
    log.save(&dir.join(name))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sft_logs(dir: &Path, out: &SftOutcome) -> Result<()> {
    log_to(dir, "dense_log.tsv", &out.dense_log)?;
    log_to(dir, "sparse_log.tsv", &out.sparse_log)
}

/// Runs the whole desk experiment and writes every artifact under `out`.
pub fn run_desk(cfg: &DeskConfig, out: &Path) -> Result<DeskResult> {
    mkdir(out)?;
    let corpus: SynthCorpus = synth_bilingual_corpus(&cfg.synth)?;
    corpus.save(&out.join("corpus"), &cfg.synth)?;
    let max_len = cfg.teacher.max_seq_len;

    // teacher pretraining on the multilingual mixture
    let vocab = Vocabulary::build(corpus.pretrain.iter().map(String::as_str), cfg.vocab_size)?;
    let enc = TextEncoder::new(vocab.clone(), max_len)?;
    let mut tcfg = cfg.teacher.clone();
    tcfg.vocab_size = vocab.len();
    let mut teacher = Model::init(tcfg, Some(HeadKind::Mlm), stage_seed(cfg.seed, 0))?;
    let pre = train_mlm(&mut teacher, &encode_lines(&enc, &corpus.pretrain), max_len, &cfg.pretrain)?;
    let tdir = out.join("teacher");
    save_checkpoint(&tdir, &teacher, Some(&vocab))?;
    log_to(&tdir, "pretrain_log.tsv", &pre)?;

    // language and task adaptation of the teacher
    let src = encode_lines(&enc, &corpus.src);
    let tgt = encode_lines(&enc, &corpus.tgt);
    let mut lang = Vec::new();
    for (name, seqs, stage) in [("lang_src", &src, 2), ("lang_tgt", &tgt, 3)] {
        let o = train_language_sft(&teacher, seqs, max_len, cfg.batch_size, &cfg.lang_sft, stage_seed(cfg.seed, stage))?;
        let d = out.join("sft").join(name);
        save_delta(&d, &o.delta)?;
        sft_logs(&d, &o)?;
        lang.push(o.delta);
    }
    let (phi_src, phi_tgt) = (&lang[0], &lang[1]);
    let head = HeadKind::Sequence { num_labels: corpus.task_train.labels.len() };
    let task_train = encode_task(&corpus.task_train, &enc);
    let task_val = encode_task(&corpus.task_val, &enc);
    let task = train_task_sft(
        &teacher,
        Some(phi_src),
        head,
        task_train.clone(),
        task_val.clone(),
        max_len,
        cfg.batch_size,
        &cfg.task_sft,
        stage_seed(cfg.seed, 4),
    )?;
    let d = out.join("sft").join("task_teacher");
    save_delta(&d, &task.delta)?;
    sft_logs(&d, &task)?;
    let phi_task = &task.delta;

    let teacher_src = evaluate(&task_model(&teacher, &[phi_src], phi_task)?, &corpus.task_test_src, &enc)?;
    let teacher_tgt = evaluate(&task_model(&teacher, &[phi_tgt], phi_task)?, &corpus.task_test_tgt, &enc)?;

    // bilingual students
    let map = student_vocab_map(&vocab, &corpus.src, &corpus.tgt, DEFAULT_REDUCTION_THRESHOLD)?;
    let senc = enc.clone().with_map(map.clone());
    let mut task_langs: Vec<&SftDelta> = vec![phi_src];
    if cfg.distill.task_teacher_target_sft {
        task_langs.push(phi_tgt);
    }
    let task_teacher = compose_task_teacher(&teacher, &task_langs, phi_task)?;
    let mut students = Vec::new();
    for &lrf in &cfg.lrfs {
        let dc = DistillConfig { lrf, ..cfg.distill.clone() };
        let DistillOutcome { student, log, .. } = general_bistillation(&teacher, Some(phi_src), Some(phi_tgt), &src, &tgt, &map, &dc)?;
        let sdir = out.join(format!("bistil_lrf{lrf}"));
        save_checkpoint_with_map(&sdir, &student, Some(&vocab), Some(&map))?;
        log_to(&sdir, "general_log.tsv", &log)?;
        let o = task_specific_distillation(
            &task_teacher,
            &student,
            &task_train,
            &task_val,
            &map,
            &cfg.student_task_sft,
            dc.weights,
            dc.batch_size,
            max_len,
            // Shared across students so their comparison is paired.
            stage_seed(cfg.seed, 10),
        )?;
        save_delta(&sdir.join("task_sft"), &o.delta)?;
        sft_logs(&sdir.join("task_sft"), &o)?;
        let m = with_task(&student, &o.delta)?;
        students.push(StudentResult {
            lrf,
            src: evaluate(&m, &corpus.task_test_src, &senc)?,
            tgt: evaluate(&m, &corpus.task_test_tgt, &senc)?,
        });
    }

    // same architecture as the lrf=2 student, trained from scratch on the
    // two monolingual corpora
    let scratch_layers = cfg.teacher.num_layers / cfg.lrfs.first().copied().unwrap_or(2);
    let scfg = ModelConfig { num_layers: scratch_layers, vocab_size: map.new_len(), ..cfg.teacher.clone() };
    let mut scratch = Model::init(scfg, Some(HeadKind::Mlm), stage_seed(cfg.seed, 20))?;
    let mut mono: Vec<Vec<usize>> = Vec::with_capacity(src.len() + tgt.len());
    for (a, b) in src.iter().zip(&tgt) {
        mono.push(map.map_ids(a));
        mono.push(map.map_ids(b));
    }
    let scratch_mlm = MlmConfig { steps: cfg.distill.steps, lr: cfg.distill.lr, seed: stage_seed(cfg.seed, 21), ..cfg.pretrain.clone() };
    let slog = train_mlm(&mut scratch, &mono, max_len, &scratch_mlm)?;
    let scdir = out.join("scratch");
    save_checkpoint_with_map(&scdir, &scratch, Some(&vocab), Some(&map))?;
    log_to(&scdir, "mlm_log.tsv", &slog)?;
    let mapped = |v: &[Encoded]| -> Vec<Encoded> { v.iter().map(|e| Encoded { ids: map.map_ids(&e.ids), target: e.target.clone() }).collect() };
    let so = train_task_sft(
        &scratch,
        None,
        head,
        mapped(&task_train),
        mapped(&task_val),
        max_len,
        cfg.batch_size,
        &cfg.student_task_sft,
        stage_seed(cfg.seed, 22),
    )?;
    save_delta(&scdir.join("task_sft"), &so.delta)?;
    sft_logs(&scdir.join("task_sft"), &so)?;
    let sm = with_task(&scratch.without_head(), &so.delta)?;
    let scratch_src = evaluate(&sm, &corpus.task_test_src, &senc)?;
    let scratch_tgt = evaluate(&sm, &corpus.task_test_tgt, &senc)?;

    let result = DeskResult {
        teacher_src,
        teacher_tgt,
        students,
        scratch_src,
        scratch_tgt,
        student_vocab: map.new_len(),
        teacher_vocab: vocab.len(),
    };
    let mp = out.join("metrics.tsv");
    fs::write(&mp, result.to_tsv()).map_err(|e| Error::io(&mp, e))?;
    Ok(result)
}

/// A headless model with a task delta and its head applied.
pub fn with_task(base: &Model, delta: &SftDelta) -> Result<Model> {
    let mut m = apply_deltas(&base.without_head(), &[delta], false)?;
    attach_delta_head(&mut m, delta)?;
    Ok(m)
}
