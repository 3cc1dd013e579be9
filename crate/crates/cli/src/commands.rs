use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use bistil::data::synth::{synth_bilingual_corpus, SynthConfig};
use bistil::data::{encode_task, load_task_dataset, read_corpus, TaskDataset, TaskKind, TextEncoder};
use bistil::distill::{
    compose_task_teacher, general_bistillation, task_specific_distillation, DistillConfig, LossWeights,
};
use bistil::eval::{evaluate, measure_efficiency, EvalReport, EfficiencyReport, MIN_REPETITIONS};
use bistil::model::{load_checkpoint, save_checkpoint, save_checkpoint_with_map, Checkpoint, HeadKind, Model, ModelConfig};
use bistil::pipeline::{encode_lines, student_vocab_map, train_language_sft, train_mlm, train_task_sft, MlmConfig};
use bistil::sft::{load_delta, save_delta, SftConfig, SftDelta, SftOutcome};
use bistil::train::RunLog;
use bistil::vocab::{Vocabulary, DEFAULT_REDUCTION_THRESHOLD};

use crate::settings::Settings;
use crate::{CliError, Command, Common, Training};

type Res<T> = Result<T, CliError>;

const LABELS_FILE: &str = "labels.txt";

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn opt_path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn list(v: &[PathBuf]) -> Option<String> {
    (!v.is_empty()).then(|| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","))
}

fn training_flags(t: &Training) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("steps", opt(&t.steps)),
        ("lr", opt(&t.lr)),
        ("batch_size", opt(&t.batch_size)),
        ("eval_interval", opt(&t.eval_interval)),
    ]
}

fn resolve(
    command: &'static str,
    known: &[(&str, &str)],
    common: &Common,
    mut flags: Vec<(&'static str, Option<String>)>,
) -> Res<Settings> {
    let mut keys: Vec<(&str, &str)> = vec![("out", "")];
    keys.extend_from_slice(known);
    flags.push(("seed", opt(&common.seed)));
    flags.push(("out", opt_path(&common.out)));
    Settings::resolve(command, &keys, common.config.as_deref(), flags)
}

pub fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::GenCorpus { common, concepts, lines, overlap, topics } => gen_corpus(resolve(
            "gen-corpus",
            &[
                ("concepts", "120"),
                ("lines", "3000"),
                ("overlap", "0.1"),
                ("topics", "4"),
                ("aux_languages", "2"),
                ("code_switch", "3"),
                ("task_train", "1000"),
                ("task_val", "1000"),
                ("task_test", "2000"),
            ],
            &common,
            vec![("concepts", opt(&concepts)), ("lines", opt(&lines)), ("overlap", opt(&overlap)), ("topics", opt(&topics))],
        )?),
        Command::PretrainTeacher { common, training, corpus, vocab_size, layers, hidden, heads, ffn, max_seq_len, dropout } => {
            let mut flags = training_flags(&training);
            flags.extend([
                ("corpus", opt_path(&corpus)),
                ("vocab_size", opt(&vocab_size)),
                ("layers", opt(&layers)),
                ("hidden", opt(&hidden)),
                ("heads", opt(&heads)),
                ("ffn", opt(&ffn)),
                ("max_seq_len", opt(&max_seq_len)),
                ("dropout", opt(&dropout)),
            ]);
            pretrain_teacher(resolve(
                "pretrain-teacher",
                &[
                    ("corpus", ""),
                    ("vocab_size", "1000"),
                    ("layers", "6"),
                    ("hidden", "32"),
                    ("heads", "2"),
                    ("ffn", "64"),
                    ("max_seq_len", "16"),
                    ("dropout", "0.1"),
                    ("steps", "9000"),
                    ("lr", "0.001"),
                    ("batch_size", "32"),
                    ("eval_interval", "250"),
                ],
                &common,
                flags,
            )?)
        }
        Command::TrainLangSft { common, training, teacher, corpus, density } => {
            let mut flags = training_flags(&training);
            flags.extend([("teacher", opt_path(&teacher)), ("corpus", opt_path(&corpus)), ("density", opt(&density))]);
            train_lang(resolve(
                "train-lang-sft",
                &[
                    ("teacher", ""),
                    ("corpus", ""),
                    ("density", "0.04"),
                    ("steps", "300"),
                    ("lr", "0.002"),
                    ("batch_size", "32"),
                    ("eval_interval", "100"),
                ],
                &common,
                flags,
            )?)
        }
        Command::TrainTaskSft { common, training, teacher, lang_sft, train, val, task_kind, density } => {
            let mut flags = training_flags(&training);
            flags.extend([
                ("teacher", opt_path(&teacher)),
                ("lang_sft", list(&lang_sft)),
                ("train", opt_path(&train)),
                ("val", opt_path(&val)),
                ("task_kind", task_kind),
                ("density", opt(&density)),
            ]);
            train_task(resolve(
                "train-task-sft",
                &[
                    ("teacher", ""),
                    ("lang_sft", ""),
                    ("train", ""),
                    ("val", ""),
                    ("task_kind", "pairs"),
                    ("density", "0.08"),
                    ("steps", "300"),
                    ("lr", "0.002"),
                    ("batch_size", "32"),
                    ("eval_interval", "50"),
                ],
                &common,
                flags,
            )?)
        }
        Command::DistilGeneral { common, training, teacher, lang_sft, src, tgt, lrf, vocab_threshold } => {
            let mut flags = training_flags(&training);
            flags.extend([
                ("teacher", opt_path(&teacher)),
                ("lang_sft", list(&lang_sft)),
                ("src", opt_path(&src)),
                ("tgt", opt_path(&tgt)),
                ("lrf", opt(&lrf)),
                ("vocab_threshold", opt(&vocab_threshold)),
            ]);
            let threshold = DEFAULT_REDUCTION_THRESHOLD.to_string();
            distil_general(resolve(
                "distil-general",
                &[
                    ("teacher", ""),
                    ("lang_sft", ""),
                    ("src", ""),
                    ("tgt", ""),
                    ("lrf", "2"),
                    ("vocab_threshold", &threshold),
                    ("steps", "3000"),
                    ("lr", "0.002"),
                    ("batch_size", "32"),
                    ("eval_interval", "250"),
                    ("w_attn", "1"),
                    ("w_hidden", "1"),
                ],
                &common,
                flags,
            )?)
        }
        Command::DistilTask { common, training, teacher, lang_sft, task_sft, student, train, val, task_kind, density } => {
            let mut flags = training_flags(&training);
            flags.extend([
                ("teacher", opt_path(&teacher)),
                ("lang_sft", list(&lang_sft)),
                ("task_sft", opt_path(&task_sft)),
                ("student", opt_path(&student)),
                ("train", opt_path(&train)),
                ("val", opt_path(&val)),
                ("task_kind", task_kind),
                ("density", opt(&density)),
            ]);
            distil_task(resolve(
                "distil-task",
                &[
                    ("teacher", ""),
                    ("lang_sft", ""),
                    ("task_sft", ""),
                    ("student", ""),
                    ("train", ""),
                    ("val", ""),
                    ("task_kind", "pairs"),
                    ("density", "0.08"),
                    ("steps", "600"),
                    ("lr", "0.002"),
                    ("batch_size", "32"),
                    ("eval_interval", "50"),
                    ("w_attn", "1"),
                    ("w_hidden", "1"),
                    ("w_pred", "1"),
                ],
                &common,
                flags,
            )?)
        }
        Command::Evaluate { common, model, lang_sft, task_sft, data, task_kind } => run_evaluate(resolve(
            "evaluate",
            &[("model", ""), ("lang_sft", ""), ("task_sft", ""), ("data", ""), ("task_kind", "pairs")],
            &common,
            vec![
                ("model", opt_path(&model)),
                ("lang_sft", list(&lang_sft)),
                ("task_sft", opt_path(&task_sft)),
                ("data", opt_path(&data)),
                ("task_kind", task_kind),
            ],
        )?),
        Command::Bench { common, model, task_sft, reference, reference_task_sft, data, sample, reps } => {
            let reps_default = MIN_REPETITIONS.to_string();
            bench(resolve(
                "bench",
                &[
                    ("model", ""),
                    ("task_sft", ""),
                    ("reference", ""),
                    ("reference_task_sft", ""),
                    ("data", ""),
                    ("sample", "100"),
                    ("reps", &reps_default),
                ],
                &common,
                vec![
                    ("model", opt_path(&model)),
                    ("task_sft", opt_path(&task_sft)),
                    ("reference", opt_path(&reference)),
                    ("reference_task_sft", opt_path(&reference_task_sft)),
                    ("data", opt_path(&data)),
                    ("sample", opt(&sample)),
                    ("reps", opt(&reps)),
                ],
            )?)
        }
    }
}

fn git_describe() -> String {
    Process::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Creates the output directory and records the resolved settings.
fn prepare_out(s: &Settings) -> Res<PathBuf> {
    let out = s.path("out")?;
    fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let settings: BTreeMap<&str, &str> = s.pairs().iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let doc = serde_json::json!({
        "command": s.command(),
        "seed": s.seed()?,
        "git": git_describe(),
        "config": settings,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?;
    write(&out.join("run.json"), &(text + "\n"))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn save_log(dir: &Path, name: &str, log: &RunLog) -> Res<()> {
    Ok(log.save(&dir.join(name))?)
}

fn save_sft(dir: &Path, o: &SftOutcome) -> Res<()> {
    save_delta(dir, &o.delta)?;
    save_log(dir, "dense_log.tsv", &o.dense_log)?;
    save_log(dir, "sparse_log.tsv", &o.sparse_log)
}

fn sft_config(s: &Settings, train_head: bool) -> Res<SftConfig> {
    let steps = s.get("steps")?;
    let c = SftConfig {
        density: s.get("density")?,
        dense_steps: steps,
        sparse_steps: steps,
        lr: s.get("lr")?,
        weight_decay: 0.0,
        eval_interval: s.get("eval_interval")?,
        include_norms_and_biases: true,
        train_head,
    };
    c.validate()?;
    Ok(c)
}

fn positive(s: &Settings, key: &str) -> Res<usize> {
    let v: usize = s.get(key)?;
    if v == 0 {
        return Err(CliError::Usage(format!("--{} must be positive", key.replace('_', "-"))));
    }
    Ok(v)
}

/// A checkpoint together with the encoder for its inputs.
struct Loaded {
    model: Model,
    vocab: Vocabulary,
    enc: TextEncoder,
}

fn load_model(path: &Path) -> Res<Loaded> {
    let Checkpoint { model, vocab, vocab_map } = load_checkpoint(path)?;
    let vocab = vocab.ok_or_else(|| CliError::Data(format!("{}: checkpoint has no vocabulary", path.display())))?;
    let mut enc = TextEncoder::new(vocab.clone(), model.config.max_seq_len)?;
    if let Some(m) = vocab_map {
        enc = enc.with_map(m);
    }
    Ok(Loaded { model, vocab, enc })
}

fn load_deltas(paths: &[PathBuf]) -> Res<Vec<SftDelta>> {
    Ok(paths.iter().map(|p| load_delta(p)).collect::<bistil::Result<_>>()?)
}

fn task_kind(s: &Settings) -> Res<TaskKind> {
    s.raw("task_kind").parse().map_err(|e: bistil::Error| CliError::Usage(e.to_string()))
}

fn head_for(ds: &TaskDataset) -> HeadKind {
    match ds.kind {
        TaskKind::TokenClassification => HeadKind::Token { num_labels: ds.labels.len() },
        TaskKind::PairClassification => HeadKind::Sequence { num_labels: ds.labels.len() },
        TaskKind::SpanExtraction => HeadKind::Span,
    }
}

fn read_labels(delta_dir: &Path) -> Res<Option<Vec<String>>> {
    let p = delta_dir.join(LABELS_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    Ok(Some(text.lines().map(str::to_string).collect()))
}

fn write_labels(dir: &Path, ds: &TaskDataset) -> Res<()> {
    let mut text = ds.labels.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write(&dir.join(LABELS_FILE), &text)
}

/// Training and validation sets sharing one label list.
fn load_task_pair(s: &Settings, kind: TaskKind, labels: Option<&[String]>) -> Res<(TaskDataset, TaskDataset)> {
    let train = load_task_dataset(&s.existing("train")?, kind, labels)?;
    let val = load_task_dataset(&s.existing("val")?, kind, Some(&train.labels))?;
    if train.examples.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    Ok((train, val))
}

fn gen_corpus(s: Settings) -> Res<()> {
    let mut cfg = SynthConfig::new(s.seed()?, s.get("concepts")?, s.get("lines")?, s.get("overlap")?);
    cfg.topics = s.get("topics")?;
    cfg.aux_languages = s.get("aux_languages")?;
    cfg.code_switch = s.get("code_switch")?;
    cfg.task_train = s.get("task_train")?;
    cfg.task_val = s.get("task_val")?;
    cfg.task_test = s.get("task_test")?;
    cfg.validate()?;
    s.path("out")?;
    let corpus = synth_bilingual_corpus(&cfg)?;
    let out = prepare_out(&s)?;
    corpus.save(&out, &cfg)?;
    println!("wrote {} source and {} target lines to {}", corpus.src.len(), corpus.tgt.len(), out.display());
    Ok(())
}

fn pretrain_teacher(s: Settings) -> Res<()> {
    let seed = s.seed()?;
    let corpus_path = s.existing("corpus")?;
    let mut config = ModelConfig {
        num_layers: positive(&s, "layers")?,
        hidden_dim: positive(&s, "hidden")?,
        num_heads: positive(&s, "heads")?,
        ffn_dim: positive(&s, "ffn")?,
        vocab_size: positive(&s, "vocab_size")?,
        max_seq_len: s.get("max_seq_len")?,
        dropout: s.get("dropout")?,
    };
    config.validate()?;
    let mlm = MlmConfig {
        steps: s.get("steps")?,
        batch_size: positive(&s, "batch_size")?,
        lr: s.get("lr")?,
        eval_interval: s.get("eval_interval")?,
        seed: seed ^ 0x6d6c_6d,
    };
    s.path("out")?;
    let lines = read_corpus(&corpus_path)?;
    if lines.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", corpus_path.display())));
    }
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), config.vocab_size)?;
    config.vocab_size = vocab.len();
    let enc = TextEncoder::new(vocab.clone(), config.max_seq_len)?;
    let mut model = Model::init(config.clone(), Some(HeadKind::Mlm), seed)?;
    let out = prepare_out(&s)?;
    let log = train_mlm(&mut model, &encode_lines(&enc, &lines), config.max_seq_len, &mlm)?;
    save_checkpoint(&out, &model, Some(&vocab))?;
    save_log(&out, "pretrain_log.tsv", &log)?;
    if let Some((step, v)) = log.validation_points().last() {
        println!("step {step}: held-out MLM loss {v:.4}");
    }
    Ok(())
}

fn train_lang(s: Settings) -> Res<()> {
    let seed = s.seed()?;
    let cfg = sft_config(&s, false)?;
    let batch = positive(&s, "batch_size")?;
    let corpus_path = s.existing("corpus")?;
    let teacher = load_model(&s.existing("teacher")?)?;
    s.path("out")?;
    if teacher.model.head != Some(HeadKind::Mlm) {
        return Err(CliError::Data("language adaptation needs a teacher with an MLM head".into()));
    }
    let lines = read_corpus(&corpus_path)?;
    if lines.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", corpus_path.display())));
    }
    let out = prepare_out(&s)?;
    let max_len = teacher.model.config.max_seq_len;
    let o = train_language_sft(&teacher.model, &encode_lines(&teacher.enc, &lines), max_len, batch, &cfg, seed)?;
    save_sft(&out, &o)?;
    println!("language delta: {} entries", o.delta.nnz());
    Ok(())
}

fn train_task(s: Settings) -> Res<()> {
    let seed = s.seed()?;
    let cfg = sft_config(&s, true)?;
    let batch = positive(&s, "batch_size")?;
    let kind = task_kind(&s)?;
    let teacher = load_model(&s.existing("teacher")?)?;
    let lang_paths = s.existing_list("lang_sft")?;
    if lang_paths.len() > 1 {
        return Err(CliError::Usage("train-task-sft takes at most one --lang-sft".into()));
    }
    let lang = load_deltas(&lang_paths)?.pop();
    let (train, val) = load_task_pair(&s, kind, None)?;
    s.path("out")?;
    let out = prepare_out(&s)?;
    let max_len = teacher.model.config.max_seq_len;
    let o = train_task_sft(
        &teacher.model,
        lang.as_ref(),
        head_for(&train),
        encode_task(&train, &teacher.enc),
        encode_task(&val, &teacher.enc),
        max_len,
        batch,
        &cfg,
        seed,
    )?;
    save_sft(&out, &o)?;
    write_labels(&out, &train)?;
    println!("task delta: {} entries", o.delta.nnz());
    Ok(())
}

fn distil_general(s: Settings) -> Res<()> {
    let teacher = load_model(&s.existing("teacher")?)?;
    let cfg = DistillConfig {
        lrf: s.get("lrf")?,
        steps: s.get("steps")?,
        batch_size: positive(&s, "batch_size")?,
        max_seq_len: teacher.model.config.max_seq_len,
        lr: s.get("lr")?,
        eval_interval: s.get("eval_interval")?,
        weights: LossWeights { attn: s.get("w_attn")?, hidden: s.get("w_hidden")?, pred: 0.0 },
        seed: s.seed()?,
        ..DistillConfig::default()
    };
    cfg.validate()?;
    if teacher.model.config.num_layers % cfg.lrf != 0 {
        return Err(CliError::Usage(format!(
            "--lrf {} does not divide the teacher's {} layers",
            cfg.lrf, teacher.model.config.num_layers
        )));
    }
    let threshold: f64 = s.get("vocab_threshold")?;
    let lang_paths = s.existing_list("lang_sft")?;
    if !(lang_paths.is_empty() || lang_paths.len() == 2) {
        return Err(CliError::Usage("--lang-sft takes either nothing or the source then the target delta".into()));
    }
    let langs = load_deltas(&lang_paths)?;
    let src = read_corpus(&s.existing("src")?)?;
    let tgt = read_corpus(&s.existing("tgt")?)?;
    s.path("out")?;
    if src.is_empty() || tgt.is_empty() {
        return Err(CliError::Data("both language corpora must be nonempty".into()));
    }
    let map = student_vocab_map(&teacher.vocab, &src, &tgt, threshold)?;
    let out = prepare_out(&s)?;
    let o = general_bistillation(
        &teacher.model,
        langs.first(),
        langs.get(1),
        &encode_lines(&teacher.enc, &src),
        &encode_lines(&teacher.enc, &tgt),
        &map,
        &cfg,
    )?;
    save_checkpoint_with_map(&out, &o.student, Some(&teacher.vocab), Some(&map))?;
    save_log(&out, "general_log.tsv", &o.log)?;
    println!(
        "student: {} layers, vocabulary {} -> {}, selected step {}",
        o.student.config.num_layers,
        map.old_len(),
        map.new_len(),
        o.selected_step
    );
    Ok(())
}

fn distil_task(s: Settings) -> Res<()> {
    let seed = s.seed()?;
    let cfg = sft_config(&s, true)?;
    let batch = positive(&s, "batch_size")?;
    let weights = LossWeights { attn: s.get("w_attn")?, hidden: s.get("w_hidden")?, pred: s.get("w_pred")? };
    weights.validate()?;
    let kind = task_kind(&s)?;
    let teacher = load_model(&s.existing("teacher")?)?;
    let langs = load_deltas(&s.existing_list("lang_sft")?)?;
    let task_dir = s.existing("task_sft")?;
    let task = load_delta(&task_dir)?;
    let student_path = s.existing("student")?;
    let student = load_checkpoint(&student_path)?;
    let map = student
        .vocab_map
        .clone()
        .unwrap_or_else(|| bistil::vocab::VocabMap::identity(student.model.config.vocab_size));
    let labels = read_labels(&task_dir)?;
    let (train, val) = load_task_pair(&s, kind, labels.as_deref())?;
    s.path("out")?;
    let task_teacher = compose_task_teacher(&teacher.model, &langs.iter().collect::<Vec<_>>(), &task)?;
    let out = prepare_out(&s)?;
    let o = task_specific_distillation(
        &task_teacher,
        &student.model,
        &encode_task(&train, &teacher.enc),
        &encode_task(&val, &teacher.enc),
        &map,
        &cfg,
        weights,
        batch,
        teacher.model.config.max_seq_len,
        seed,
    )?;
    save_sft(&out, &o)?;
    write_labels(&out, &train)?;
    println!("student task delta: {} entries", o.delta.nnz());
    Ok(())
}

/// The checkpoint at `model` with the optional language and task deltas.
fn assemble(model: &Path, langs: &[PathBuf], task: Option<&Path>) -> Res<(Model, TextEncoder)> {
    let loaded = load_model(model)?;
    let langs = load_deltas(langs)?;
    let langs: Vec<&SftDelta> = langs.iter().collect();
    let m = match task {
        Some(t) => compose_task_teacher(&loaded.model, &langs, &load_delta(t)?)?,
        None => bistil::sft::apply_deltas(&loaded.model, &langs, false)?,
    };
    Ok((m, loaded.enc))
}

fn report_tsv(r: &EvalReport) -> String {
    let mut out = format!("metric\tvalue\tcount\n{}\t{:.4}\t{}\n", r.metric, r.value, r.count);
    for (k, v) in &r.extra {
        out.push_str(&format!("{k}\t{v:.4}\t{}\n", r.count));
    }
    for (k, v) in &r.per_class {
        out.push_str(&format!("class:{k}\t{v:.4}\t-\n"));
    }
    out
}

fn run_evaluate(s: Settings) -> Res<()> {
    let kind = task_kind(&s)?;
    let model_path = s.existing("model")?;
    let langs = s.existing_list("lang_sft")?;
    let task = s.optional_existing("task_sft")?;
    let data = s.existing("data")?;
    s.path("out")?;
    let labels = match &task {
        Some(t) => read_labels(t)?,
        None => None,
    };
    let ds = load_task_dataset(&data, kind, labels.as_deref())?;
    let (model, enc) = assemble(&model_path, &langs, task.as_deref())?;
    let out = prepare_out(&s)?;
    let r = evaluate(&model, &ds, &enc)?;
    write(&out.join("eval.tsv"), &report_tsv(&r))?;
    println!("{}\t{:.4}\t({} examples)", r.metric, r.value, r.count);
    Ok(())
}

fn bench(s: Settings) -> Res<()> {
    let model_path = s.existing("model")?;
    let task = s.optional_existing("task_sft")?;
    let reference = s.optional_existing("reference")?;
    let reference_task = s.optional_existing("reference_task_sft")?;
    let data = s.existing("data")?;
    let sample: usize = positive(&s, "sample")?;
    let reps: usize = s.get("reps")?;
    if reps < MIN_REPETITIONS {
        return Err(CliError::Usage(format!("--reps must be at least {MIN_REPETITIONS}")));
    }
    if reference_task.is_some() && reference.is_none() {
        return Err(CliError::Usage("--reference-task-sft requires --reference".into()));
    }
    s.path("out")?;
    let lines: Vec<String> = read_corpus(&data)?.into_iter().take(sample).collect();
    if lines.is_empty() {
        return Err(CliError::Data(format!("{}: no lines to time", data.display())));
    }
    let measure = |path: &Path, task: Option<&Path>| -> Res<EfficiencyReport> {
        let (m, enc) = assemble(path, &[], task)?;
        let seqs: Vec<Vec<usize>> = lines.iter().map(|l| enc.encode(l)).collect();
        Ok(measure_efficiency(&m, &seqs, reps)?)
    };
    let candidate = measure(&model_path, task.as_deref())?;
    let baseline = match &reference {
        Some(r) => Some(measure(r, reference_task.as_deref())?),
        None => None,
    };
    let out = prepare_out(&s)?;
    let mut text = String::from("name\tparams\tflops\tseconds\tparams_ratio\tflops_ratio\tspeed_ratio\n");
    let mut row = |name: &str, r: &EfficiencyReport, base: Option<&EfficiencyReport>| {
        let ratios = base.map(|b| r.relative_to(b));
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        text.push_str(&format!(
            "{name}\t{}\t{:.0}\t{:.6e}\t{}\t{}\t{}\n",
            r.params,
            r.flops_per_example,
            r.seconds_per_example,
            fmt(ratios.map(|x| x.params)),
            fmt(ratios.map(|x| x.flops)),
            fmt(ratios.map(|x| x.speed)),
        ));
    };
    if let Some(b) = &baseline {
        row("reference", b, Some(b));
    }
    row("model", &candidate, baseline.as_ref());
    print!("{text}");
    write(&out.join("bench.tsv"), &text)
}
