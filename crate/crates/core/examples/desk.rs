//! Runs the desk-scale experiment and prints its metrics.
//!
//! Usage: cargo run --release --example desk -- [OUT_DIR] [SEED] [key=value ...]
//!
//! Keys: overlap, code_switch, concepts, lines, task_test, hidden, ffn, pretrain_steps,
//! pretrain_lr, distill_steps, distill_lr, sft_steps.

use std::path::PathBuf;
use std::time::Instant;

use bistil::pipeline::{run_desk, DeskConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "desk_run".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let mut cfg = DeskConfig::new(seed);
    for kv in args {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
        match k {
            "overlap" => cfg.synth.overlap = v.parse()?,
            "code_switch" => cfg.synth.code_switch = v.parse()?,
            "concepts" => cfg.synth.concepts = v.parse()?,
            "lines" => cfg.synth.lines = v.parse()?,
            "task_test" => cfg.synth.task_test = v.parse()?,
            "task_val" => cfg.synth.task_val = v.parse()?,
            "hidden" => cfg.teacher.hidden_dim = v.parse()?,
            "ffn" => cfg.teacher.ffn_dim = v.parse()?,
            "pretrain_steps" => cfg.pretrain.steps = v.parse()?,
            "pretrain_lr" => cfg.pretrain.lr = v.parse()?,
            "distill_steps" => cfg.distill.steps = v.parse()?,
            "distill_lr" => cfg.distill.lr = v.parse()?,
            "sft_steps" => {
                let n = v.parse()?;
                for s in [&mut cfg.task_sft, &mut cfg.student_task_sft] {
                    s.dense_steps = n;
                    s.sparse_steps = n;
                }
            }
            "student_sft_steps" => {
                let n = v.parse()?;
                cfg.student_task_sft.dense_steps = n;
                cfg.student_task_sft.sparse_steps = n;
            }
            _ => return Err(format!("unknown key {k:?}").into()),
        }
    }
    let t = Instant::now();
    let r = run_desk(&cfg, &out)?;
    print!("{}", r.to_tsv());
    println!("vocab\t{} -> {}", r.teacher_vocab, r.student_vocab);
    println!("elapsed\t{:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
