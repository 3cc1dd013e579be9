mod common;

use std::collections::BTreeMap;

use bistil::data::{load_task_dataset, render_task, TaskDataset, TaskExample, TaskKind};
use bistil::model::{HeadKind, Model, ModelConfig, ParamSet};
use bistil::sft::{apply_deltas, budget, fingerprint, select_topk_mask, SftDelta, SparseTensor};
use bistil::tensor::ParamMask;
use bistil::tensor::{Tape, Tensor};
use bistil::vocab::{reduce_vocabulary, VocabMap, NUM_SPECIALS};
use common::reference::{self, M};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-6.0f32..6.0, rows * cols)
}

fn shape_and_data() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(r, c)| (Just(r), Just(c), matrix(r, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c, d) in shape_and_data(), shift in -20.0f32..20.0) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![r, c], d.clone()).unwrap(), false);
        let p = tape.softmax(x);
        let shifted: Vec<f32> = d.iter().map(|v| v + shift).collect();
        let y = tape.leaf(Tensor::new(vec![r, c], shifted).unwrap(), false);
        let q = tape.softmax(y);
        let oracle = reference::softmax(&M::from_f32(r, c, &d));
        for i in 0..r {
            let row = tape.value(p).row(i);
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            for (j, (&a, &b)) in row.iter().zip(tape.value(q).row(i)).enumerate() {
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() < 1e-5);
                prop_assert!((a as f64 - oracle.at(i, j)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn soft_cross_entropy_is_at_least_the_target_entropy((r, c, z) in shape_and_data(), seed in any::<u64>()) {
        let t: Vec<f32> = z.iter().enumerate().map(|(i, v)| v * 0.5 + ((seed >> (i % 60)) & 7) as f32 * 0.3).collect();
        let mut tape = Tape::new();
        let zs = tape.leaf(Tensor::new(vec![r, c], z.clone()).unwrap(), false);
        let p = reference::softmax(&M::from_f32(r, c, &t));
        let target = Tensor::new(vec![r, c], p.d.iter().map(|&v| v as f32).collect()).unwrap();
        let tv = tape.leaf(target, false);
        let ce = tape.soft_cross_entropy(zs, tv, None).unwrap();
        let oracle = reference::soft_cross_entropy(&M::from_f32(r, c, &z), &p);
        prop_assert!((tape.item(ce) as f64 - oracle).abs() < 1e-4 * oracle.abs().max(1.0));
        let entropy = reference::soft_cross_entropy(&M::from_f32(r, c, &t), &p);
        prop_assert!(oracle >= entropy - 1e-9);

        let own = tape.leaf(Tensor::new(vec![r, c], t.clone()).unwrap(), false);
        let matched = tape.soft_cross_entropy(own, tv, None).unwrap();
        prop_assert!((tape.item(matched) as f64 - entropy).abs() < 1e-4 * entropy.max(1.0));
    }

    #[test]
    fn mse_vanishes_exactly_on_equal_inputs((r, c, a) in shape_and_data(), bump in 0usize..64, by in 0.01f32..2.0) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![r, c], a.clone()).unwrap(), false);
        let y = tape.leaf(Tensor::new(vec![r, c], a.clone()).unwrap(), false);
        let same = tape.mse(x, y, None).unwrap();
        prop_assert_eq!(tape.item(same), 0.0);
        let mut b = a.clone();
        b[bump % a.len()] += by;
        let z = tape.leaf(Tensor::new(vec![r, c], b.clone()).unwrap(), false);
        let diff = tape.mse(x, z, None).unwrap();
        prop_assert!(tape.item(diff) > 0.0);
        let oracle = reference::mse(&M::from_f32(r, c, &a), &M::from_f32(r, c, &b), None);
        prop_assert!((tape.item(diff) as f64 - oracle).abs() < 1e-5 * oracle.max(1.0));
    }

    #[test]
    fn vocabulary_reduction_is_the_threshold_filter(
        probs in prop::collection::vec((0.0f64..0.05, 0.0f64..0.05), NUM_SPECIALS..200),
        threshold in 0.0f64..0.05,
    ) {
        let (p_src, p_tgt): (Vec<f64>, Vec<f64>) = probs.into_iter().unzip();
        let map = reduce_vocabulary(&p_src, &p_tgt, threshold).unwrap();
        let expected: Vec<usize> = (0..p_src.len())
            .filter(|&t| t < NUM_SPECIALS || p_src[t] >= threshold || p_tgt[t] >= threshold)
            .collect();
        prop_assert_eq!(map.kept(), &expected[..]);
    }

    #[test]
    fn vocab_map_is_a_bijection_onto_kept_ids(
        kept in prop::collection::vec(0usize..300, 0..120),
        extra in 0usize..50,
    ) {
        let old = kept.iter().copied().max().unwrap_or(0).max(NUM_SPECIALS) + 1 + extra;
        let map = VocabMap::from_kept(kept.clone(), old).unwrap();
        prop_assert!(map.kept().windows(2).all(|w| w[0] < w[1]));
        prop_assert!((0..NUM_SPECIALS).all(|s| map.old_to_new(s) == Some(s)));
        for new in 0..map.new_len() {
            let o = map.new_to_old(new).unwrap();
            prop_assert_eq!(map.old_to_new(o), Some(new));
        }
        for o in 0..old {
            let present = o < NUM_SPECIALS || kept.contains(&o);
            prop_assert_eq!(map.old_to_new(o).is_some(), present);
        }
        prop_assert_eq!(map.new_to_old(map.new_len()), None);
    }

    #[test]
    fn budget_is_the_ceiling(k in 0.001f64..1.0, n in 0usize..100_000) {
        let b = budget(k, n);
        let exact = k * n as f64;
        prop_assert!(b <= n);
        prop_assert!(b as f64 >= exact - 1e-6);
        prop_assert!((b as f64) < exact + 1.0);
    }

    #[test]
    fn topk_mask_matches_a_full_sort(
        sizes in prop::collection::vec(1usize..40, 1..5),
        seed in any::<u64>(),
        k in 0.01f64..1.0,
        coarse in any::<bool>(),
    ) {
        let mut theta0 = ParamSet::new();
        let mut dense = ParamSet::new();
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        for (i, &n) in sizes.iter().enumerate() {
            let a: Vec<f32> = (0..n).map(|_| next()).collect();
            // Coarse offsets force ties, which must break by (name, index).
            let b: Vec<f32> = a.iter().map(|&x| x + if coarse { (next() * 4.0).floor() - 2.0 } else { next() - 0.5 }).collect();
            theta0.insert(format!("p{i}"), Tensor::new(vec![n], a).unwrap());
            dense.insert(format!("p{i}"), Tensor::new(vec![n], b).unwrap());
        }
        let mask = select_topk_mask(&theta0, &dense, k, &|_| true).unwrap();

        let mut all: Vec<(f32, String, usize)> = Vec::new();
        for (name, t) in &theta0 {
            for (i, (&x, &y)) in t.data().iter().zip(dense[name].data()).enumerate() {
                all.push(((y - x).abs(), name.clone(), i));
            }
        }
        all.sort_by(|p, q| q.0.total_cmp(&p.0).then_with(|| p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
        let keep = (k * all.len() as f64 - 1e-9).ceil() as usize;
        let mut expected: BTreeMap<String, Vec<bool>> =
            theta0.iter().map(|(k, t)| (k.clone(), vec![false; t.numel()])).collect();
        for (_, name, i) in &all[..keep] {
            expected.get_mut(name).unwrap()[*i] = true;
        }
        for (name, want) in expected {
            prop_assert_eq!(mask.get(&name), Some(&ParamMask::Elements(want)));
        }
    }

    #[test]
    fn delta_composition_commutes_and_matches_dense_addition(seed in any::<u64>(), count in 1usize..5, rotate in 0usize..5) {
        let config = ModelConfig { num_layers: 1, hidden_dim: 4, num_heads: 2, ffn_dim: 8, vocab_size: 12, max_seq_len: 4, dropout: 0.0 };
        let base = Model::init(config, Some(HeadKind::Mlm), seed).unwrap();
        let fp = fingerprint(&base.params);
        let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut deltas = Vec::new();
        let mut dense: BTreeMap<String, Vec<f64>> =
            base.params.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|&x| x as f64).collect())).collect();
        for _ in 0..count {
            let mut entries = BTreeMap::new();
            for (name, t) in &base.params {
                let indices: Vec<u64> = (0..t.numel() as u64).filter(|_| next() < 0.2).collect();
                if indices.is_empty() {
                    continue;
                }
                let values: Vec<f32> = indices.iter().map(|_| (next() * 2.0 - 1.0) as f32).collect();
                for (&i, &v) in indices.iter().zip(&values) {
                    dense.get_mut(name).unwrap()[i as usize] += v as f64;
                }
                entries.insert(name.clone(), SparseTensor { indices, values });
            }
            deltas.push(SftDelta { base_fingerprint: fp, density: 0.2, entries, head: None });
        }
        let forward: Vec<&SftDelta> = deltas.iter().collect();
        let mut shuffled = forward.clone();
        shuffled.reverse();
        shuffled.rotate_left(rotate % count);
        let a = apply_deltas(&base, &forward, false).unwrap();
        let b = apply_deltas(&base, &shuffled, false).unwrap();
        for (name, t) in &a.params {
            for (j, (&x, &y)) in t.data().iter().zip(b.params[name].data()).enumerate() {
                prop_assert!((x - y).abs() <= 1e-6);
                prop_assert!((x as f64 - dense[name][j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn task_files_round_trip(
        pairs in prop::collection::vec(("[a-z]{1,6}( [a-z]{1,6}){0,3}", "[a-z]{1,6}( [a-z]{1,6}){0,3}", 0usize..3), 1..12),
        sentences in prop::collection::vec(prop::collection::vec(("[a-zα-ω]{1,5}", 0usize..4), 1..6), 1..6),
        spans in prop::collection::vec(("[a-z]{1,5}( [a-zé]{1,5}){1,6}", "[a-z ]{1,10}", 0usize..40, 1usize..6), 1..6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let labels = |n: usize| (0..n).map(|i| format!("L{i}")).collect::<Vec<_>>();

        let pair_ds = TaskDataset {
            kind: TaskKind::PairClassification,
            labels: labels(3),
            examples: pairs
                .into_iter()
                .map(|(premise, hypothesis, label)| TaskExample::Pair { premise, hypothesis, label })
                .collect(),
        };
        let tok_ds = TaskDataset {
            kind: TaskKind::TokenClassification,
            labels: labels(4),
            examples: sentences
                .into_iter()
                .map(|s| {
                    let (tokens, labels) = s.into_iter().unzip();
                    TaskExample::Tokens { tokens, labels }
                })
                .collect(),
        };
        let span_ds = TaskDataset {
            kind: TaskKind::SpanExtraction,
            labels: Vec::new(),
            examples: spans
                .into_iter()
                .map(|(context, question, start, len)| {
                    let chars: Vec<char> = context.chars().collect();
                    let start = start % chars.len();
                    let len = len.min(chars.len() - start);
                    let answer_text: String = chars[start..start + len].iter().collect();
                    TaskExample::Span { context, question, answer_start: start, answer_text }
                })
                .collect(),
        };
        for (i, ds) in [pair_ds, tok_ds, span_ds].into_iter().enumerate() {
            let path = dir.path().join(format!("t{i}"));
            std::fs::write(&path, render_task(&ds)).unwrap();
            let back = load_task_dataset(&path, ds.kind, Some(&ds.labels)).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(render_task(&back), render_task(&ds));
        }
    }
}
