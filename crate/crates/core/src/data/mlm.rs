use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::vocab::{MASK, NUM_SPECIALS};

/// Label value for positions that carry no prediction target.
pub const IGNORE_LABEL: i64 = -100;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: Batch,
    /// Original id at selected positions, `IGNORE_LABEL` elsewhere.
    pub labels: Vec<i64>,
}

/// Selects each non-special real position with probability `rate`; of those,
/// 80% become MASK, 10% a random non-special token, 10% stay unchanged.
pub fn mlm_mask(batch: &Batch, rate: f64, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<MaskedBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Config("vocabulary has no ordinary tokens to sample".into()));
    }
    let mut out = batch.clone();
    let mut labels = vec![IGNORE_LABEL; batch.ids.len()];
    for i in 0..batch.ids.len() {
        let id = batch.ids[i];
        if !batch.mask[i] || id < NUM_SPECIALS {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        labels[i] = id as i64;
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[i] = MASK;
        } else if r < 0.9 {
            out.ids[i] = rng.random_range(NUM_SPECIALS..vocab_size);
        }
    }
    Ok(MaskedBatch { batch: out, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS, SEP};
    use rand::SeedableRng;

    fn batch(n: usize) -> Batch {
        let seqs: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut s = vec![CLS];
                s.extend((0..8).map(|j| 5 + (i + j) % 40));
                s.push(SEP);
                s
            })
            .collect();
        Batch::from_sequences(&seqs, 16).unwrap()
    }

    #[test]
    fn rejects_rates_outside_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(mlm_mask(&batch(1), r, 50, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn tiny_rate_labels_nothing_and_specials_never_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mlm_mask(&batch(4), 1e-12, 50, &mut rng).unwrap();
        assert!(m.labels.iter().all(|&l| l == IGNORE_LABEL));
        let m = mlm_mask(&batch(50), 0.99, 50, &mut rng).unwrap();
        let b = batch(50);
        for i in 0..b.ids.len() {
            if b.ids[i] < NUM_SPECIALS {
                assert_eq!(m.labels[i], IGNORE_LABEL);
                assert_eq!(m.batch.ids[i], b.ids[i]);
            }
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let a = mlm_mask(&batch(8), 0.15, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = mlm_mask(&batch(8), 0.15, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }
}
