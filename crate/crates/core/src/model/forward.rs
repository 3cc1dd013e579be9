use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{HeadKind, Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::PAD;

/// Additive score bias on padded keys; large enough that the softmax weight
/// underflows to exactly zero.
pub const PAD_SCORE_BIAS: f32 = -1e4;

/// Right-padded id matrix, `batch × len` flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Pads to the longest sequence after truncating each to `max_len`.
    pub fn from_sequences(seqs: &[Vec<usize>], max_len: usize) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.len().min(max_len)).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Domain("batch holds only empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let n = s.len().min(len);
            ids.extend_from_slice(&s[..n]);
            ids.extend(std::iter::repeat_n(PAD, len - n));
            mask.extend(std::iter::repeat_n(true, n));
            mask.extend(std::iter::repeat_n(false, len - n));
        }
        Ok(Batch { ids, mask, batch: seqs.len(), len })
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Row index of the first token of sequence `b` in the flattened layout.
    pub fn cls_row(&self, b: usize) -> usize {
        b * self.len
    }
}

/// Student dropout source for training-time forward passes.
pub struct Dropout<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub p: f32,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let n = tape.value(x).numel();
        let keep: Vec<bool> = (0..n).map(|_| self.rng.random::<f32>() >= self.p).collect();
        tape.dropout(x, &keep, self.p)
    }
}

pub type ParamVars = BTreeMap<String, Var>;

/// Puts every parameter on the tape as a borrowed leaf.
pub fn register_params<'a>(
    tape: &mut Tape<'a>,
    params: &'a ParamSet,
    trainable: impl Fn(&str) -> bool,
) -> ParamVars {
    params
        .iter()
        .map(|(k, t)| (k.clone(), tape.param(t, trainable(k))))
        .collect()
}

fn get(p: &ParamVars, name: &str) -> Result<Var> {
    p.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
}

/// Tape handles for everything the distillation losses read.
#[derive(Clone, Debug)]
pub struct TraceVars {
    /// Per layer, post-softmax attention `[batch, heads, len, len]`.
    pub attn: Vec<Var>,
    /// Embedding output then each layer output, `[batch*len, d]`.
    pub hidden: Vec<Var>,
    /// Head output: `[batch*len, C]` for per-token heads, `[batch, C]` for
    /// sequence classification.
    pub logits: Option<Var>,
}

fn linear(tape: &mut Tape<'_>, p: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, get(p, &format!("{prefix}.weight"))?, false)?;
    tape.add(y, get(p, &format!("{prefix}.bias"))?)
}

/// Records the encoder (and head, if any) forward pass on `tape`.
pub fn encode(
    tape: &mut Tape<'_>,
    config: &ModelConfig,
    head: Option<HeadKind>,
    p: &ParamVars,
    batch: &Batch,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<TraceVars> {
    let (b, l, h) = (batch.batch, batch.len, config.num_heads);
    if l > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {l} exceeds the model maximum {}",
            config.max_seq_len
        )));
    }
    if batch.ids.len() != b * l || batch.mask.len() != b * l {
        return Err(Error::Dimension("batch ids/mask do not match batch × len".into()));
    }
    let tok = tape.embed(get(p, "embeddings.token")?, &batch.ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = tape.embed(get(p, "embeddings.position")?, &positions)?;
    let h0 = tape.add(tok, pos)?;

    let mut bias = Tensor::zeros(&[b, h, l, l]);
    {
        let data = bias.data_mut();
        for bi in 0..b {
            for j in 0..l {
                if !batch.mask[bi * l + j] {
                    for hi in 0..h {
                        for i in 0..l {
                            data[((bi * h + hi) * l + i) * l + j] = PAD_SCORE_BIAS;
                        }
                    }
                }
            }
        }
    }

    let mut attn = Vec::with_capacity(config.num_layers);
    let mut hidden = vec![h0];
    let mut x = match dropout.as_deref_mut() {
        Some(d) => d.apply(tape, h0)?,
        None => h0,
    };
    for layer in 1..=config.num_layers {
        let pre = format!("layer.{layer}");
        let q = linear(tape, p, x, &format!("{pre}.attn.query"))?;
        let k = linear(tape, p, x, &format!("{pre}.attn.key"))?;
        let v = linear(tape, p, x, &format!("{pre}.attn.value"))?;
        let scores = tape.attn_scores(q, k, b, l, h)?;
        let scores = tape.add_const(scores, &bias)?;
        let probs = tape.softmax(scores);
        attn.push(probs);
        let ctx = tape.attn_apply(probs, v, b, l, h)?;
        let mut o = linear(tape, p, ctx, &format!("{pre}.attn.output"))?;
        if let Some(d) = dropout.as_deref_mut() {
            o = d.apply(tape, o)?;
        }
        let r = tape.add(o, x)?;
        let a = tape.layer_norm(
            r,
            get(p, &format!("{pre}.attn_norm.gain"))?,
            get(p, &format!("{pre}.attn_norm.bias"))?,
        )?;
        let inner = linear(tape, p, a, &format!("{pre}.ffn.inner"))?;
        let inner = tape.gelu(inner);
        let mut f = linear(tape, p, inner, &format!("{pre}.ffn.outer"))?;
        if let Some(d) = dropout.as_deref_mut() {
            f = d.apply(tape, f)?;
        }
        let r = tape.add(f, a)?;
        x = tape.layer_norm(
            r,
            get(p, &format!("{pre}.ffn_norm.gain"))?,
            get(p, &format!("{pre}.ffn_norm.bias"))?,
        )?;
        hidden.push(x);
    }

    let logits = match head {
        None => None,
        Some(HeadKind::Mlm) => {
            let t = linear(tape, p, x, "head.mlm.transform")?;
            let t = tape.gelu(t);
            let t = tape.layer_norm(t, get(p, "head.mlm.norm.gain")?, get(p, "head.mlm.norm.bias")?)?;
            let z = tape.matmul(t, get(p, "head.mlm.decoder.weight")?, true)?;
            Some(tape.add(z, get(p, "head.mlm.decoder.bias")?)?)
        }
        Some(HeadKind::Token { .. }) => Some(linear(tape, p, x, "head.token")?),
        Some(HeadKind::Sequence { .. }) => {
            let rows: Vec<usize> = (0..b).map(|i| batch.cls_row(i)).collect();
            let cls = tape.select_rows(x, &rows)?;
            let t = linear(tape, p, cls, "head.seq.dense")?;
            let t = tape.tanh(t);
            Some(linear(tape, p, t, "head.seq.out")?)
        }
        Some(HeadKind::Span) => Some(linear(tape, p, x, "head.span")?),
    };
    Ok(TraceVars { attn, hidden, logits })
}

/// Materialized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub attn: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub logits: Option<Tensor>,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

impl TraceVars {
    pub fn materialize(&self, tape: &Tape<'_>, batch: &Batch) -> ActivationTrace {
        ActivationTrace {
            attn: self.attn.iter().map(|&v| tape.value(v).clone()).collect(),
            hidden: self.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: self.logits.map(|v| tape.value(v).clone()),
            batch: batch.batch,
            len: batch.len,
            mask: batch.mask.clone(),
        }
    }
}

impl Model {
    /// Inference forward pass without dropout.
    pub fn forward(&self, batch: &Batch) -> Result<ActivationTrace> {
        let mut tape = Tape::new();
        let p = register_params(&mut tape, &self.params, |_| false);
        let vars = encode(&mut tape, &self.config, self.head, &p, batch, None)?;
        Ok(vars.materialize(&tape, batch))
    }

    /// Head logits only.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = register_params(&mut tape, &self.params, |_| false);
        let vars = encode(&mut tape, &self.config, self.head, &p, batch, None)?;
        let z = vars
            .logits
            .ok_or_else(|| Error::Contract("model has no head".into()))?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn single_token_attends_to_itself() {
        let m = Model::init(tiny(2), None, 1).unwrap();
        let tr = m.forward(&Batch::from_sequences(&[vec![7]], 6).unwrap()).unwrap();
        assert_eq!(tr.attn.len(), 2);
        assert_eq!(tr.hidden.len(), 3);
        for a in &tr.attn {
            assert!(a.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn first_hidden_is_embedding_sum() {
        let m = Model::init(tiny(1), None, 2).unwrap();
        let ids = vec![3, 9, 4];
        let tr = m.forward(&Batch::from_sequences(&[ids.clone()], 6).unwrap()).unwrap();
        let (tok, pos) = (&m.params["embeddings.token"], &m.params["embeddings.position"]);
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..8 {
                let want = tok.row(id)[j] + pos.row(i)[j];
                assert!((tr.hidden[0].row(i)[j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn padding_gets_no_attention_and_does_not_leak() {
        let m = Model::init(tiny(2), Some(HeadKind::Token { num_labels: 3 }), 3).unwrap();
        let batch = Batch::from_sequences(&[vec![5, 6, 7], vec![5, 6]], 6).unwrap();
        let tr = m.forward(&batch).unwrap();
        for a in &tr.attn {
            // second sequence, every head, every query row: key 2 is padding
            for hi in 0..2 {
                for i in 0..3 {
                    assert_eq!(a.data()[((2 + hi) * 3 + i) * 3 + 2], 0.0);
                }
            }
            for row in a.data().chunks(3) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        let alone = m.forward(&Batch::from_sequences(&[vec![5, 6]], 6).unwrap()).unwrap();
        for i in 0..2 {
            for (x, y) in tr.hidden[2].row(3 + i).iter().zip(alone.hidden[2].row(i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_id_is_input_error() {
        let m = Model::init(tiny(1), None, 0).unwrap();
        let err = m.forward(&Batch::from_sequences(&[vec![20]], 6).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = m.forward(&Batch { ids: vec![1; 7], mask: vec![true; 7], batch: 1, len: 7 }).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn head_output_shapes() {
        let batch = Batch::from_sequences(&[vec![5, 6, 7], vec![8]], 6).unwrap();
        for (head, shape) in [
            (HeadKind::Mlm, vec![6, 20]),
            (HeadKind::Token { num_labels: 4 }, vec![6, 4]),
            (HeadKind::Sequence { num_labels: 3 }, vec![2, 3]),
            (HeadKind::Span, vec![6, 2]),
        ] {
            let m = Model::init(tiny(1), Some(head), 4).unwrap();
            assert_eq!(m.logits(&batch).unwrap().shape(), shape.as_slice());
        }
    }
}
