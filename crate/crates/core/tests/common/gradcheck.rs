//! Central finite-difference oracle for the tape.
//!
//! Every graph is written twice: once on the fp32 tape, once as a naive fp64
//! forward pass. The tape's gradients are compared against central
//! differences of the fp64 forward, so rounding in the fp32 forward does not
//! swamp the difference quotient.

use super::reference::{self as r, M};
use bistil::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-3;

pub type Builder = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>;
pub type Reference = Box<dyn Fn(&[M]) -> f64>;

pub struct Graph {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
    pub reference: Reference,
}

fn as_matrix(t: &Tensor) -> M {
    M::from_f32(t.rows(), t.cols(), t.data())
}

pub struct Check {
    /// Worst per-input `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)`.
    pub grad_err: f64,
    /// `|L_tape − L_ref| / max(1, |L_ref|)`.
    pub value_err: f64,
}

pub fn check(graph: &Graph) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = graph.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let l = (graph.build)(&mut tape, &vars);
    let value = tape.item(l) as f64;
    tape.backward(l).unwrap();

    let base: Vec<M> = graph.inputs.iter().map(as_matrix).collect();
    let ref_value = (graph.reference)(&base);
    let value_err = (value - ref_value).abs() / ref_value.abs().max(1.0);

    let mut grad_err = 0.0f64;
    for (i, (v, input)) in vars.iter().zip(&graph.inputs).enumerate() {
        let ad: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; input.numel()],
        };
        let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..input.numel() {
            let mut plus = base.clone();
            plus[i].d[j] += FD_STEP;
            let mut minus = base.clone();
            minus[i].d[j] -= FD_STEP;
            let fd = ((graph.reference)(&plus) - (graph.reference)(&minus)) / (2.0 * FD_STEP);
            diff += (ad[j] - fd).powi(2);
            na += ad[j] * ad[j];
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        if scale > 1e-6 {
            grad_err = grad_err.max(diff.sqrt() / scale);
        }
    }
    Check { grad_err, value_err }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Fixed random weights that project an output onto a scalar, so every
/// output element carries a distinct gradient.
fn projection(seed: u64, shape: &[usize]) -> Tensor {
    rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

fn project(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let w = projection(seed, &tape.value(out).shape().to_vec());
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn project_ref(out: &[f64], seed: u64, shape: &[usize]) -> f64 {
    projection(seed, shape).data().iter().zip(out).map(|(&w, &x)| w as f64 * x).sum()
}

/// Small random graphs covering every op kind, `per_kind` seeds each.
pub fn random_graphs(per_kind: u64) -> Vec<Graph> {
    let mut graphs = Vec::new();
    for seed in 0..per_kind {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = rng.random_range(2..5usize);
        let k = rng.random_range(2..6usize);
        let n = rng.random_range(2..5usize);
        let ps = 77 + seed;

        graphs.push(Graph {
            name: format!("matmul+add-bias/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, k], 1.0), rand_tensor(&mut rng, &[k, n], 1.0), rand_tensor(&mut rng, &[n], 1.0)],
            build: Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1], false).unwrap();
                let y = t.add(y, v[2]).unwrap();
                project(t, y, ps)
            }),
            reference: Box::new(move |x| {
                let y = r::add_row(&r::matmul(&x[0], &x[1]), &x[2].d);
                project_ref(&y.d, ps, &[m, n])
            }),
        });
        graphs.push(Graph {
            name: format!("matmul-transposed*mul/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, k], 1.0), rand_tensor(&mut rng, &[n, k], 1.0), rand_tensor(&mut rng, &[m, n], 1.0)],
            build: Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1], true).unwrap();
                let y = t.mul(y, v[2]).unwrap();
                project(t, y, ps)
            }),
            reference: Box::new(move |x| {
                let y = r::matmul(&x[0], &r::transpose(&x[1])).zip(&x[2], |a, b| a * b);
                project_ref(&y.d, ps, &[m, n])
            }),
        });
        graphs.push(Graph {
            name: format!("softmax/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, n + 1], 2.0)],
            build: Box::new(move |t, v| {
                let y = t.softmax(v[0]);
                project(t, y, ps)
            }),
            reference: Box::new(move |x| project_ref(&r::softmax(&x[0]).d, ps, &[m, n + 1])),
        });
        graphs.push(Graph {
            name: format!("layernorm/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, k + 2], 2.0), rand_tensor(&mut rng, &[k + 2], 1.5), rand_tensor(&mut rng, &[k + 2], 1.0)],
            build: Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                project(t, y, ps)
            }),
            reference: Box::new(move |x| {
                let y = r::layer_norm(&x[0], &x[1].d, &x[2].d, 1e-12);
                project_ref(&y.d, ps, &[m, k + 2])
            }),
        });
        let keep: Vec<bool> = (0..m * n).map(|i| i % 4 != 1).collect();
        let keep_ref = keep.clone();
        graphs.push(Graph {
            name: format!("gelu+tanh+scale+dropout+reshape/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, n], 2.0)],
            build: Box::new(move |t, v| {
                let g = t.gelu(v[0]);
                let h = t.tanh(g);
                let s = t.scale(h, 1.7);
                let d = t.dropout(s, &keep, 0.25).unwrap();
                let r = t.reshape(d, &[m * n]).unwrap();
                project(t, r, ps)
            }),
            reference: Box::new(move |x| {
                let y: Vec<f64> = x[0]
                    .d
                    .iter()
                    .zip(&keep_ref)
                    .map(|(&v, &kp)| if kp { 1.7 * r::gelu(v).tanh() / 0.75 } else { 0.0 })
                    .collect();
                project_ref(&y, ps, &[m * n])
            }),
        });
        let vocab = 6;
        let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..vocab)).collect();
        let ids_ref = ids.clone();
        graphs.push(Graph {
            name: format!("embed+select_rows+select_col/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[vocab, k], 1.0)],
            build: Box::new(move |t, v| {
                let e = t.embed(v[0], &ids).unwrap();
                let rows = t.select_rows(e, &[0, 1, 1]).unwrap();
                let c = t.select_col(rows, 0).unwrap();
                let a = project(t, rows, ps);
                let b = project(t, c, ps + 1);
                t.combine(&[(a, 1.0), (b, 0.5)]).unwrap()
            }),
            reference: Box::new(move |x| {
                let picked: Vec<f64> = [0usize, 1, 1]
                    .iter()
                    .flat_map(|&i| (0..k).map(|j| x[0].at(ids_ref[i], j)).collect::<Vec<_>>())
                    .collect();
                let col: Vec<f64> = picked.chunks(k).map(|c| c[0]).collect();
                project_ref(&picked, ps, &[3, k]) + 0.5 * project_ref(&col, ps + 1, &[3])
            }),
        });
        let mask: Vec<f32> = (0..m * n).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect();
        let mask_ref: Vec<f64> = mask.iter().map(|&w| w as f64).collect();
        graphs.push(Graph {
            name: format!("mse/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, n], 1.0), rand_tensor(&mut rng, &[m, n], 1.0)],
            build: Box::new(move |t, v| {
                let a = t.mse(v[0], v[1], None).unwrap();
                let b = t.mse(v[0], v[1], Some(mask.clone())).unwrap();
                t.combine(&[(a, 1.0), (b, 2.0)]).unwrap()
            }),
            reference: Box::new(move |x| r::mse(&x[0], &x[1], None) + 2.0 * r::mse(&x[0], &x[1], Some(&mask_ref))),
        });
        let labels: Vec<i64> = (0..m).map(|i| if i == 1 { -100 } else { rng.random_range(0..n as i64) }).collect();
        let labels_ref = labels.clone();
        graphs.push(Graph {
            name: format!("soft_cross_entropy+cross_entropy/{seed}"),
            inputs: vec![rand_tensor(&mut rng, &[m, n], 2.0), rand_tensor(&mut rng, &[m, n], 2.0)],
            build: Box::new(move |t, v| {
                let p = t.softmax(v[1]);
                let a = t.soft_cross_entropy(v[0], p, None).unwrap();
                let b = t.cross_entropy(v[0], &labels).unwrap();
                t.combine(&[(a, 1.0), (b, 0.7)]).unwrap()
            }),
            reference: Box::new(move |x| {
                r::soft_cross_entropy(&x[0], &r::softmax(&x[1])) + 0.7 * r::cross_entropy(&x[0], &labels_ref)
            }),
        });
        // scores, key masking, softmax, apply
        let (batch, len, heads, hd) = (2usize, rng.random_range(2..4usize), 2usize, 2usize);
        let d = heads * hd;
        let mut bias = Tensor::zeros(&[batch, heads, len, len]);
        for h in 0..heads {
            for i in 0..len {
                bias.data_mut()[((heads + h) * len + i) * len + len - 1] = -1e4;
            }
        }
        let bias_ref: Vec<f64> = bias.data().iter().map(|&b| b as f64).collect();
        graphs.push(Graph {
            name: format!("attention-block/{seed}"),
            inputs: vec![
                rand_tensor(&mut rng, &[batch * len, d], 1.0),
                rand_tensor(&mut rng, &[batch * len, d], 1.0),
                rand_tensor(&mut rng, &[batch * len, d], 1.0),
            ],
            build: Box::new(move |t, v| {
                let s = t.attn_scores(v[0], v[1], batch, len, heads).unwrap();
                let s = t.add_const(s, &bias).unwrap();
                let p = t.softmax(s);
                let o = t.attn_apply(p, v[2], batch, len, heads).unwrap();
                let a = project(t, o, ps);
                let b = project(t, p, ps + 3);
                t.combine(&[(a, 1.0), (b, 1.0)]).unwrap()
            }),
            reference: Box::new(move |x| {
                let (p, o) = r::attention(&x[0], &x[1], &x[2], batch, len, heads, &bias_ref);
                project_ref(&o.d, ps, &[batch * len, d]) + project_ref(&p, ps + 3, &[batch, heads, len, len])
            }),
        });
        // post-LN residual feed-forward block
        graphs.push(Graph {
            name: format!("residual-ffn-block/{seed}"),
            inputs: vec![
                rand_tensor(&mut rng, &[m, 4], 1.0),
                rand_tensor(&mut rng, &[4, 6], 0.5),
                rand_tensor(&mut rng, &[6], 0.1),
                rand_tensor(&mut rng, &[6, 4], 0.5),
                rand_tensor(&mut rng, &[4], 1.0),
            ],
            build: Box::new(move |t, v| {
                let h = t.matmul(v[0], v[1], false).unwrap();
                let h = t.add(h, v[2]).unwrap();
                let h = t.gelu(h);
                let o = t.matmul(h, v[3], false).unwrap();
                let res = t.add(o, v[0]).unwrap();
                let zero = t.constant(Tensor::zeros(&[4]));
                let y = t.layer_norm(res, v[4], zero).unwrap();
                let target = t.constant(Tensor::filled(&[m, 4], 0.3));
                t.mse(y, target, None).unwrap()
            }),
            reference: Box::new(move |x| {
                let h = r::add_row(&r::matmul(&x[0], &x[1]), &x[2].d).map(r::gelu);
                let res = r::matmul(&h, &x[3]).zip(&x[0], |a, b| a + b);
                let y = r::layer_norm(&res, &x[4].d, &[0.0; 4], 1e-12);
                r::mse(&y, &M::new(m, 4, vec![0.3; m * 4]), None)
            }),
        });
    }
    graphs
}
