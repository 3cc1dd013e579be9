//! Naive fp64 reference implementations used as test oracles.

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> M {
        assert_eq!(r * c, d.len());
        M { r, c, d }
    }

    pub fn from_f32(r: usize, c: usize, d: &[f32]) -> M {
        M::new(r, c, d.iter().map(|&x| x as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.d.iter().sum()
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut out = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            for k in 0..a.c {
                out[i * b.c + j] += a.at(i, k) * b.at(k, j);
            }
        }
    }
    M::new(a.r, b.c, out)
}

pub fn transpose(a: &M) -> M {
    let mut out = vec![0.0; a.r * a.c];
    for i in 0..a.r {
        for j in 0..a.c {
            out[j * a.r + i] = a.at(i, j);
        }
    }
    M::new(a.c, a.r, out)
}

pub fn add_row(a: &M, bias: &[f64]) -> M {
    assert_eq!(a.c, bias.len());
    M::new(a.r, a.c, a.d.iter().enumerate().map(|(i, &x)| x + bias[i % a.c]).collect())
}

pub fn softmax(a: &M) -> M {
    let mut out = a.d.clone();
    for row in out.chunks_mut(a.c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
    }
    M::new(a.r, a.c, out)
}

pub fn log_softmax(a: &M) -> M {
    softmax(a).map(f64::ln)
}

pub fn layer_norm(a: &M, gain: &[f64], bias: &[f64], eps: f64) -> M {
    let mut out = a.d.clone();
    for row in out.chunks_mut(a.c) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - mean) / (var + eps).sqrt() * gain[j] + bias[j];
        }
    }
    M::new(a.r, a.c, out)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn mse(a: &M, b: &M, w: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..a.d.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        total += wi * (a.d[i] - b.d[i]).powi(2);
        count += wi;
    }
    if count > 0.0 { total / count } else { 0.0 }
}

/// `−Σ p·log softmax(z)` averaged over rows.
pub fn soft_cross_entropy(z: &M, p: &M) -> f64 {
    let lp = log_softmax(z);
    -lp.zip(p, |l, q| l * q).sum() / z.r as f64
}

pub fn cross_entropy(z: &M, labels: &[i64]) -> f64 {
    let lp = log_softmax(z);
    let kept: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= 0)
        .map(|(r, &l)| (r, l as usize))
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    -kept.iter().map(|&(r, l)| lp.at(r, l)).sum::<f64>() / kept.len() as f64
}

/// Multi-head attention probabilities and output for `[batch*len, d]` inputs.
/// Returns per-(batch, head) probability blocks in `[batch, heads, len, len]`
/// order and the concatenated output.
pub fn attention(q: &M, k: &M, v: &M, batch: usize, len: usize, heads: usize, bias: &[f64]) -> (Vec<f64>, M) {
    let dh = q.c / heads;
    let mut probs = Vec::with_capacity(batch * heads * len * len);
    let mut out = vec![0.0; q.r * q.c];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..len {
                let mut s: Vec<f64> = (0..len)
                    .map(|j| {
                        let dot: f64 = (0..dh)
                            .map(|x| q.at(b * len + i, h * dh + x) * k.at(b * len + j, h * dh + x))
                            .sum();
                        dot / (dh as f64).sqrt() + bias[((b * heads + h) * len + i) * len + j]
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                s.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
                for x in 0..dh {
                    out[(b * len + i) * q.c + h * dh + x] =
                        (0..len).map(|j| s[j] * v.at(b * len + j, h * dh + x)).sum();
                }
                probs.extend(s);
            }
        }
    }
    (probs, M::new(q.r, q.c, out))
}
