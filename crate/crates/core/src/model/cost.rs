use super::{HeadKind, Model, ModelConfig};

/// Floating-point operations charged per element for the non-matmul ops:
/// softmax (max, subtract, exp, sum, divide), layer norm (mean, centre,
/// square, variance, normalize, scale, shift, rsqrt), GELU (erf expansion).
pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 8;
pub const GELU_FLOPS: u64 = 8;

/// Exact number of parameter elements.
pub fn count_params(model: &Model) -> u64 {
    model.params.values().map(|t| t.numel() as u64).sum()
}

impl ModelConfig {
    /// Elements in one encoder layer: four projections with biases, the
    /// feed-forward pair with biases, two layer norms.
    pub fn layer_param_count(&self) -> u64 {
        let d = self.hidden_dim as u64;
        let f = self.ffn_dim as u64;
        4 * (d * d + d) + 2 * d * f + f + d + 2 * 2 * d
    }

    pub fn param_count(&self, head: Option<HeadKind>) -> u64 {
        let d = self.hidden_dim as u64;
        let embeddings = (self.vocab_size + self.max_seq_len) as u64 * d;
        let head = head.map_or(0, |h| {
            h.param_shapes(self)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>() as u64)
                .sum()
        });
        embeddings + self.num_layers as u64 * self.layer_param_count() + head
    }
}

/// Forward-pass cost of a prediction head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadCost {
    None,
    /// Applied once per sequence (pooled classification).
    PerSequence { params: u64 },
    /// Applied at every token; also stands in for heavier structured heads
    /// of a given parameter size.
    PerToken { params: u64 },
}

impl HeadCost {
    pub fn of(head: Option<HeadKind>, config: &ModelConfig) -> HeadCost {
        let Some(h) = head else { return HeadCost::None };
        let params = h
            .param_shapes(config)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum();
        match h {
            HeadKind::Sequence { .. } => HeadCost::PerSequence { params },
            _ => HeadCost::PerToken { params },
        }
    }
}

/// Analytic forward FLOPs for one sequence of `seq_len` tokens, counting a
/// multiply–add as two operations.
pub fn count_flops(config: &ModelConfig, head: HeadCost, seq_len: usize) -> u64 {
    let l = seq_len as u64;
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    let h = config.num_heads as u64;
    let matmuls = 2 * (4 * l * d * d + 2 * l * l * d + 2 * l * d * f);
    let elementwise = SOFTMAX_FLOPS * h * l * l + LAYER_NORM_FLOPS * 2 * l * d + GELU_FLOPS * l * f;
    let embedding = l * d;
    let head = match head {
        HeadCost::None => 0,
        HeadCost::PerSequence { params } => 2 * params,
        HeadCost::PerToken { params } => 2 * params * l,
    };
    config.num_layers as u64 * (matmuls + elementwise) + embedding + head
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 1000,
            max_seq_len: 128,
            dropout: 0.1,
        }
    }

    #[test]
    fn base_scale_layer() {
        assert_eq!(base(1).layer_param_count(), 7_087_872);
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for (layers, head) in [(1, None), (2, Some(HeadKind::Mlm)), (3, Some(HeadKind::Span))] {
            let c = ModelConfig {
                num_layers: layers,
                hidden_dim: 12,
                num_heads: 3,
                ffn_dim: 20,
                vocab_size: 30,
                max_seq_len: 9,
                dropout: 0.0,
            };
            let m = Model::init(c.clone(), head, 0).unwrap();
            assert_eq!(count_params(&m), c.param_count(head));
        }
    }

    #[test]
    fn flop_ratios_follow_depth() {
        let r = |a: usize, b: usize| {
            count_flops(&base(a), HeadCost::None, 128) as f64 / count_flops(&base(b), HeadCost::None, 128) as f64
        };
        assert!((r(6, 12) - 0.5).abs() < 0.02);
        assert!((r(4, 12) - 1.0 / 3.0).abs() < 0.02);
        assert_eq!(r(12, 12), 1.0);
    }
}
