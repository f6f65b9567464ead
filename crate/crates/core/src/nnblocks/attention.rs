use super::layers::Linear;
use super::{join, Builder};
use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};

/// Additive attention bias decaying linearly with frame distance:
/// `bias_h[i][j] = -slope_h·|i-j|`, optionally masked to `-∞` beyond a
/// symmetric window.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    pub slopes: Vec<f64>,
    pub len: usize,
    pub window: Option<usize>,
    pub bias: Vec<Mat>,
}

impl AttentionBias {
    pub fn heads(&self) -> usize {
        self.slopes.len()
    }

    /// Restrict attention to `|i-j| <= window`.
    pub fn windowed(mut self, window: usize) -> Self {
        for b in &mut self.bias {
            for ((i, j), v) in b.indexed_iter_mut() {
                if i.abs_diff(j) > window {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        self.window = Some(window);
        self
    }
}

/// Bidirectional linear-distance bias with slopes `2^(-8h/heads)`, h = 1..=heads.
pub fn build_attention_bias(len: usize, heads: usize) -> AttentionBias {
    assert!(heads >= 1, "at least one head");
    let slopes: Vec<f64> = (1..=heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64))
        .collect();
    let bias = slopes
        .iter()
        .map(|&s| Mat::from_shape_fn((len, len), |(i, j)| -s * i.abs_diff(j) as f64))
        .collect();
    AttentionBias {
        slopes,
        len,
        window: None,
        bias,
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, heads: usize) -> Self {
        assert!(
            dim % heads == 0,
            "width {dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            q: Linear::new(b, &join(prefix, "q"), dim, dim, true),
            k: Linear::new(b, &join(prefix, "k"), dim, dim, true),
            v: Linear::new(b, &join(prefix, "v"), dim, dim, true),
            out: Linear::new(b, &join(prefix, "out"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        bias: Option<&AttentionBias>,
    ) -> Var {
        let t = g.shape(x).0;
        if let Some(b) = bias {
            assert_eq!(b.heads(), self.heads, "bias head count");
            assert_eq!(b.len, t, "bias length");
        }
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(b) = bias {
                let c = g.constant(b.bias[h].clone());
                scores = g.add(scores, c);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.out.forward(g, p, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_head_bias_formula() {
        let b = build_attention_bias(3, 1);
        let s = 2f64.powi(-8);
        let expect = array![[0.0, -s, -2.0 * s], [-s, 0.0, -s], [-2.0 * s, -s, 0.0]];
        assert_eq!(b.bias[0], expect);
    }

    #[test]
    fn eight_head_slopes() {
        let b = build_attention_bias(4, 8);
        for (h, s) in b.slopes.iter().enumerate() {
            assert_eq!(*s, 2f64.powi(-(h as i32 + 1)));
        }
    }

    #[test]
    fn symmetric_with_zero_diagonal() {
        let b = build_attention_bias(9, 4);
        for m in &b.bias {
            for i in 0..9 {
                assert_eq!(m[[i, i]], 0.0);
                for j in 0..9 {
                    assert_eq!(m[[i, j]], m[[j, i]]);
                }
            }
        }
    }

    #[test]
    fn softmax_ignores_row_constant_shift() {
        let b = build_attention_bias(5, 2);
        let mut g = Graph::no_grad();
        let base = g.constant(b.bias[1].clone());
        let mut shifted = b.bias[1].clone();
        for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
            row += 3.5 * i as f64 - 1.0;
        }
        let shifted = g.constant(shifted);
        let a = g.softmax_rows(base);
        let c = g.softmax_rows(shifted);
        for (x, y) in g.value(a).iter().zip(g.value(c).iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn window_masks_far_frames() {
        let b = build_attention_bias(6, 1).windowed(2);
        assert_eq!(b.bias[0][[0, 3]], f64::NEG_INFINITY);
        assert!(b.bias[0][[0, 2]].is_finite());
    }
}
