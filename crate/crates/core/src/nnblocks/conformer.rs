//! Macaron-style Conformer block whose feed-forward modules are KAN layers:
//!
//! ```text
//! x = x + ½·KanFF(x)
//! x = x + MHSA(LN(x), bias)
//! x = x + Conv(x)
//! x = x + ½·KanFF(x)
//! y = LN(x)
//! ```

use super::attention::{AttentionBias, MultiHeadAttention};
use super::kan::KanLayer;
use super::layers::{DepthwiseConv, LayerNorm, Linear};
use super::{join, Builder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};

pub const CONV_KERNEL: usize = 7;

/// `KAN(LN(x))`, width preserving.
#[derive(Clone, Debug)]
pub struct KanFeedForward {
    pub norm: LayerNorm,
    pub kan: KanLayer,
}

impl KanFeedForward {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, grid: usize, order: usize) -> Self {
        KanFeedForward {
            norm: LayerNorm::new(b, &join(prefix, "norm"), dim),
            kan: KanLayer::new(b, &join(prefix, "kan"), dim, dim, grid, order),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, p, x);
        self.kan.forward(g, p, h)
    }
}

/// `LN → pointwise d→2d → GLU → depthwise conv → SiLU → pointwise d→d`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw1: Linear,
    pub dw: DepthwiseConv,
    pub pw2: Linear,
    pub dim: usize,
}

impl ConvModule {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, kernel: usize) -> Self {
        ConvModule {
            norm: LayerNorm::new(b, &join(prefix, "norm"), dim),
            pw1: Linear::new(b, &join(prefix, "pw1"), dim, 2 * dim, true),
            dw: DepthwiseConv::new(b, &join(prefix, "dw"), dim, kernel),
            pw2: Linear::new(b, &join(prefix, "pw2"), dim, dim, true),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, p, x);
        let h = self.pw1.forward(g, p, h);
        let a = g.slice_cols(h, 0, self.dim);
        let gate = g.slice_cols(h, self.dim, self.dim);
        let gate = g.sigmoid(gate);
        let h = g.mul(a, gate);
        let h = self.dw.forward(g, p, h);
        let h = g.silu(h);
        self.pw2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: KanFeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: KanFeedForward,
    pub out_norm: LayerNorm,
    pub dim: usize,
}

impl ConformerBlock {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, heads: usize) -> Self {
        ConformerBlock {
            ff1: KanFeedForward::new(b, &join(prefix, "ff1"), dim, 5, 3),
            attn_norm: LayerNorm::new(b, &join(prefix, "attn_norm"), dim),
            attn: MultiHeadAttention::new(b, &join(prefix, "attn"), dim, heads),
            conv: ConvModule::new(b, &join(prefix, "conv"), dim, CONV_KERNEL),
            ff2: KanFeedForward::new(b, &join(prefix, "ff2"), dim, 5, 3),
            out_norm: LayerNorm::new(b, &join(prefix, "out_norm"), dim),
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        bias: Option<&AttentionBias>,
    ) -> Result<Var> {
        let h = self.ff1.forward(g, p, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);
        let h = self.attn_norm.forward(g, p, x);
        let h = self.attn.forward(g, p, h, bias);
        let x = g.add(x, h);
        let h = self.conv.forward(g, p, x);
        let x = g.add(x, h);
        let h = self.ff2.forward(g, p, x);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);
        let y = self.out_norm.forward(g, p, x);
        if g.value(y).iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::Numerical("non-finite conformer activation".into()))
        }
    }

    /// Evaluation-mode forward pass on a plain matrix.
    pub fn apply(&self, p: &ParamStore, x: &Mat, bias: Option<&AttentionBias>) -> Result<Mat> {
        if x.ncols() != self.dim {
            return Err(Error::BadDims(format!(
                "conformer width {} given {} columns",
                self.dim,
                x.ncols()
            )));
        }
        let mut g = Graph::no_grad();
        let x = g.constant(x.clone());
        let y = self.forward(&mut g, p, x, bias)?;
        Ok(g.value(y).clone())
    }

    /// Names of the parameters whose zeroing removes every residual branch.
    pub fn residual_branch_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        for ff in [&self.ff1, &self.ff2] {
            names.push(ff.kan.base_weight.clone());
            names.push(ff.kan.coeffs.clone());
        }
        names.push(self.attn.out.weight.clone());
        names.extend(self.attn.out.bias.clone());
        names.push(self.conv.pw2.weight.clone());
        names.extend(self.conv.pw2.bias.clone());
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nnblocks::build_attention_bias;

    fn input(t: usize, d: usize) -> Mat {
        Mat::from_shape_fn((t, d), |(i, j)| ((i * d + j) as f64 * 0.61).sin() * 1.3)
    }

    #[test]
    fn shape_is_preserved() {
        let mut b = Builder::new(2);
        let block = ConformerBlock::new(&mut b, "c", 64, 4);
        let store = b.finish();
        let bias = build_attention_bias(12, 4);
        let y = block.apply(&store, &input(12, 64), Some(&bias)).unwrap();
        assert_eq!(y.dim(), (12, 64));
    }

    #[test]
    fn zeroed_branches_give_layer_norm() {
        let mut b = Builder::new(3);
        let block = ConformerBlock::new(&mut b, "c", 8, 2);
        let mut store = b.finish();
        for name in block.residual_branch_params() {
            let z = Mat::zeros(store.value(&name).dim());
            store.set(&name, z);
        }
        let x = input(6, 8);
        let y = block.apply(&store, &x, None).unwrap();
        for (row_x, row_y) in x.rows().into_iter().zip(y.rows()) {
            let mean = row_x.mean().unwrap();
            let var = row_x.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            for (a, b) in row_x.iter().zip(row_y.iter()) {
                let expect = (a - mean) / (var + 1e-5).sqrt();
                assert!((b - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut b = Builder::new(4);
        let block = ConformerBlock::new(&mut b, "c", 4, 2);
        let store = b.finish();
        assert!(store.num_scalars() < 1000);
        let x0 = input(5, 4).mapv(|v| v * 0.5);
        let bias = build_attention_bias(5, 2);
        let target = Mat::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64).cos());
        let errs = gradcheck::check_params(&store, gradcheck::DEFAULT_STEP, |g, p| {
            let x = g.constant(x0.clone());
            let y = block.forward(g, p, x, Some(&bias)).unwrap();
            let t = g.constant(target.clone());
            let y = g.mul(y, t);
            let y = g.sum(y);
            g.square(y)
        });
        for (name, e) in errs {
            assert!(e < 1e-3, "{name}: {e}");
        }
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let mut b = Builder::new(5);
        let block = ConformerBlock::new(&mut b, "c", 4, 1);
        let store = b.finish();
        let mut x = input(3, 4);
        x[[1, 2]] = f64::NAN;
        assert!(matches!(
            block.apply(&store, &x, None),
            Err(Error::Numerical(_))
        ));
    }
}
