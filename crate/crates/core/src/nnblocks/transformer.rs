use super::attention::{AttentionBias, MultiHeadAttention};
use super::layers::{LayerNorm, Linear};
use super::{join, Builder};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))` with a
/// GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize, heads: usize, ff_dim: usize) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(b, &join(prefix, "norm1"), dim),
            attn: MultiHeadAttention::new(b, &join(prefix, "attn"), dim, heads),
            norm2: LayerNorm::new(b, &join(prefix, "norm2"), dim),
            ff1: Linear::new(b, &join(prefix, "ff1"), dim, ff_dim, true),
            ff2: Linear::new(b, &join(prefix, "ff2"), ff_dim, dim, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        bias: Option<&AttentionBias>,
    ) -> Var {
        let h = self.norm1.forward(g, p, x);
        let a = self.attn.forward(g, p, h, bias);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, p, x);
        let h = self.ff1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerStack {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(b, &join(prefix, &i.to_string()), dim, heads, ff_dim))
            .collect();
        TransformerStack { blocks, dim, heads }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        mut x: Var,
        bias: Option<&AttentionBias>,
    ) -> Var {
        for block in &self.blocks {
            x = block.forward(g, p, x, bias);
        }
        x
    }
}
