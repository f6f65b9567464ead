use super::{join, Builder};
use crate::params::{uniform, xavier, ParamStore};
use crate::tape::{Graph, Mat, Var};

/// `y = x·W + b` with W stored in×out.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = xavier(b.rng(), in_dim, out_dim);
        let weight = b.add(&join(prefix, "weight"), w);
        let bias = bias.then(|| b.add(&join(prefix, "bias"), Mat::zeros((1, out_dim))));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, &self.weight);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(p, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: b.add(&join(prefix, "gain"), Mat::ones((1, dim))),
            bias: b.add(&join(prefix, "bias"), Mat::zeros((1, dim))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gain = g.param(p, &self.gain);
        let bias = g.param(p, &self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Per-channel temporal convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: String,
    pub bias: String,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new(b: &mut Builder, prefix: &str, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let bound = (3.0 / kernel as f64).sqrt();
        let w = uniform(b.rng(), kernel, channels, bound);
        DepthwiseConv {
            weight: b.add(&join(prefix, "weight"), w),
            bias: b.add(&join(prefix, "bias"), Mat::zeros((1, channels))),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, &self.weight);
        let y = g.depthwise_conv(x, w);
        let b = g.param(p, &self.bias);
        g.add_row(y, b)
    }
}
