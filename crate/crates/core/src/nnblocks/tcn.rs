use super::{join, Builder};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore};
use crate::tape::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcnLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Stack of strided 1-D convolutions over a raw waveform, each followed by
/// GELU. Weights are stored `(kernel·c_in) × c_out`, matching the window
/// layout produced by [`Graph::im2col`].
#[derive(Clone, Debug)]
pub struct Tcn {
    pub specs: Vec<TcnLayerSpec>,
    pub weights: Vec<String>,
    pub biases: Vec<String>,
}

impl Tcn {
    pub fn new(b: &mut Builder, prefix: &str, specs: &[TcnLayerSpec]) -> Self {
        assert!(!specs.is_empty(), "empty TCN");
        let mut c_in = 1;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            let fan_in = s.kernel * c_in;
            let bound = (3.0 / fan_in as f64).sqrt();
            let w = uniform(b.rng(), fan_in, s.channels, bound);
            weights.push(b.add(&join(prefix, &format!("{i}.weight")), w));
            biases.push(b.add(
                &join(prefix, &format!("{i}.bias")),
                Mat::zeros((1, s.channels)),
            ));
            c_in = s.channels;
        }
        Tcn {
            specs: specs.to_vec(),
            weights,
            biases,
        }
    }

    /// Input samples needed for one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for s in &self.specs {
            rf += (s.kernel - 1) * jump;
            jump *= s.stride;
        }
        rf
    }

    /// Input samples between consecutive output frames.
    pub fn hop(&self) -> usize {
        self.specs.iter().map(|s| s.stride).product()
    }

    pub fn out_dim(&self) -> usize {
        self.specs.last().map(|s| s.channels).unwrap_or(0)
    }

    /// Output frame count for `len` input samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        let rf = self.receptive_field();
        (len >= rf).then(|| (len - rf) / self.hop() + 1)
    }

    /// `x` is a `len × 1` waveform column.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for ((s, w), b) in self.specs.iter().zip(&self.weights).zip(&self.biases) {
            let cols = g.im2col(h, s.kernel, s.stride);
            let w = g.param(p, w);
            let y = g.matmul(cols, w);
            let b = g.param(p, b);
            let y = g.add_row(y, b);
            h = g.gelu(y);
        }
        h
    }
}

/// Evaluate a TCN on a waveform, returning `F × channels` features.
pub fn tcn_forward(waveform: &[f64], tcn: &Tcn, params: &ParamStore) -> Result<Mat> {
    let rf = tcn.receptive_field();
    if waveform.len() < rf {
        return Err(Error::TooShort(format!(
            "waveform of {} samples is shorter than the receptive field {rf}",
            waveform.len()
        )));
    }
    let mut g = Graph::no_grad();
    let x =
        g.constant(Mat::from_shape_vec((waveform.len(), 1), waveform.to_vec()).expect("column"));
    let y = tcn.forward(&mut g, params, x);
    Ok(g.value(y).clone())
}
