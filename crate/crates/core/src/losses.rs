//! Training objectives.
//!
//! Every loss has a value form on plain matrices and a `*_var` form that
//! records the same computation on a [`Graph`] for training. Frame-level
//! losses sum squared errors over channels and average over frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pos: f64,
    pub mot: f64,
    pub cls: f64,
    pub dis: f64,
    /// Weight of the auxiliary pairwise margin loss (off by default).
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pos: 1.0,
            mot: 0.5,
            cls: 0.1,
            dis: 0.01,
            margin: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pos, self.mot, self.cls, self.dis, self.margin];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pos: f64,
    pub mot: f64,
    pub cls: f64,
    pub dis: f64,
    pub margin: f64,
}

/// `λ1·L_pos + λ2·L_mot + λ3·L_cls + λ4·L_dis (+ λ_m·L_margin)`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.pos * c.pos + w.mot * c.mot + w.cls * c.cls + w.dis * c.dis + w.margin * c.margin
}

/// Sign convention of the pooled-cosine disentanglement loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisOrientation {
    /// `1 - mean[cos(C, Ĉ) - cos(E, Ê)]`: pulls content together and pushes
    /// emotion apart.
    #[default]
    Corrected,
    /// `1 - mean[cos(E, Ê) - cos(C, Ĉ)]`.
    Literal,
}

impl FromStr for DisOrientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(DisOrientation::Corrected),
            "literal" => Ok(DisOrientation::Literal),
            other => Err(Error::Config(format!("unknown orientation {other:?}"))),
        }
    }
}

impl fmt::Display for DisOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisOrientation::Corrected => "corrected",
            DisOrientation::Literal => "literal",
        })
    }
}

/// Clip-pooled features of content-matched (neutral, emotional) pairs; row
/// `i` of every matrix belongs to pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPairs {
    pub content_neutral: Mat,
    pub content_emotional: Mat,
    pub emotion_neutral: Mat,
    pub emotion_emotional: Mat,
}

impl PooledPairs {
    fn validate(&self) -> Result<()> {
        let n = self.content_neutral.nrows();
        let shapes = [
            self.content_neutral.dim(),
            self.content_emotional.dim(),
            self.emotion_neutral.dim(),
            self.emotion_emotional.dim(),
        ];
        if n == 0 || shapes[1] != shapes[0] || shapes[3] != shapes[2] || shapes[2].0 != n {
            return Err(Error::BadPairing(format!(
                "unmatched pair shapes {shapes:?}"
            )));
        }
        Ok(())
    }

    fn vars(&self, g: &mut Graph) -> [Var; 4] {
        [
            g.constant(self.content_neutral.clone()),
            g.constant(self.content_emotional.clone()),
            g.constant(self.emotion_neutral.clone()),
            g.constant(self.emotion_emotional.clone()),
        ]
    }
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::BadDims(format!(
            "shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::no_grad();
    let v = build(&mut g);
    g.scalar(v)
}

/// Per-row sums as an N×1 column.
fn row_sums(g: &mut Graph, a: Var) -> Var {
    let d = g.shape(a).1;
    let ones = g.constant(Mat::ones((d, 1)));
    g.matmul(a, ones)
}

fn row_dot(g: &mut Graph, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    row_sums(g, ab)
}

fn row_norm(g: &mut Graph, a: Var) -> Var {
    let sq = row_dot(g, a, a);
    g.sqrt(sq)
}

/// Row-wise cosine similarity, N×1.
fn row_cos(g: &mut Graph, a: Var, b: Var) -> Var {
    let dot = row_dot(g, a, b);
    let na = row_norm(g, a);
    let nb = row_norm(g, b);
    let den = g.mul(na, nb);
    let inv = g.recip(den);
    g.mul(dot, inv)
}

/// Mean over frames of the squared row-L2 error.
pub fn position_loss_var(g: &mut Graph, pred: Var, gt: Var) -> Var {
    let t = g.shape(pred).0 as f64;
    let d = g.sub(pred, gt);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / t)
}

pub fn position_loss(pred: &Mat, gt: &Mat) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.nrows() == 0 {
        return Err(Error::EmptyInput("no frames".into()));
    }
    Ok(eval(|g| {
        let p = g.constant(pred.clone());
        let t = g.constant(gt.clone());
        position_loss_var(g, p, t)
    }))
}

/// (T-1)×T first-difference operator.
fn difference_matrix(t: usize) -> Mat {
    let mut d = Mat::zeros((t - 1, t));
    for i in 0..t - 1 {
        d[[i, i]] = -1.0;
        d[[i, i + 1]] = 1.0;
    }
    d
}

/// Mean over t of `‖(p_{t+1} - p_t) - (g_{t+1} - g_t)‖²`.
pub fn motion_loss_var(g: &mut Graph, pred: Var, gt: Var) -> Var {
    let t = g.shape(pred).0;
    let diff = g.sub(pred, gt);
    let dd = g.interp_rows(diff, difference_matrix(t));
    let sq = g.square(dd);
    let s = g.sum(sq);
    g.scale(s, 1.0 / (t - 1) as f64)
}

pub fn motion_loss(pred: &Mat, gt: &Mat) -> Result<f64> {
    same_shape(pred, gt)?;
    if pred.nrows() < 2 {
        return Err(Error::TooShort(
            "motion loss needs at least two frames".into(),
        ));
    }
    Ok(eval(|g| {
        let p = g.constant(pred.clone());
        let t = g.constant(gt.clone());
        motion_loss_var(g, p, t)
    }))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Mat> {
    let mut m = Mat::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::BadLabel { label: l, classes });
        }
        m[[i, l]] = 1.0;
    }
    Ok(m)
}

/// Mean softmax cross-entropy of N×M logits.
pub fn classification_loss_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, m) = g.shape(logits);
    if n != labels.len() || n == 0 {
        return Err(Error::BadDims(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    let target = g.constant(one_hot(labels, m)?);
    let ls = g.log_softmax_rows(logits);
    let picked = g.mul(ls, target);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

pub fn classification_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let l = g.constant(logits.clone());
    let v = classification_loss_var(&mut g, l, labels)?;
    Ok(g.scalar(v))
}

/// `mean_i ‖zc_i - ẑc_i‖₂ + max(0, δ - ‖ze_i - ẑe_i‖₂)` with `delta` a 1×1 var.
pub fn pairwise_margin_loss_var(g: &mut Graph, zc: [Var; 2], ze: [Var; 2], delta: Var) -> Var {
    let n = g.shape(zc[0]).0;
    let dc = g.sub(zc[0], zc[1]);
    let content = row_norm(g, dc);
    let de = g.sub(ze[0], ze[1]);
    let emo = row_norm(g, de);
    let margin = g.repeat_rows(delta, n);
    let gap = g.sub(margin, emo);
    let hinge = g.relu(gap);
    let per_pair = g.add(content, hinge);
    g.mean(per_pair)
}

pub fn pairwise_margin_loss(pairs: &PooledPairs, delta: f64) -> Result<f64> {
    pairs.validate()?;
    Ok(eval(|g| {
        let [cn, ce, en, ee] = pairs.vars(g);
        let d = g.constant(Mat::from_elem((1, 1), delta.max(0.0)));
        pairwise_margin_loss_var(g, [cn, ce], [en, ee], d)
    }))
}

pub fn disentanglement_loss_var(
    g: &mut Graph,
    content: [Var; 2],
    emotion: [Var; 2],
    orientation: DisOrientation,
) -> Var {
    let cc = row_cos(g, content[0], content[1]);
    let ce = row_cos(g, emotion[0], emotion[1]);
    let gap = match orientation {
        DisOrientation::Corrected => g.sub(cc, ce),
        DisOrientation::Literal => g.sub(ce, cc),
    };
    let m = g.mean(gap);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

pub fn disentanglement_loss(pairs: &PooledPairs, orientation: DisOrientation) -> Result<f64> {
    pairs.validate()?;
    for m in [
        &pairs.content_neutral,
        &pairs.content_emotional,
        &pairs.emotion_neutral,
        &pairs.emotion_emotional,
    ] {
        if m.rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::ZeroVector("pooled pair feature".into()));
        }
    }
    Ok(eval(|g| {
        let [cn, ce, en, ee] = pairs.vars(g);
        disentanglement_loss_var(g, [cn, ce], [en, ee], orientation)
    }))
}
