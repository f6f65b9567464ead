//! Partitioned style-guided decoder and the 52-channel blendshape container.
//!
//! Two decoders share one style projection (768 → 256). The lower-face
//! decoder sees content and style, the upper-face decoder sees emotion and
//! style; each fuses its two inputs by concatenation and a linear map, adds a
//! periodic positional encoding, runs distance-biased self-attention blocks
//! and ends in a sigmoid head.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esmm::ENTRY_DIM;
use crate::nnblocks::{
    build_attention_bias, periodic_positional_encoding, Builder, LayerNorm, Linear,
    TransformerStack,
};
use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};

pub const NUM_CHANNELS: usize = 52;
pub const STYLE_DIM: usize = 256;
pub const FPS: u32 = 30;

/// ARKit blendshape names in their conventional order.
pub const ARKIT_NAMES: [&str; NUM_CHANNELS] = [
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "eyeBlinkRight",
    "eyeLookDownRight",
    "eyeLookInRight",
    "eyeLookOutRight",
    "eyeLookUpRight",
    "eyeSquintRight",
    "eyeWideRight",
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthLeft",
    "mouthRight",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
    "tongueOut",
];

/// Index of a channel by name.
pub fn channel_index(name: &str) -> Option<usize> {
    ARKIT_NAMES.iter().position(|n| *n == name)
}

/// Indices of every channel whose name starts with `prefix`.
pub fn channels_with_prefix(prefix: &str) -> Vec<usize> {
    (0..NUM_CHANNELS)
        .filter(|&i| ARKIT_NAMES[i].starts_with(prefix))
        .collect()
}

/// Split of the 52 channels into lower-face and upper-face groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

impl Default for Partition {
    /// Upper: brows, eyes and cheekPuff (20). Lower: everything else (32).
    fn default() -> Self {
        let upper_of = |n: &str| n.starts_with("brow") || n.starts_with("eye") || n == "cheekPuff";
        let (upper, lower): (Vec<usize>, Vec<usize>) =
            (0..NUM_CHANNELS).partition(|&i| upper_of(ARKIT_NAMES[i]));
        Partition { lower, upper }
    }
}

impl Partition {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; NUM_CHANNELS];
        for &i in self.lower.iter().chain(&self.upper) {
            if i >= NUM_CHANNELS {
                return Err(Error::BadPartition(format!("channel {i} out of range")));
            }
            if seen[i] {
                return Err(Error::BadPartition(format!(
                    "channel {} assigned twice",
                    ARKIT_NAMES[i]
                )));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::BadPartition(format!(
                "channel {} unassigned",
                ARKIT_NAMES[i]
            )));
        }
        Ok(())
    }

    pub fn lower_names(&self) -> Vec<String> {
        self.lower
            .iter()
            .map(|&i| ARKIT_NAMES[i].to_owned())
            .collect()
    }

    pub fn upper_names(&self) -> Vec<String> {
        self.upper
            .iter()
            .map(|&i| ARKIT_NAMES[i].to_owned())
            .collect()
    }
}

/// T × 52 coefficients in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeSequence {
    coeffs: Mat,
}

impl BlendshapeSequence {
    /// Values are clamped into [0, 1].
    pub fn new(coeffs: Mat) -> Result<Self> {
        if coeffs.ncols() != NUM_CHANNELS {
            return Err(Error::BadDims(format!(
                "expected 52 channels, got {}",
                coeffs.ncols()
            )));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite blendshape coefficient".into()));
        }
        Ok(BlendshapeSequence {
            coeffs: coeffs.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn zeros(frames: usize) -> Self {
        BlendshapeSequence {
            coeffs: Mat::zeros((frames, NUM_CHANNELS)),
        }
    }

    pub fn coeffs(&self) -> &Mat {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Mat {
        self.coeffs
    }

    pub fn frames(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn channel_names() -> &'static [&'static str; NUM_CHANNELS] {
        &ARKIT_NAMES
    }

    /// Header row of channel names, then one row per frame. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = ARKIT_NAMES.join(",");
        out.push('\n');
        for row in self.coeffs.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n');
        let header = lines
            .next()
            .ok_or_else(|| Error::format(0, "empty blendshape file"))?;
        let names: Vec<&str> = header.trim_end().split(',').collect();
        if names != ARKIT_NAMES {
            return Err(Error::format(0, "header is not the 52 ARKit channel names"));
        }
        offset += header.len();
        let mut values = Vec::new();
        let mut frames = 0;
        for line in lines {
            let trimmed = line.trim_end();
            if trimmed.is_empty() {
                offset += line.len();
                continue;
            }
            let mut col = offset;
            let mut count = 0;
            for field in trimmed.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(col, format!("not a number: {field:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::format(
                        col,
                        format!("coefficient {v} outside [0, 1]"),
                    ));
                }
                values.push(v);
                col += field.len() + 1;
                count += 1;
            }
            if count != NUM_CHANNELS {
                return Err(Error::format(
                    offset,
                    format!("row has {count} values, expected 52"),
                ));
            }
            frames += 1;
            offset += line.len();
        }
        let coeffs = Mat::from_shape_vec((frames, NUM_CHANNELS), values).expect("row count");
        Ok(BlendshapeSequence { coeffs })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Scatter lower and upper channel groups into their 52 positions.
pub fn assemble(lower: &Mat, upper: &Mat, partition: &Partition) -> Result<BlendshapeSequence> {
    partition.validate()?;
    if lower.ncols() != partition.lower.len() || upper.ncols() != partition.upper.len() {
        return Err(Error::BadDims(format!(
            "halves of width {}/{} for a {}/{} partition",
            lower.ncols(),
            upper.ncols(),
            partition.lower.len(),
            partition.upper.len()
        )));
    }
    if lower.nrows() != upper.nrows() {
        return Err(Error::BadDims("halves differ in frame count".into()));
    }
    let mut out = Mat::zeros((lower.nrows(), NUM_CHANNELS));
    for (j, &c) in partition.lower.iter().enumerate() {
        out.column_mut(c).assign(&lower.column(j));
    }
    for (j, &c) in partition.upper.iter().enumerate() {
        out.column_mut(c).assign(&upper.column(j));
    }
    BlendshapeSequence::new(out)
}

/// Inverse of [`assemble`].
pub fn split(seq: &BlendshapeSequence, partition: &Partition) -> (Mat, Mat) {
    let take = |idx: &[usize]| {
        let mut m = Mat::zeros((seq.frames(), idx.len()));
        for (j, &c) in idx.iter().enumerate() {
            m.column_mut(j).assign(&seq.coeffs.column(c));
        }
        m
    };
    (take(&partition.lower), take(&partition.upper))
}

/// JSON written next to every predicted CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub partition: SidecarPartition,
    pub fps: u32,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarPartition {
    pub lower: Vec<String>,
    pub upper: Vec<String>,
}

impl Sidecar {
    pub fn new(partition: &Partition, model_version: &str) -> Self {
        Sidecar {
            partition: SidecarPartition {
                lower: partition.lower_names(),
                upper: partition.upper_names(),
            },
            fps: FPS,
            model_version: model_version.to_owned(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub ppe_period: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 256,
            heads: 4,
            blocks: 2,
            ff_dim: 512,
            ppe_period: 30,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.width % 2 != 0
        {
            return Err(Error::Config(format!(
                "decoder width {} must be even and a multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ppe_period == 0 || self.ff_dim == 0 {
            return Err(Error::Config(
                "decoder period and ff width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `[A ∥ S] → linear → +PPE → biased attention blocks → LN → linear → sigmoid`.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub fuse: Linear,
    pub stack: TransformerStack,
    pub norm: LayerNorm,
    pub head: Linear,
    pub width: usize,
    pub heads: usize,
    pub period: usize,
}

impl FusionDecoder {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        cfg: &DecoderConfig,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        FusionDecoder {
            fuse: Linear::new(
                b,
                &format!("{prefix}.fuse"),
                in_dim + STYLE_DIM,
                cfg.width,
                true,
            ),
            stack: TransformerStack::new(
                b,
                &format!("{prefix}.stack"),
                cfg.blocks,
                cfg.width,
                cfg.heads,
                cfg.ff_dim,
            ),
            norm: LayerNorm::new(b, &format!("{prefix}.norm"), cfg.width),
            head: Linear::new(b, &format!("{prefix}.head"), cfg.width, out_dim, true),
            width: cfg.width,
            heads: cfg.heads,
            period: cfg.ppe_period,
        }
    }

    /// `window` restricts attention to `|i-j| <= window`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        a: Var,
        s: Var,
        window: Option<usize>,
    ) -> Result<Var> {
        let (t, _) = g.shape(a);
        if g.shape(s).0 != t {
            return Err(Error::BadDims(format!(
                "decoder inputs have {t} and {} frames",
                g.shape(s).0
            )));
        }
        let x = g.concat_cols(&[a, s]);
        let h = self.fuse.forward(g, p, x);
        let ppe = g.constant(periodic_positional_encoding(t, self.width, self.period)?);
        let h = g.add(h, ppe);
        let mut bias = build_attention_bias(t, self.heads);
        if let Some(w) = window {
            bias = bias.windowed(w);
        }
        let h = self.stack.forward(g, p, h, Some(&bias));
        let h = self.norm.forward(g, p, h);
        let y = self.head.forward(g, p, h);
        Ok(g.sigmoid(y))
    }
}

#[derive(Clone, Debug)]
pub struct PartitionedDecoder {
    pub style_proj: Linear,
    pub lower: FusionDecoder,
    pub upper: FusionDecoder,
    pub partition: Partition,
    pub cfg: DecoderConfig,
}

impl PartitionedDecoder {
    pub fn new(b: &mut Builder, cfg: &DecoderConfig, partition: Partition) -> Result<Self> {
        cfg.validate()?;
        partition.validate()?;
        Ok(PartitionedDecoder {
            style_proj: Linear::new(b, "decoder.style_proj", ENTRY_DIM, STYLE_DIM, true),
            lower: FusionDecoder::new(
                b,
                "decoder.lower",
                cfg,
                crate::encoders::CONTENT_DIM,
                partition.lower.len(),
            ),
            upper: FusionDecoder::new(
                b,
                "decoder.upper",
                cfg,
                crate::encoders::EMOTION_DIM,
                partition.upper.len(),
            ),
            partition,
            cfg: cfg.clone(),
        })
    }

    /// Project a retrieved 768-d entry and repeat it over `frames` rows.
    pub fn style_rows(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        entry: &[f64],
        frames: usize,
    ) -> Result<Var> {
        if entry.len() != ENTRY_DIM {
            return Err(Error::BadDims(format!(
                "style entry of length {}",
                entry.len()
            )));
        }
        let s = g.constant(Mat::from_shape_vec((1, ENTRY_DIM), entry.to_vec()).expect("row"));
        let s = self.style_proj.forward(g, p, s);
        Ok(g.repeat_rows(s, frames))
    }

    /// Evaluation-mode projection of a retrieved entry (1 × 256).
    pub fn project_style(&self, p: &ParamStore, entry: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let s = self.style_rows(&mut g, p, entry, 1)?;
        Ok(g.value(s).iter().copied().collect())
    }
}

fn check_inputs(a: &Mat, s: &Mat, dim: usize, what: &str) -> Result<()> {
    if a.nrows() != s.nrows() {
        return Err(Error::BadDims(format!(
            "{what} has {} frames but style has {}",
            a.nrows(),
            s.nrows()
        )));
    }
    if a.ncols() != dim || s.ncols() != STYLE_DIM {
        return Err(Error::BadDims(format!(
            "{what}/style widths {}/{}, expected {dim}/{STYLE_DIM}",
            a.ncols(),
            s.ncols()
        )));
    }
    Ok(())
}

/// T × |lower| coefficients from content `c` and projected style rows `s`.
pub fn decode_lower(c: &Mat, s: &Mat, dec: &PartitionedDecoder, p: &ParamStore) -> Result<Mat> {
    check_inputs(c, s, crate::encoders::CONTENT_DIM, "content")?;
    let mut g = Graph::no_grad();
    let a = g.constant(c.clone());
    let s = g.constant(s.clone());
    let y = dec.lower.forward(&mut g, p, a, s, None)?;
    Ok(g.value(y).clone())
}

/// T × |upper| coefficients from emotion `e` and projected style rows `s`.
pub fn decode_upper(e: &Mat, s: &Mat, dec: &PartitionedDecoder, p: &ParamStore) -> Result<Mat> {
    check_inputs(e, s, crate::encoders::EMOTION_DIM, "emotion")?;
    let mut g = Graph::no_grad();
    let a = g.constant(e.clone());
    let s = g.constant(s.clone());
    let y = dec.upper.forward(&mut g, p, a, s, None)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            width: 8,
            heads: 2,
            blocks: 1,
            ff_dim: 8,
            ppe_period: 30,
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn build(cfg: &DecoderConfig) -> (PartitionedDecoder, ParamStore) {
        let mut b = Builder::new(11);
        let d = PartitionedDecoder::new(&mut b, cfg, Partition::default()).unwrap();
        (d, b.finish())
    }

    #[test]
    fn default_partition_groups() {
        let p = Partition::default();
        p.validate().unwrap();
        assert_eq!(p.lower.len(), 32);
        assert_eq!(p.upper.len(), 20);
        let upper = p.upper_names();
        assert_eq!(upper.iter().filter(|n| n.starts_with("brow")).count(), 5);
        assert_eq!(upper.iter().filter(|n| n.starts_with("eye")).count(), 14);
        assert!(upper.contains(&"cheekPuff".to_owned()));
        let lower = p.lower_names();
        assert_eq!(lower.iter().filter(|n| n.starts_with("mouth")).count(), 23);
        assert_eq!(lower.iter().filter(|n| n.starts_with("jaw")).count(), 4);
        for n in [
            "cheekSquintLeft",
            "cheekSquintRight",
            "noseSneerLeft",
            "noseSneerRight",
            "tongueOut",
        ] {
            assert!(lower.contains(&n.to_owned()));
        }
    }

    #[test]
    fn overlapping_partition_rejected() {
        let mut p = Partition::default();
        p.upper[0] = p.lower[0];
        let l = Mat::zeros((2, 32));
        let u = Mat::zeros((2, 20));
        assert!(matches!(assemble(&l, &u, &p), Err(Error::BadPartition(_))));
    }

    #[test]
    fn assemble_split_round_trip_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Partition::default();
        let l = rand_mat(&mut rng, 6, 32).mapv(f64::abs);
        let u = rand_mat(&mut rng, 6, 20).mapv(f64::abs);
        let seq = assemble(&l, &u, &p).unwrap();
        assert_eq!(split(&seq, &p), (l, u));
        let z = assemble(&Mat::zeros((4, 32)), &Mat::zeros((4, 20)), &p).unwrap();
        assert_eq!(z, BlendshapeSequence::zeros(4));
    }

    #[test]
    fn assemble_is_a_permutation() {
        // Tag every input column with a distinct value and find it once.
        let p = Partition::default();
        let l = Mat::from_shape_fn((1, 32), |(_, j)| (j + 1) as f64 / 100.0);
        let u = Mat::from_shape_fn((1, 20), |(_, j)| (j + 33) as f64 / 100.0);
        let seq = assemble(&l, &u, &p).unwrap();
        let mut perm = Mat::zeros((52, 52));
        for out in 0..52 {
            let v = seq.coeffs()[[0, out]];
            let src = (v * 100.0).round() as usize - 1;
            perm[[out, src]] += 1.0;
        }
        for i in 0..52 {
            assert_eq!(perm.row(i).sum(), 1.0);
            assert_eq!(perm.column(i).sum(), 1.0);
        }
    }

    #[test]
    fn shapes_and_range() {
        let (d, p) = build(&tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = rand_mat(&mut rng, 30, 256);
        let e = rand_mat(&mut rng, 30, 256).mapv(|v| v * 40.0);
        let s = rand_mat(&mut rng, 30, 256);
        let lo = decode_lower(&c, &s, &d, &p).unwrap();
        let up = decode_upper(&e, &s, &d, &p).unwrap();
        assert_eq!(lo.dim(), (30, 32));
        assert_eq!(up.dim(), (30, 20));
        assert!(lo.iter().chain(up.iter()).all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            decode_lower(&c, &s.slice(ndarray::s![..29, ..]).to_owned(), &d, &p),
            Err(Error::BadDims(_))
        ));
    }

    #[test]
    fn zero_head_gives_sigmoid_of_bias() {
        let (d, mut p) = build(&tiny());
        p.set("decoder.lower.head.weight", Mat::zeros((8, 32)));
        let bias = Mat::from_shape_fn((1, 32), |(_, j)| j as f64 * 0.1 - 1.5);
        p.set("decoder.lower.head.bias", bias);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = decode_lower(
            &rand_mat(&mut rng, 5, 256),
            &rand_mat(&mut rng, 5, 256),
            &d,
            &p,
        )
        .unwrap();
        let b = p.value("decoder.lower.head.bias");
        for row in out.rows() {
            for j in 0..32 {
                assert!((row[j] - 1.0 / (1.0 + (-b[[0, j]]).exp())).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upper_gradients_match_finite_differences() {
        let (d, mut p) = build(&tiny());
        p.freeze_prefix("decoder.lower.");
        p.freeze_prefix("decoder.style_proj.");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = rand_mat(&mut rng, 6, 256);
        let s = rand_mat(&mut rng, 6, 256).mapv(|v| v * 0.3);
        let target = rand_mat(&mut rng, 6, 20).mapv(f64::abs);
        let errs = gradcheck::check_params(&p, gradcheck::DEFAULT_STEP, |g, p| {
            let a = g.constant(e.clone());
            let s = g.constant(s.clone());
            let y = d.upper.forward(g, p, a, s, None).unwrap();
            let t = g.constant(target.clone());
            let diff = g.sub(y, t);
            let sq = g.square(diff);
            g.sum(sq)
        });
        assert!(errs.len() > 5);
        for (name, err) in errs {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn windowed_decoder_is_shift_equivariant() {
        let cfg = DecoderConfig {
            ppe_period: 5,
            ..tiny()
        };
        let (d, p) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (len, k, w, pad) = (40, 10, 2, 12);
        let core_a = rand_mat(&mut rng, len - 2 * pad, 256);
        let core_s = rand_mat(&mut rng, len - 2 * pad, 256);
        let fill = 0.25;
        let place = |core: &Mat, start: usize| {
            let mut m = Mat::from_elem((len, 256), fill);
            m.slice_mut(ndarray::s![start..start + core.nrows(), ..])
                .assign(core);
            m
        };
        let run = |start: usize| {
            let mut g = Graph::no_grad();
            let a = g.constant(place(&core_a, start));
            let s = g.constant(place(&core_s, start));
            let y = d.lower.forward(&mut g, &p, a, s, Some(w)).unwrap();
            g.value(y).clone()
        };
        let y0 = run(pad);
        let y1 = run(pad + k);
        let margin = cfg.blocks * w;
        for t in margin..len - k - margin {
            for j in 0..32 {
                assert!((y0[[t, j]] - y1[[t + k, j]]).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = BlendshapeSequence::new(rand_mat(&mut rng, 7, 52).mapv(f64::abs)).unwrap();
        let text = seq.to_csv();
        assert!(text.starts_with("eyeBlinkLeft,eyeLookDownLeft,"));
        assert_eq!(text.lines().count(), 8);
        assert_eq!(BlendshapeSequence::from_csv(&text).unwrap(), seq);
    }

    #[test]
    fn csv_errors_carry_offsets() {
        let seq = BlendshapeSequence::zeros(2);
        let text = seq.to_csv();
        let header_len = text.find('\n').unwrap() + 1;
        let bad = text.replacen("\n0,", "\nx,", 1);
        match BlendshapeSequence::from_csv(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, header_len),
            other => panic!("{other:?}"),
        }
        let out_of_range = text.replacen("\n0,", "\n1.5,", 1);
        assert!(matches!(
            BlendshapeSequence::from_csv(&out_of_range),
            Err(Error::Format { .. })
        ));
    }
}
