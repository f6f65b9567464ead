//! Triangle meshes, delta-blendshape evaluation and deformation transfer.
//!
//! Deformation transfer follows the classic per-triangle formulation: each
//! triangle gets a fourth vertex along its scaled normal, source
//! deformations become 3×3 affine maps, and the target vertices (plus one
//! free fourth vertex per target triangle) are fitted to those maps by linear
//! least squares with vertex 0 pinned to its rest position. The normal
//! matrix depends only on the target rest mesh and the correspondence, so one
//! Cholesky factorization serves every template.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::decoder::{BlendshapeSequence, ARKIT_NAMES, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::{EYE_FOREHEAD_MASK, LIP_MASK, UPPER_FACE_MASK};

pub const BASIS_VERSION: u32 = 1;
pub const NEUTRAL_FILE: &str = "neutral.obj";
pub const META_FILE: &str = "meta.json";
/// Anchored vertex that fixes the translation of transferred meshes.
pub const ANCHOR: usize = 0;

pub fn template_file(k: usize) -> String {
    format!("bs_{k:03}.obj")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    /// V × 3
    pub vertices: Array2<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub region_masks: BTreeMap<String, Vec<usize>>,
}

impl TriangleMesh {
    pub fn new(vertices: Array2<f64>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.ncols() != 3 {
            return Err(Error::BadDims(format!(
                "vertices have {} coordinates",
                vertices.ncols()
            )));
        }
        let v = vertices.nrows();
        if let Some((j, _)) = triangles
            .iter()
            .enumerate()
            .find(|(_, t)| t.iter().any(|&i| i >= v))
        {
            return Err(Error::BadDims(format!(
                "triangle {j} indexes past {v} vertices"
            )));
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
            region_masks: BTreeMap::new(),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.vertices[[i, 0]],
            self.vertices[[i, 1]],
            self.vertices[[i, 2]],
        )
    }

    pub fn same_topology(&self, other: &TriangleMesh) -> bool {
        self.num_vertices() == other.num_vertices() && self.triangles == other.triangles
    }

    /// Copy with the same topology and masks but new positions.
    pub fn with_vertices(&self, vertices: Array2<f64>) -> Result<Self> {
        if vertices.dim() != self.vertices.dim() {
            return Err(Error::BadDims(format!(
                "vertex array {:?}, mesh has {:?}",
                vertices.dim(),
                self.vertices.dim()
            )));
        }
        Ok(TriangleMesh {
            vertices,
            ..self.clone()
        })
    }

    pub fn triangle_area(&self, j: usize) -> f64 {
        let [a, b, c] = self.triangles[j];
        let (a, b, c) = (self.vertex(a), self.vertex(b), self.vertex(c));
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Error on the first triangle with (numerically) zero area.
    pub fn check_nondegenerate(&self) -> Result<()> {
        for j in 0..self.num_triangles() {
            frame(self, j)?;
        }
        Ok(())
    }

    /// `v x y z` and 1-based `f a b c` records.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for r in self.vertices.rows() {
            let _ = writeln!(out, "v {} {} {}", r[0], r[1], r[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    /// Reads `v` and `f` records and ignores the rest. Face corners may carry
    /// `/vt/vn` suffixes; polygons are fan-triangulated.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("v") => {
                    let xyz: Vec<f64> = fields
                        .take(3)
                        .map(|f| f.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::format(offset, format!("bad vertex: {e}")))?;
                    if xyz.len() != 3 || xyz.iter().any(|x| !x.is_finite()) {
                        return Err(Error::format(
                            offset,
                            "vertex needs three finite coordinates",
                        ));
                    }
                    verts.extend(xyz);
                }
                Some("f") => {
                    let idx: Vec<usize> = fields
                        .map(|f| {
                            let first = f.split('/').next().unwrap_or("");
                            match first.parse::<usize>() {
                                Ok(i) if i >= 1 => Ok(i - 1),
                                _ => Err(Error::format(offset, format!("bad face index {f:?}"))),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::format(offset, "face needs at least three corners"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push((offset, [idx[0], idx[k], idx[k + 1]]));
                    }
                }
                _ => {}
            }
            offset += line.len();
        }
        let v = verts.len() / 3;
        if let Some((off, _)) = faces.iter().find(|(_, t)| t.iter().any(|&i| i >= v)) {
            return Err(Error::format(
                *off,
                format!("face references a vertex past {v}"),
            ));
        }
        let vertices = Array2::from_shape_vec((v, 3), verts).expect("multiple of three");
        TriangleMesh::new(vertices, faces.into_iter().map(|(_, t)| t).collect())
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TriangleMesh::from_obj(&text)
    }
}

/// A neutral mesh and one template per blendshape channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeBasis {
    pub neutral: TriangleMesh,
    pub templates: Vec<TriangleMesh>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BasisMeta {
    version: u32,
    channel_names: Vec<String>,
    num_vertices: usize,
    num_triangles: usize,
    region_masks: BTreeMap<String, Vec<usize>>,
}

impl BlendshapeBasis {
    pub fn new(neutral: TriangleMesh, templates: Vec<TriangleMesh>) -> Result<Self> {
        let b = BlendshapeBasis { neutral, templates };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.len() != NUM_CHANNELS {
            return Err(Error::BadBasis(format!(
                "{} templates, expected {NUM_CHANNELS}",
                self.templates.len()
            )));
        }
        if let Some(k) = self
            .templates
            .iter()
            .position(|t| !t.same_topology(&self.neutral))
        {
            return Err(Error::BadBasis(format!(
                "template {k} does not share the neutral topology"
            )));
        }
        Ok(())
    }

    /// Writes `neutral.obj`, `bs_000.obj`..`bs_051.obj` and `meta.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.neutral.write_obj(&dir.join(NEUTRAL_FILE))?;
        for (k, t) in self.templates.iter().enumerate() {
            t.write_obj(&dir.join(template_file(k)))?;
        }
        let meta = BasisMeta {
            version: BASIS_VERSION,
            channel_names: ARKIT_NAMES.iter().map(|s| s.to_string()).collect(),
            num_vertices: self.neutral.num_vertices(),
            num_triangles: self.neutral.num_triangles(),
            region_masks: self.neutral.region_masks.clone(),
        };
        let path = dir.join(META_FILE);
        fs::write(
            &path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BasisMeta =
            serde_json::from_str(&text).map_err(|e| crate::training::json_error(&text, &e))?;
        if meta.version != BASIS_VERSION {
            return Err(Error::BadBasis(format!("basis version {}", meta.version)));
        }
        let mut neutral = TriangleMesh::read_obj(&dir.join(NEUTRAL_FILE))?;
        for (name, set) in &meta.region_masks {
            if set.iter().any(|&v| v >= neutral.num_vertices()) {
                return Err(Error::BadMask(format!("mask {name} indexes past the mesh")));
            }
        }
        neutral.region_masks = meta.region_masks;
        let templates = (0..NUM_CHANNELS)
            .map(|k| {
                let mut t = TriangleMesh::read_obj(&dir.join(template_file(k)))?;
                t.region_masks = neutral.region_masks.clone();
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        BlendshapeBasis::new(neutral, templates)
    }
}

/// `V_t = N + Σ_k b_{t,k} (T_k - N)` for every frame; T × V × 3.
pub fn apply_blendshapes(
    basis: &BlendshapeBasis,
    coeffs: &BlendshapeSequence,
) -> Result<Array3<f64>> {
    basis.validate()?;
    let n = &basis.neutral.vertices;
    let (v, _) = n.dim();
    // deltas: 52 × 3V
    let mut deltas = Array2::<f64>::zeros((NUM_CHANNELS, 3 * v));
    for (k, t) in basis.templates.iter().enumerate() {
        let d = &t.vertices - n;
        deltas
            .row_mut(k)
            .assign(&d.into_shape_with_order(3 * v).expect("contiguous"));
    }
    let flat = coeffs.coeffs().dot(&deltas);
    let frames = coeffs.frames();
    let mut out = flat
        .into_shape_with_order((frames, v, 3))
        .expect("sizes agree");
    for mut f in out.outer_iter_mut() {
        f += n;
    }
    Ok(out)
}

/// `[v2 - v1, v3 - v1, v4 - v1]` with `v4 - v1 = n / sqrt(|n|)`.
fn frame(mesh: &TriangleMesh, j: usize) -> Result<Matrix3<f64>> {
    let [a, b, c] = mesh.triangles[j];
    let (a, b, c) = (mesh.vertex(a), mesh.vertex(b), mesh.vertex(c));
    let e1 = b - a;
    let e2 = c - a;
    let n = e1.cross(&e2);
    let scale = e1.norm_squared().max(e2.norm_squared());
    let len = n.norm();
    if len.is_nan() || len <= 1e-12 * scale || !len.is_finite() {
        return Err(Error::DegenerateTriangle(j));
    }
    let e3 = n / len.sqrt();
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Per-triangle affine maps `S_j = Ṽ_j V_j⁻¹` taking `rest` to `deformed`.
pub fn triangle_transforms(
    rest: &TriangleMesh,
    deformed: &TriangleMesh,
) -> Result<Vec<Matrix3<f64>>> {
    if !rest.same_topology(deformed) {
        return Err(Error::BadBasis("source meshes differ in topology".into()));
    }
    (0..rest.num_triangles())
        .map(|j| {
            let v = frame(rest, j)?;
            let vt = frame(deformed, j)?;
            let inv = v.try_inverse().ok_or(Error::DegenerateTriangle(j))?;
            Ok(vt * inv)
        })
        .collect()
}

/// Factored least-squares system for one target rest mesh and
/// correspondence, reusable across source deformations.
#[derive(Clone, Debug)]
pub struct TransferSolver {
    target: TriangleMesh,
    correspondence: Vec<usize>,
    /// Per target triangle: the four unknown indices and the 3×4 coefficient
    /// block mapping them to the three columns of `T_j`.
    rows: Vec<([usize; 4], [[f64; 4]; 3])>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Column of unknown `u` in the reduced system; the anchor is pinned.
fn anchor_col(u: usize) -> Option<usize> {
    match u.cmp(&ANCHOR) {
        std::cmp::Ordering::Less => Some(u),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(u - 1),
    }
}

impl TransferSolver {
    /// `correspondence[j]` is the source triangle driving target triangle `j`.
    pub fn new(target: &TriangleMesh, correspondence: &[usize]) -> Result<Self> {
        if correspondence.len() != target.num_triangles() {
            return Err(Error::BadDims(format!(
                "correspondence covers {} triangles, target has {}",
                correspondence.len(),
                target.num_triangles()
            )));
        }
        let v = target.num_vertices();
        if v == 0 {
            return Err(Error::EmptyInput("target mesh has no vertices".into()));
        }
        let unknowns = v + target.num_triangles();
        let mut rows = Vec::with_capacity(target.num_triangles());
        for (j, tri) in target.triangles.iter().enumerate() {
            let w = frame(target, j)?
                .try_inverse()
                .ok_or(Error::DegenerateTriangle(j))?;
            let idx = [tri[0], tri[1], tri[2], v + j];
            let mut coef = [[0.0; 4]; 3];
            for (k, row) in coef.iter_mut().enumerate() {
                let s = w[(0, k)] + w[(1, k)] + w[(2, k)];
                *row = [-s, w[(0, k)], w[(1, k)], w[(2, k)]];
            }
            rows.push((idx, coef));
        }
        // Normal matrix over every unknown except the anchor.
        let n = unknowns - 1;
        let col = anchor_col;
        let mut ata = DMatrix::<f64>::zeros(n, n);
        for (idx, coef) in &rows {
            for r in coef {
                for a in 0..4 {
                    let Some(ca) = col(idx[a]) else { continue };
                    for b in 0..4 {
                        if let Some(cb) = col(idx[b]) {
                            ata[(ca, cb)] += r[a] * r[b];
                        }
                    }
                }
            }
        }
        let max_diag = (0..n).map(|i| ata[(i, i)]).fold(0.0f64, f64::max);
        let factor = ata.cholesky().ok_or(Error::SingularSystem)?;
        let l = factor.l_dirty();
        if (0..n).any(|i| l[(i, i)] * l[(i, i)] <= 1e-12 * max_diag) {
            return Err(Error::SingularSystem);
        }
        Ok(TransferSolver {
            target: target.clone(),
            correspondence: correspondence.to_vec(),
            rows,
            factor,
        })
    }

    pub fn target(&self) -> &TriangleMesh {
        &self.target
    }

    fn check_source(&self, n_src: usize) -> Result<()> {
        if let Some(&bad) = self.correspondence.iter().find(|&&s| s >= n_src) {
            return Err(Error::BadDims(format!(
                "correspondence names source triangle {bad}, source has {n_src}"
            )));
        }
        Ok(())
    }

    /// Solved target vertices (V × 3) and free fourth vertices (F × 3).
    pub fn solve(&self, transforms: &[Matrix3<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_source(transforms.len())?;
        let v = self.target.num_vertices();
        let f = self.target.num_triangles();
        let n = v + f - 1;
        let anchor = self.target.vertex(ANCHOR);
        let col = anchor_col;
        let mut verts = Array2::<f64>::zeros((v, 3));
        let mut fourth = Array2::<f64>::zeros((f, 3));
        for d in 0..3 {
            let mut rhs = DVector::<f64>::zeros(n);
            for (j, (idx, coef)) in self.rows.iter().enumerate() {
                let s = &transforms[self.correspondence[j]];
                for (k, r) in coef.iter().enumerate() {
                    let mut b = s[(d, k)];
                    for a in 0..4 {
                        if idx[a] == ANCHOR {
                            b -= r[a] * anchor[d];
                        }
                    }
                    for a in 0..4 {
                        if let Some(c) = col(idx[a]) {
                            rhs[c] += r[a] * b;
                        }
                    }
                }
            }
            let x = self.factor.solve(&rhs);
            for u in 0..v + f {
                let value = match col(u) {
                    Some(c) => x[c],
                    None => anchor[d],
                };
                if u < v {
                    verts[[u, d]] = value;
                } else {
                    fourth[[u - v, d]] = value;
                }
            }
        }
        if verts.iter().chain(fourth.iter()).any(|x| !x.is_finite()) {
            return Err(Error::SingularSystem);
        }
        Ok((verts, fourth))
    }

    /// Deformed target for one source rest/deformed pair.
    pub fn transfer(
        &self,
        src_neutral: &TriangleMesh,
        src_deformed: &TriangleMesh,
    ) -> Result<TriangleMesh> {
        let s = triangle_transforms(src_neutral, src_deformed)?;
        let (verts, _) = self.solve(&s)?;
        self.target.with_vertices(verts)
    }

    /// `Σ_j ‖T_j(x) - S_c(j)‖²_F` for target vertices and fourth vertices.
    pub fn objective(
        &self,
        transforms: &[Matrix3<f64>],
        verts: &Array2<f64>,
        fourth: &Array2<f64>,
    ) -> Result<f64> {
        self.check_source(transforms.len())?;
        let v = self.target.num_vertices();
        let get = |u: usize, d: usize| {
            if u < v {
                verts[[u, d]]
            } else {
                fourth[[u - v, d]]
            }
        };
        let mut total = 0.0;
        for (j, (idx, coef)) in self.rows.iter().enumerate() {
            let s = &transforms[self.correspondence[j]];
            for (k, r) in coef.iter().enumerate() {
                for d in 0..3 {
                    let t: f64 = (0..4).map(|a| r[a] * get(idx[a], d)).sum();
                    total += (t - s[(d, k)]).powi(2);
                }
            }
        }
        Ok(total)
    }
}

/// Fourth vertices `v1 + n/sqrt(|n|)` of every triangle (F × 3).
pub fn fourth_vertices(mesh: &TriangleMesh) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((mesh.num_triangles(), 3));
    for j in 0..mesh.num_triangles() {
        let m = frame(mesh, j)?;
        let p = mesh.vertex(mesh.triangles[j][0]) + m.column(2);
        for d in 0..3 {
            out[[j, d]] = p[d];
        }
    }
    Ok(out)
}

pub fn deformation_transfer(
    src_neutral: &TriangleMesh,
    src_deformed: &TriangleMesh,
    tgt_neutral: &TriangleMesh,
    correspondence: &[usize],
) -> Result<TriangleMesh> {
    TransferSolver::new(tgt_neutral, correspondence)?.transfer(src_neutral, src_deformed)
}

/// Transfers every source template onto `tgt_neutral` with one factorization.
pub fn build_templates(
    src: &BlendshapeBasis,
    tgt_neutral: &TriangleMesh,
    correspondence: &[usize],
) -> Result<BlendshapeBasis> {
    src.validate()?;
    let solver = TransferSolver::new(tgt_neutral, correspondence)?;
    let templates = src
        .templates
        .iter()
        .map(|t| solver.transfer(&src.neutral, t))
        .collect::<Result<Vec<_>>>()?;
    BlendshapeBasis::new(tgt_neutral.clone(), templates)
}

/// Target-to-source triangle map stored as a JSON array of indices.
pub fn read_correspondence(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| crate::training::json_error(&text, &e))
}

/// Axis-aligned unit cube: 8 vertices, 12 outward-facing triangles.
pub fn unit_cube() -> TriangleMesh {
    let mut v = Array2::zeros((8, 3));
    for i in 0..8 {
        v[[i, 0]] = (i & 1) as f64;
        v[[i, 1]] = ((i >> 1) & 1) as f64;
        v[[i, 2]] = ((i >> 2) & 1) as f64;
    }
    let tris = vec![
        [0, 2, 3],
        [0, 3, 1], // z = 0
        [4, 5, 7],
        [4, 7, 6], // z = 1
        [0, 1, 5],
        [0, 5, 4], // y = 0
        [2, 6, 7],
        [2, 7, 3], // y = 1
        [0, 4, 6],
        [0, 6, 2], // x = 0
        [1, 3, 7],
        [1, 7, 5], // x = 1
    ];
    TriangleMesh::new(v, tris).expect("valid cube")
}

const FACE_COLS: usize = 17;
const FACE_ROWS: usize = 21;

/// Height-field face on a 17 × 21 grid with lip, eye/forehead and upper-face
/// masks. Vertex 0 is a corner that no template moves.
pub fn synthetic_face() -> TriangleMesh {
    let mut v = Array2::zeros((FACE_COLS * FACE_ROWS, 3));
    for r in 0..FACE_ROWS {
        for c in 0..FACE_COLS {
            let x = -1.0 + 2.0 * c as f64 / (FACE_COLS - 1) as f64;
            let y = -1.2 + 2.4 * r as f64 / (FACE_ROWS - 1) as f64;
            let nose = 0.15 * (-((x * x + (y - 0.05).powi(2)) / (2.0 * 0.15 * 0.15))).exp();
            let z = 0.3 * (1.0 - 0.5 * x * x - 0.3 * (y / 1.2).powi(2)) + nose;
            let i = r * FACE_COLS + c;
            v[[i, 0]] = x;
            v[[i, 1]] = y;
            v[[i, 2]] = z;
        }
    }
    let mut tris = Vec::new();
    for r in 0..FACE_ROWS - 1 {
        for c in 0..FACE_COLS - 1 {
            let i = r * FACE_COLS + c;
            tris.push([i, i + 1, i + FACE_COLS + 1]);
            tris.push([i, i + FACE_COLS + 1, i + FACE_COLS]);
        }
    }
    let mut mesh = TriangleMesh::new(v, tris).expect("valid grid");
    let select = |pred: &dyn Fn(f64, f64) -> bool| -> Vec<usize> {
        (0..mesh.num_vertices())
            .filter(|&i| pred(mesh.vertices[[i, 0]], mesh.vertices[[i, 1]]))
            .collect()
    };
    let ellipse = |x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64| {
        ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
    };
    let lip = select(&|x, y| ellipse(x, y, 0.0, -0.55, 0.4, 0.16));
    let eye_forehead = select(&|x, y| {
        ellipse(x, y, 0.35, 0.35, 0.26, 0.16) || ellipse(x, y, -0.35, 0.35, 0.26, 0.16) || y >= 0.55
    });
    let upper = select(&|_, y| y > 0.1);
    mesh.region_masks.insert(LIP_MASK.into(), lip);
    mesh.region_masks
        .insert(EYE_FOREHEAD_MASK.into(), eye_forehead);
    mesh.region_masks.insert(UPPER_FACE_MASK.into(), upper);
    mesh
}

/// A wider, flatter face with the topology and masks of [`synthetic_face`],
/// used as a transfer target with the identity correspondence.
pub fn synthetic_target_face() -> TriangleMesh {
    let face = synthetic_face();
    let mut v = face.vertices.clone();
    for mut r in v.rows_mut() {
        let (x, y) = (r[0], r[1]);
        r[0] = 1.15 * x;
        r[1] = 0.95 * y + 0.03 * x * x;
        r[2] = 0.8 * r[2] + 0.05 * (1.0 - x * x);
    }
    face.with_vertices(v).expect("same shape")
}

/// Bump centres, support radius and displacement for one channel.
fn channel_motion(name: &str) -> (Vec<(f64, f64)>, f64, [f64; 3]) {
    let side = if name.ends_with("Left") {
        1.0
    } else if name.ends_with("Right") {
        -1.0
    } else {
        0.0
    };
    let base = name.trim_end_matches("Left").trim_end_matches("Right");
    let at = |x: f64, y: f64| vec![(side * x, y)];
    match base {
        "eyeBlink" => (at(0.35, 0.35), 0.16, [0.0, -0.06, 0.0]),
        "eyeLookDown" => (at(0.35, 0.35), 0.12, [0.0, -0.02, 0.0]),
        "eyeLookUp" => (at(0.35, 0.35), 0.12, [0.0, 0.02, 0.0]),
        "eyeLookIn" => (at(0.35, 0.35), 0.12, [-side * 0.02, 0.0, 0.0]),
        "eyeLookOut" => (at(0.35, 0.35), 0.12, [side * 0.02, 0.0, 0.0]),
        "eyeSquint" => (at(0.35, 0.25), 0.15, [0.0, 0.03, 0.0]),
        "eyeWide" => (at(0.35, 0.42), 0.15, [0.0, 0.04, 0.0]),
        "jawForward" => (vec![(0.0, -0.85)], 0.45, [0.0, 0.0, 0.08]),
        "jawLeft" | "jawRight" => (vec![(0.0, -0.85)], 0.45, [side * 0.06, 0.0, 0.0]),
        "jawOpen" => (vec![(0.0, -0.8)], 0.45, [0.0, -0.15, 0.0]),
        "mouthClose" => (vec![(0.0, -0.6)], 0.2, [0.0, 0.03, 0.0]),
        "mouthFunnel" => (vec![(0.0, -0.55)], 0.22, [0.0, 0.0, 0.05]),
        "mouthPucker" => (vec![(0.0, -0.55)], 0.18, [0.0, 0.0, 0.07]),
        "mouthLeft" | "mouthRight" => (vec![(0.0, -0.55)], 0.3, [side * 0.06, 0.0, 0.0]),
        "mouthSmile" => (at(0.3, -0.5), 0.2, [side * 0.03, 0.05, 0.0]),
        "mouthFrown" => (at(0.3, -0.58), 0.2, [0.0, -0.04, 0.0]),
        "mouthDimple" => (at(0.36, -0.5), 0.15, [0.0, 0.0, -0.03]),
        "mouthStretch" => (at(0.3, -0.55), 0.2, [side * 0.05, 0.0, 0.0]),
        "mouthRollLower" => (vec![(0.0, -0.63)], 0.18, [0.0, 0.0, -0.03]),
        "mouthRollUpper" => (vec![(0.0, -0.47)], 0.18, [0.0, 0.0, -0.03]),
        "mouthShrugLower" => (vec![(0.0, -0.65)], 0.18, [0.0, 0.03, 0.0]),
        "mouthShrugUpper" => (vec![(0.0, -0.45)], 0.18, [0.0, 0.03, 0.0]),
        "mouthPress" => (at(0.15, -0.55), 0.15, [0.0, 0.02, -0.01]),
        "mouthLowerDown" => (at(0.12, -0.63), 0.15, [0.0, -0.05, 0.0]),
        "mouthUpperUp" => (at(0.12, -0.47), 0.15, [0.0, 0.05, 0.0]),
        "browDown" => (at(0.35, 0.62), 0.2, [0.0, -0.05, 0.0]),
        "browInnerUp" => (vec![(0.0, 0.6)], 0.22, [0.0, 0.06, 0.0]),
        "browOuterUp" => (at(0.5, 0.62), 0.2, [0.0, 0.05, 0.0]),
        "cheekPuff" => (vec![(0.45, -0.3), (-0.45, -0.3)], 0.22, [0.0, 0.0, 0.06]),
        "cheekSquint" => (at(0.45, 0.15), 0.18, [0.0, 0.03, 0.0]),
        "noseSneer" => (at(0.1, 0.15), 0.12, [0.0, 0.03, 0.0]),
        "tongueOut" => (vec![(0.0, -0.58)], 0.1, [0.0, 0.0, 0.05]),
        _ => (vec![(0.0, 0.0)], 0.1, [0.0, 0.0, 0.01]),
    }
}

/// The synthetic face with one smooth, compactly supported bump per channel.
pub fn synthetic_basis() -> BlendshapeBasis {
    let neutral = synthetic_face();
    let templates = ARKIT_NAMES
        .iter()
        .map(|name| {
            let (centers, radius, dir) = channel_motion(name);
            let mut v = neutral.vertices.clone();
            for i in 0..v.nrows() {
                let (x, y) = (v[[i, 0]], v[[i, 1]]);
                let w: f64 = centers
                    .iter()
                    .map(|&(cx, cy)| {
                        let q = ((x - cx).powi(2) + (y - cy).powi(2)) / (radius * radius);
                        if q < 1.0 {
                            (1.0 - q).powi(2)
                        } else {
                            0.0
                        }
                    })
                    .sum();
                for d in 0..3 {
                    v[[i, d]] += w * dir[d];
                }
            }
            neutral.with_vertices(v).expect("same shape")
        })
        .collect();
    BlendshapeBasis::new(neutral, templates).expect("consistent basis")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let m = synthetic_face();
        let back = TriangleMesh::from_obj(&m.to_obj()).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
    }

    #[test]
    fn obj_reader_handles_suffixes_and_polygons() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let m = TriangleMesh::from_obj(text).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        match TriangleMesh::from_obj("v 0 0 0\nf 1 2 3\n") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            TriangleMesh::from_obj("v 0 x 0\n"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn degenerate_triangle_is_reported() {
        let v = Array2::from_shape_vec((3, 3), vec![0., 0., 0., 1., 0., 0., 2., 0., 0.]).unwrap();
        let m = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(
            m.check_nondegenerate(),
            Err(Error::DegenerateTriangle(0))
        ));
        assert!(matches!(
            TransferSolver::new(&m, &[0]),
            Err(Error::DegenerateTriangle(0))
        ));
    }

    #[test]
    fn unreferenced_vertex_makes_system_singular() {
        let mut cube = unit_cube();
        let mut v = cube.vertices.clone().into_raw_vec_and_offset().0;
        v.extend([5.0, 5.0, 5.0]);
        cube.vertices = Array2::from_shape_vec((9, 3), v).unwrap();
        let corr: Vec<usize> = (0..12).collect();
        assert!(matches!(
            TransferSolver::new(&cube, &corr),
            Err(Error::SingularSystem)
        ));
    }

    #[test]
    fn zero_and_unit_coefficients() {
        let basis = synthetic_basis();
        let traj = apply_blendshapes(&basis, &BlendshapeSequence::zeros(3)).unwrap();
        for f in traj.outer_iter() {
            assert_eq!(f, basis.neutral.vertices);
        }
        let k = 17;
        let mut c = Array2::zeros((1, NUM_CHANNELS));
        c[[0, k]] = 1.0;
        let traj = apply_blendshapes(&basis, &BlendshapeSequence::new(c).unwrap()).unwrap();
        assert!(
            max_abs_diff(
                &traj.index_axis(ndarray::Axis(0), 0).to_owned(),
                &basis.templates[k].vertices
            ) < 1e-15
        );
    }

    #[test]
    fn random_coefficients_match_loop() {
        let basis = synthetic_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Array2::from_shape_simple_fn((4, NUM_CHANNELS), || rng.random::<f64>());
        let traj = apply_blendshapes(&basis, &BlendshapeSequence::new(c.clone()).unwrap()).unwrap();
        let n = &basis.neutral.vertices;
        for t in 0..4 {
            for i in 0..n.nrows() {
                for d in 0..3 {
                    let mut x = n[[i, d]];
                    for k in 0..NUM_CHANNELS {
                        x += c[[t, k]] * (basis.templates[k].vertices[[i, d]] - n[[i, d]]);
                    }
                    assert!((traj[[t, i, d]] - x).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn basis_topology_is_checked() {
        let mut b = synthetic_basis();
        b.templates.pop();
        assert!(matches!(b.validate(), Err(Error::BadBasis(_))));
        let mut b = synthetic_basis();
        b.templates[3].triangles.swap(0, 1);
        assert!(matches!(b.validate(), Err(Error::BadBasis(_))));
    }

    #[test]
    fn basis_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = synthetic_basis();
        b.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("bs_051.obj").exists());
        let back = BlendshapeBasis::load_dir(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn templates_leave_anchor_still() {
        let b = synthetic_basis();
        for t in &b.templates {
            for d in 0..3 {
                assert_eq!(t.vertices[[ANCHOR, d]], b.neutral.vertices[[ANCHOR, d]]);
            }
        }
        b.neutral.check_nondegenerate().unwrap();
        for mask in [LIP_MASK, EYE_FOREHEAD_MASK, UPPER_FACE_MASK] {
            assert!(!b.neutral.region_masks[mask].is_empty(), "{mask}");
        }
    }

    #[test]
    fn identity_transfer_on_face() {
        let src = synthetic_face();
        let mut tgt = synthetic_face();
        tgt.vertices.column_mut(0).mapv_inplace(|x| 1.3 * x);
        let corr: Vec<usize> = (0..src.num_triangles()).collect();
        let out = deformation_transfer(&src, &src, &tgt, &corr).unwrap();
        assert!(max_abs_diff(&out.vertices, &tgt.vertices) < 1e-8);
    }

    #[test]
    fn target_face_is_valid_transfer_target() {
        let src = synthetic_basis();
        let tgt = synthetic_target_face();
        let corr: Vec<usize> = (0..tgt.num_triangles()).collect();
        let out = build_templates(&src, &tgt, &corr).unwrap();
        assert_eq!(out.templates.len(), NUM_CHANNELS);
        let single = deformation_transfer(&src.neutral, &src.templates[5], &tgt, &corr).unwrap();
        assert_eq!(single.vertices, out.templates[5].vertices);
    }

    #[test]
    fn solved_objective_beats_rest_guess() {
        let basis = synthetic_basis();
        let tgt = synthetic_face();
        let corr: Vec<usize> = (0..tgt.num_triangles()).collect();
        let solver = TransferSolver::new(&tgt, &corr).unwrap();
        let s = triangle_transforms(&basis.neutral, &basis.templates[24]).unwrap();
        let (x, f) = solver.solve(&s).unwrap();
        let solved = solver.objective(&s, &x, &f).unwrap();
        let guess = solver
            .objective(&s, &tgt.vertices, &fourth_vertices(&tgt).unwrap())
            .unwrap();
        assert!(solved <= guess);
        assert!(guess > 0.0);
    }
}
