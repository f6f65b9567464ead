//! Named parameter storage, initialization, checkpoint archives and Adam.
//!
//! Parameter values are kept exactly representable as `f32` so that a
//! checkpoint written with 32-bit floats reloads bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tape::{Grads, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, frozen: bool) {
        self.params.insert(
            name.into(),
            Param {
                value: value.mapv(round_f32),
                frozen,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Mat {
        &self.params[name].value
    }

    /// Overwrite a value (rounded to f32 precision).
    pub fn set(&mut self, name: &str, value: Mat) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(p.value.dim(), value.dim(), "shape change for `{name}`");
        p.value = value.mapv(round_f32);
    }

    /// Overwrite a value without f32 rounding. Used for finite-difference
    /// probes; values set this way do not survive a checkpoint bit-exactly.
    pub fn set_exact(&mut self, name: &str, value: Mat) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(p.value.dim(), value.dim(), "shape change for `{name}`");
        p.value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// Drop every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|name, _| !name.starts_with(prefix));
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = false;
            }
        }
    }

    /// Write every parameter to a safetensors archive (row-major f32).
    /// Frozen flags travel in the archive metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(name, p)| {
                let data = p
                    .value
                    .iter()
                    .flat_map(|&v| (v as f32).to_le_bytes())
                    .collect();
                (name.clone(), data, vec![p.value.nrows(), p.value.ncols()])
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, data, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::format(0, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen: Vec<&str> = self
            .params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n.as_str())
            .collect();
        let mut meta = std::collections::HashMap::new();
        meta.insert("frozen".to_owned(), frozen.join(","));
        let out = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::format(0, e.to_string()))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, metadata) =
            SafeTensors::read_metadata(&raw).map_err(|e| Error::format(0, e.to_string()))?;
        let frozen: Vec<String> = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get("frozen"))
            .map(|s| {
                s.split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            })
            .unwrap_or_default();
        let tensors =
            SafeTensors::deserialize(&raw).map_err(|e| Error::format(0, e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 || view.shape().len() != 2 {
                return Err(Error::format(
                    0,
                    format!("tensor `{name}` is not a 2-D f32 array"),
                ));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let shape = (view.shape()[0], view.shape()[1]);
            let value = Array2::from_shape_vec(shape, values)
                .map_err(|e| Error::format(0, e.to_string()))?;
            let is_frozen = frozen.iter().any(|f| f == &name);
            store.insert(name, value, is_frozen);
        }
        Ok(store)
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Glorot-uniform initialized matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.params {
            let Some(p) = store.get_mut(name) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p = round_f32(*p - self.lr * mh / (vh.sqrt() + self.eps));
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Graph;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("enc.conv.weight", xavier(&mut rng, 7, 3), true);
        store.insert("dec.head.bias", xavier(&mut rng, 1, 5), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        store.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn adam_skips_frozen_and_moves_the_rest() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -1.0]], false);
        store.insert("c", array![[2.0]], true);
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let c = g.param(&store, "c");
        let cw = g.repeat_rows(c, 1);
        let cw = g.concat_cols(&[cw, cw]);
        let y = g.mul(w, cw);
        let y = g.sum(y);
        let grads = g.backward(y);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        // First Adam step moves by ~lr against the gradient sign.
        assert!((store.value("w")[[0, 0]] - 0.9).abs() < 1e-6);
        assert_eq!(store.value("c")[[0, 0]], 2.0);
    }
}
