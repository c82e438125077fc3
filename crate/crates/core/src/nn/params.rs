//! Named parameter arrays and the on-disk weight format.
//!
//! The weight format is a text manifest plus a raw little-endian blob:
//!
//! ```text
//! vlo-weights 1
//! seed 7
//! blob model.bin
//! tensor image_pyramid.level0.conv1.weight 4x3x3x3 f32 0
//! tensor loss.k_x scalar f64 432
//! ```
//!
//! Tensors whose values are all exactly representable as `f32` are stored as
//! `f32`; everything else is stored as `f64`, so saving and loading is
//! always bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, VloError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(shape_err(format!("parameter {name}"), n, data.len()));
        }
        self.tensors.insert(
            name,
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    /// Uniform init in `[-s, s]`, `s = scale / sqrt(fan_in)`. Values are
    /// rounded to `f32` precision so a fresh store serializes compactly.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let s = scale / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.random_range(-1.0..=1.0) * s) as f32 as f64)
            .collect();
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| VloError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| VloError::MissingParam(name.to_string()))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(&mut self.get_mut(name)?.data)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.data
            .first()
            .copied()
            .filter(|_| t.data.len() == 1)
            .ok_or_else(|| shape_err(format!("scalar {name}"), 1, t.data.len()))
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.data.len() != 1 {
            return Err(shape_err(format!("scalar {name}"), 1, t.data.len()));
        }
        t.data[0] = v;
        Ok(())
    }

    /// Adds `delta` into the named tensor (gradient accumulation).
    pub fn accumulate(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.data.len() != delta.len() {
            return Err(shape_err(format!("accumulate {name}"), t.data.len(), delta.len()));
        }
        for (a, d) in t.data.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn accumulate_at(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let t = self.get_mut(name)?;
        let len = t.data.len();
        let slot = t
            .data
            .get_mut(index)
            .ok_or_else(|| shape_err(format!("accumulate {name}"), format!("< {len}"), index))?;
        *slot += delta;
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `self` has exactly the names and shapes of `expected`.
    pub fn validate_against(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in &expected.tensors {
            let got = self.get(name)?;
            if got.shape != t.shape {
                return Err(shape_err(format!("parameter {name}"), format!("{:?}", t.shape), format!("{:?}", got.shape)));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.tensors.contains_key(*k)) {
            return Err(VloError::InvalidInput(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Writes `<manifest>` and a sibling `.bin` blob.
    pub fn save(&self, manifest: &Path) -> Result<PathBuf> {
        let blob_path = manifest.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| VloError::InvalidInput(format!("bad weight path {}", manifest.display())))?
            .to_string();
        let mut text = format!("vlo-weights 1\nseed {}\nblob {}\n", self.seed, blob_name);
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let exact_f32 = t.data.iter().all(|v| (*v as f32) as f64 == *v || v.is_nan());
            let dtype = if exact_f32 { "f32" } else { "f64" };
            let shape = if t.shape.is_empty() {
                "scalar".to_string()
            } else {
                t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            text.push_str(&format!("tensor {name} {shape} {dtype} {}\n", blob.len()));
            for v in &t.data {
                if exact_f32 {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                } else {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(manifest, text)?;
        fs::write(&blob_path, blob)?;
        Ok(blob_path)
    }

    pub fn load(manifest: &Path) -> Result<ParamStore> {
        let text = fs::read_to_string(manifest).map_err(|e| VloError::Load {
            path: manifest.to_path_buf(),
            reason: e.to_string(),
        })?;
        let perr = |line: usize, reason: String| VloError::Parse {
            path: manifest.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "vlo-weights 1")) => {}
            _ => return Err(perr(1, "missing `vlo-weights 1` header".into())),
        }
        let mut seed = None;
        let mut blob = None;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                [] => continue,
                ["seed", s] => seed = Some(s.parse::<u64>().map_err(|e| perr(i + 1, e.to_string()))?),
                ["blob", b] => blob = Some(b.to_string()),
                ["tensor", name, shape, dtype, offset] => {
                    let shape: Vec<usize> = if *shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| perr(i + 1, e.to_string()))?
                    };
                    let width = match *dtype {
                        "f32" => 4,
                        "f64" => 8,
                        other => return Err(perr(i + 1, format!("unsupported dtype `{other}`"))),
                    };
                    let offset = offset.parse::<usize>().map_err(|e| perr(i + 1, e.to_string()))?;
                    entries.push((name.to_string(), shape, width, offset));
                }
                _ => return Err(perr(i + 1, format!("unrecognized line `{line}`"))),
            }
        }
        let seed = seed.ok_or_else(|| perr(0, "missing seed".into()))?;
        let blob_name = blob.ok_or_else(|| perr(0, "missing blob".into()))?;
        let blob_path = manifest.parent().unwrap_or(Path::new(".")).join(blob_name);
        let bytes = fs::read(&blob_path).map_err(|e| VloError::Load {
            path: blob_path.clone(),
            reason: e.to_string(),
        })?;
        let mut store = ParamStore::new(seed);
        for (name, shape, width, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset + n * width;
            if end > bytes.len() {
                return Err(VloError::Load {
                    path: blob_path.clone(),
                    reason: format!("tensor {name} needs bytes {offset}..{end}, blob has {}", bytes.len()),
                });
            }
            let raw = &bytes[offset..end];
            let data = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect()
            };
            store.tensors.insert(name, Tensor { shape, data });
        }
        Ok(store)
    }
}
