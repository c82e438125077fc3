use crate::error::{shape_err, Result, VloError};
use crate::geometry::Vec3;

/// Dense `h x w x c` feature map stored row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err("feature grid", h * w * c, data.len()));
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, r: usize, col: usize, ch: usize) -> usize {
        (r * self.w + col) * self.c + ch
    }

    #[inline]
    pub fn at(&self, r: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(r, col, ch)]
    }

    pub fn pixel(&self, r: usize, col: usize) -> &[f64] {
        let s = (r * self.w + col) * self.c;
        &self.data[s..s + self.c]
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(VloError::InvalidInput(format!(
                "empty feature grid {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        if self.data.len() != self.h * self.w * self.c {
            return Err(shape_err("feature grid", self.h * self.w * self.c, self.data.len()));
        }
        if !self.is_finite() {
            return Err(VloError::InvalidInput("non-finite feature grid".into()));
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of the raw bits, used for golden values.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.data)
    }
}

pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Per-point features with the 3D (or pixel) coordinates they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatureSet {
    pub channels: usize,
    /// `len * channels` values, row-major.
    pub features: Vec<f64>,
    pub coords: Vec<Vec3>,
    pub mask: Option<Vec<bool>>,
}

impl PointFeatureSet {
    pub fn new(channels: usize, features: Vec<f64>, coords: Vec<Vec3>) -> Result<Self> {
        let set = Self {
            channels,
            features,
            coords,
            mask: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(VloError::InvalidInput("point features need at least one channel".into()));
        }
        if self.features.len() != self.coords.len() * self.channels {
            return Err(shape_err(
                "point features",
                self.coords.len() * self.channels,
                self.features.len(),
            ));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.coords.len() {
                return Err(shape_err("point mask", self.coords.len(), m.len()));
            }
        }
        Ok(())
    }

    /// Rows whose mask flag is set, in order, with their original indices.
    pub fn select(&self, keep: &[bool]) -> (PointFeatureSet, Vec<usize>) {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, k)| k.then_some(i))
            .collect();
        let mut features = Vec::with_capacity(idx.len() * self.channels);
        for &i in &idx {
            features.extend_from_slice(self.row(i));
        }
        let set = PointFeatureSet {
            channels: self.channels,
            features,
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            mask: None,
        };
        (set, idx)
    }
}
