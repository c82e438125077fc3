//! Four-level convolutional pyramids for the camera image and for the
//! xyz pseudo-image. Each level is a stride-2 3x3 convolution followed by a
//! stride-1 3x3 convolution, both with leaky-ReLU; the point branch uses the
//! occupancy-aware convolution so empty cells never leak into features.

use super::conv::{conv2d_backward, conv2d_grid, conv2d_masked, init_conv, ConvMasks};
use super::layers::{leaky_relu, leaky_relu_grad};
use super::params::ParamStore;
use crate::config::LEVELS;
use crate::error::{shape_err, Result, VloError};
use crate::projection::PseudoImage;
use crate::tensor::{FeatureGrid, PointFeatureSet};

const KERNEL: usize = 3;

pub fn image_conv_name(level: usize, which: usize) -> String {
    format!("image_pyramid.level{level}.conv{which}")
}

pub fn point_conv_name(level: usize, which: usize) -> String {
    format!("point_pyramid.level{level}.conv{which}")
}

pub fn init_image_pyramid(params: &mut ParamStore, channels: &[usize; LEVELS]) {
    let mut cin = 3;
    for (l, &c) in channels.iter().enumerate() {
        init_conv(params, &image_conv_name(l, 1), cin, c, KERNEL);
        init_conv(params, &image_conv_name(l, 2), c, c, KERNEL);
        cin = c;
    }
}

pub fn init_point_pyramid(params: &mut ParamStore, channels: &[usize; LEVELS]) {
    let mut cin = 3;
    for (l, &c) in channels.iter().enumerate() {
        init_conv(params, &point_conv_name(l, 1), cin, c, KERNEL);
        init_conv(params, &point_conv_name(l, 2), c, c, KERNEL);
        cin = c;
    }
}

fn activate(pre: &FeatureGrid) -> FeatureGrid {
    FeatureGrid {
        h: pre.h,
        w: pre.w,
        c: pre.c,
        data: pre.data.iter().map(|v| leaky_relu(*v)).collect(),
    }
}

fn activate_backward(pre: &FeatureGrid, d: &mut FeatureGrid) {
    for (g, p) in d.data.iter_mut().zip(&pre.data) {
        *g *= leaky_relu_grad(*p);
    }
}

#[derive(Clone, Debug)]
struct LevelCache {
    input: FeatureGrid,
    pre1: FeatureGrid,
    act1: FeatureGrid,
    pre2: FeatureGrid,
}

#[derive(Clone, Debug)]
pub struct ImagePyramidCache {
    levels: Vec<LevelCache>,
}

/// Runs the image pyramid on a padded `H x W x 3` image. Level `l` has stride
/// `2^(l+1)`.
pub fn image_pyramid(
    params: &ParamStore,
    image: &FeatureGrid,
    pad: (usize, usize),
) -> Result<(Vec<FeatureGrid>, ImagePyramidCache)> {
    if image.h != pad.0 || image.w != pad.1 || image.c != 3 {
        return Err(VloError::InvalidInput(format!(
            "image must be padded to {}x{}x3, got {}x{}x{}",
            pad.0, pad.1, image.h, image.w, image.c
        )));
    }
    let mut levels = Vec::with_capacity(LEVELS);
    let mut cache = Vec::with_capacity(LEVELS);
    let mut x = image.clone();
    for l in 0..LEVELS {
        let pre1 = conv2d_grid(params, &image_conv_name(l, 1), &x, 2)?;
        let act1 = activate(&pre1);
        let pre2 = conv2d_grid(params, &image_conv_name(l, 2), &act1, 1)?;
        let out = activate(&pre2);
        cache.push(LevelCache {
            input: x,
            pre1,
            act1,
            pre2,
        });
        levels.push(out.clone());
        x = out;
    }
    Ok((levels, ImagePyramidCache { levels: cache }))
}

/// Adjoint of [`image_pyramid`] given per-level output adjoints.
pub fn image_pyramid_backward(
    params: &ParamStore,
    cache: &ImagePyramidCache,
    dlevels: &[FeatureGrid],
    grads: &mut ParamStore,
) -> Result<()> {
    if dlevels.len() != LEVELS {
        return Err(shape_err("image pyramid adjoints", LEVELS, dlevels.len()));
    }
    let mut carry: Option<FeatureGrid> = None;
    for l in (0..LEVELS).rev() {
        let lc = &cache.levels[l];
        let mut d = dlevels[l].clone();
        if let Some(c) = carry.take() {
            for (a, b) in d.data.iter_mut().zip(&c.data) {
                *a += b;
            }
        }
        activate_backward(&lc.pre2, &mut d);
        let mut d1 = conv2d_backward(params, &image_conv_name(l, 2), &lc.act1, 1, None, &d, grads)?;
        activate_backward(&lc.pre1, &mut d1);
        let dx = conv2d_backward(params, &image_conv_name(l, 1), &lc.input, 2, None, &d1, grads)?;
        carry = Some(dx);
    }
    Ok(())
}

/// One level of the point pyramid.
#[derive(Clone, Debug)]
pub struct PointLevel {
    /// Decimated pseudo-image whose occupied cells are this level's points.
    pub pseudo: PseudoImage,
    /// Dense features, zero on unoccupied cells.
    pub grid: FeatureGrid,
    /// Features of the occupied cells (row-major order) with their raw xyz.
    pub points: PointFeatureSet,
    /// Flat cell index of each point row.
    pub cells: Vec<usize>,
    /// Source-scan index of each point row.
    pub scan_index: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PointPyramidCache {
    levels: Vec<(LevelCache, Vec<bool>, Vec<bool>)>,
}

fn xyz_grid(pseudo: &PseudoImage) -> FeatureGrid {
    FeatureGrid {
        h: pseudo.height,
        w: pseudo.width,
        c: 3,
        data: pseudo.xyz.iter().flat_map(|p| p.iter().copied()).collect(),
    }
}

pub fn point_pyramid(params: &ParamStore, pseudo: &PseudoImage) -> Result<(Vec<PointLevel>, PointPyramidCache)> {
    if pseudo.occupied_count() == 0 {
        return Err(VloError::InvalidInput("pseudo-image has no occupied cells".into()));
    }
    let mut levels = Vec::with_capacity(LEVELS);
    let mut cache = Vec::with_capacity(LEVELS);
    let mut x = xyz_grid(pseudo);
    let mut prev = pseudo.clone();
    for l in 0..LEVELS {
        let cur = prev.decimate();
        let in_occ = prev.occupancy();
        let occ = cur.occupancy();
        let pre1 = conv2d_masked(params, &point_conv_name(l, 1), &x, 2, ConvMasks { input: &in_occ, output: &occ })?;
        let act1 = activate(&pre1);
        let pre2 = conv2d_masked(params, &point_conv_name(l, 2), &act1, 1, ConvMasks { input: &occ, output: &occ })?;
        let out = activate(&pre2);

        let occupied = cur.occupied_cells();
        let c = out.c;
        let mut features = Vec::with_capacity(occupied.len() * c);
        for &(cell, _) in &occupied {
            features.extend_from_slice(&out.data[cell * c..(cell + 1) * c]);
        }
        let points = PointFeatureSet::new(c, features, occupied.iter().map(|&(cell, _)| cur.xyz[cell]).collect())?;
        cache.push((
            LevelCache {
                input: x,
                pre1,
                act1,
                pre2,
            },
            in_occ,
            occ,
        ));
        levels.push(PointLevel {
            grid: out.clone(),
            points,
            cells: occupied.iter().map(|&(cell, _)| cell).collect(),
            scan_index: occupied.iter().map(|&(_, i)| i).collect(),
            pseudo: cur.clone(),
        });
        x = out;
        prev = cur;
    }
    Ok((levels, PointPyramidCache { levels: cache }))
}

/// Adjoint of [`point_pyramid`] given per-level adjoints of the point rows.
pub fn point_pyramid_backward(
    params: &ParamStore,
    levels: &[PointLevel],
    cache: &PointPyramidCache,
    dpoints: &[Vec<f64>],
    grads: &mut ParamStore,
) -> Result<()> {
    if dpoints.len() != LEVELS || levels.len() != LEVELS {
        return Err(shape_err("point pyramid adjoints", LEVELS, dpoints.len()));
    }
    let mut carry: Option<FeatureGrid> = None;
    for l in (0..LEVELS).rev() {
        let (lc, in_occ, occ) = &cache.levels[l];
        let lvl = &levels[l];
        let c = lvl.grid.c;
        if dpoints[l].len() != lvl.cells.len() * c {
            return Err(shape_err(format!("point level {l} adjoint"), lvl.cells.len() * c, dpoints[l].len()));
        }
        let mut d = carry.take().unwrap_or_else(|| FeatureGrid::zeros(lvl.grid.h, lvl.grid.w, c));
        for (row, &cell) in lvl.cells.iter().enumerate() {
            for ch in 0..c {
                d.data[cell * c + ch] += dpoints[l][row * c + ch];
            }
        }
        activate_backward(&lc.pre2, &mut d);
        let mut d1 = conv2d_backward(
            params,
            &point_conv_name(l, 2),
            &lc.act1,
            1,
            Some(ConvMasks { input: occ, output: occ }),
            &d,
            grads,
        )?;
        activate_backward(&lc.pre1, &mut d1);
        let dx = conv2d_backward(
            params,
            &point_conv_name(l, 1),
            &lc.input,
            2,
            Some(ConvMasks { input: in_occ, output: occ }),
            &d1,
            grads,
        )?;
        carry = Some(dx);
    }
    Ok(())
}
