//! Adaptive global fusion of point features with local fused features.
//!
//! ```text
//! F_L' = align(F_L)
//! A_P  = sigmoid(gate_point(F_P)),  A_L = sigmoid(gate_local(F_L'))
//! F_G  = (A_P * F_P + A_L * F_L') / (A_P + A_L)
//! ```
//!
//! Rows without an image correspondence pass `F_P` through unchanged.
//! Parameters live under `global_fuser.level{l}.*`.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::nn::layers::{dense_dims, init_dense, init_mlp, mlp_backward, mlp_forward, sigmoid, MlpCache};
use crate::nn::ParamStore;
use crate::projection::PseudoImage;
use crate::tensor::FeatureGrid;

const DENOM_EPS: f64 = 1e-12;

pub fn prefix(level: usize) -> String {
    format!("global_fuser.level{level}")
}

fn names(level: usize) -> (String, String, String) {
    let p = prefix(level);
    (format!("{p}.align"), format!("{p}.gate_point"), format!("{p}.gate_local"))
}

/// `local_channels` is C (image branch), `point_channels` is D.
pub fn init_global_fuser(params: &mut ParamStore, level: usize, local_channels: usize, point_channels: usize) {
    let (align, gp, gl) = names(level);
    let d = point_channels;
    let hidden = (d / 2).max(1);
    init_dense(params, &align, local_channels, d, 1.0);
    init_mlp(params, &gp, &[d, hidden, d], 1.0);
    init_mlp(params, &gl, &[d, hidden, d], 1.0);
}

#[derive(Clone, Debug)]
pub struct GlobalFuseCache {
    pub level: usize,
    /// Indices of the fused (mask-true) rows.
    rows: Vec<usize>,
    fp: Vec<f64>,
    fl_aligned: Vec<f64>,
    fl_input: Vec<f64>,
    ap: Vec<f64>,
    al: Vec<f64>,
    local_channels: usize,
    gp_cache: MlpCache,
    gl_cache: MlpCache,
}

impl GlobalFuseCache {
    /// Indices of the rows that were fused.
    pub fn fused_rows(&self) -> &[usize] {
        &self.rows
    }

    /// `align(F_L)` for the fused rows.
    pub fn aligned_local(&self) -> &[f64] {
        &self.fl_aligned
    }

    /// `(A_P, A_L)` for the fused rows.
    pub fn gates(&self) -> (&[f64], &[f64]) {
        (&self.ap, &self.al)
    }
}

fn take_rows(x: &[f64], c: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| x[r * c..(r + 1) * c].iter().copied()).collect()
}

/// Row form of the fusion: `f_p` is `N x D`, `f_l` is `N x C`, `mask` has
/// `N` flags. Returns `N x D`.
pub fn global_fuse_rows(
    params: &ParamStore,
    level: usize,
    f_p: &[f64],
    f_l: &[f64],
    mask: &[bool],
) -> Result<(Vec<f64>, GlobalFuseCache)> {
    let (align, gp, gl) = names(level);
    let (d, c) = dense_dims(params, &align)?;
    let n = mask.len();
    if f_p.len() != n * d {
        return Err(shape_err("global fuse F_P", n * d, f_p.len()));
    }
    if f_l.len() != n * c {
        return Err(shape_err("global fuse F_L", n * c, f_l.len()));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let m = rows.len();
    let fp = take_rows(f_p, d, &rows);
    let fl_input = take_rows(f_l, c, &rows);
    let fl_aligned = crate::nn::layers::dense(params, &align, &fl_input, m)?;
    let (zp, gp_cache) = mlp_forward(params, &gp, &fp, m)?;
    let (zl, gl_cache) = mlp_forward(params, &gl, &fl_aligned, m)?;
    let ap: Vec<f64> = zp.par_iter().map(|z| sigmoid(*z)).collect();
    let al: Vec<f64> = zl.par_iter().map(|z| sigmoid(*z)).collect();

    let mut out = f_p.to_vec();
    for (k, &r) in rows.iter().enumerate() {
        for ch in 0..d {
            let j = k * d + ch;
            out[r * d + ch] = (ap[j] * fp[j] + al[j] * fl_aligned[j]) / (ap[j] + al[j]).max(DENOM_EPS);
        }
    }
    Ok((
        out,
        GlobalFuseCache {
            level,
            rows,
            fp,
            fl_aligned,
            fl_input,
            ap,
            al,
            local_channels: c,
            gp_cache,
            gl_cache,
        },
    ))
}

/// Adjoint of [`global_fuse_rows`]; returns `(dF_P, dF_L)`.
pub fn global_fuse_rows_backward(
    params: &ParamStore,
    cache: &GlobalFuseCache,
    dout: &[f64],
    grads: &mut ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (align, gp, gl) = names(cache.level);
    let (d, _) = dense_dims(params, &align)?;
    let c = cache.local_channels;
    let n = dout.len() / d;
    let m = cache.rows.len();
    let mut dfp_all = dout.to_vec();
    let mut dfl_all = vec![0.0; n * c];

    let mut dfp = vec![0.0; m * d];
    let mut dfl = vec![0.0; m * d];
    let mut dzp = vec![0.0; m * d];
    let mut dzl = vec![0.0; m * d];
    for (k, &r) in cache.rows.iter().enumerate() {
        for ch in 0..d {
            let j = k * d + ch;
            let g = dout[r * d + ch];
            let (ap, al, fp, fl) = (cache.ap[j], cache.al[j], cache.fp[j], cache.fl_aligned[j]);
            let s = (ap + al).max(DENOM_EPS);
            let fg = (ap * fp + al * fl) / s;
            dfp[j] = g * ap / s;
            dfl[j] = g * al / s;
            let dap = g * (fp - fg) / s;
            let dal = g * (fl - fg) / s;
            dzp[j] = dap * ap * (1.0 - ap);
            dzl[j] = dal * al * (1.0 - al);
        }
    }
    let dfp_gate = mlp_backward(params, &gp, &cache.gp_cache, &dzp, grads)?;
    let dfl_gate = mlp_backward(params, &gl, &cache.gl_cache, &dzl, grads)?;
    for j in 0..m * d {
        dfp[j] += dfp_gate[j];
        dfl[j] += dfl_gate[j];
    }
    let dfl_in = crate::nn::layers::dense_backward(params, &align, &cache.fl_input, m, &dfl, grads)?;
    for (k, &r) in cache.rows.iter().enumerate() {
        dfp_all[r * d..(r + 1) * d].copy_from_slice(&dfp[k * d..(k + 1) * d]);
        dfl_all[r * c..(r + 1) * c].copy_from_slice(&dfl_in[k * c..(k + 1) * c]);
    }
    Ok((dfp_all, dfl_all))
}

/// Grid form: fuses the occupied cells of `pseudo` and returns `N x D` rows
/// in row-major cell order. `fusion_mask` holds one flag per grid cell.
pub fn global_fuse(
    params: &ParamStore,
    level: usize,
    f_p: &FeatureGrid,
    f_l: &FeatureGrid,
    pseudo: &PseudoImage,
    fusion_mask: &[bool],
) -> Result<Vec<f64>> {
    if f_p.h != f_l.h || f_p.w != f_l.w || f_p.h != pseudo.height || f_p.w != pseudo.width {
        return Err(shape_err(
            "global fuse grids",
            format!("{}x{}", pseudo.height, pseudo.width),
            format!("{}x{} / {}x{}", f_p.h, f_p.w, f_l.h, f_l.w),
        ));
    }
    if fusion_mask.len() != f_p.cells() {
        return Err(shape_err("global fuse mask", f_p.cells(), fusion_mask.len()));
    }
    let cells: Vec<usize> = pseudo.occupied_cells().into_iter().map(|(cell, _)| cell).collect();
    let fp = take_rows(&f_p.data, f_p.c, &cells);
    let fl = take_rows(&f_l.data, f_l.c, &cells);
    let mask: Vec<bool> = cells.iter().map(|&cell| fusion_mask[cell]).collect();
    Ok(global_fuse_rows(params, level, &fp, &fl, &mask)?.0)
}
