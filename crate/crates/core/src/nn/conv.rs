//! 2D cross-correlation over feature grids with "same" padding, plus the
//! occupancy-aware variant used on sparse pseudo-images.
//!
//! Weights are `name.weight` with shape `out x in x k x k` and `name.bias`
//! with shape `out`.

use rayon::prelude::*;

use super::params::ParamStore;
use crate::error::{shape_err, Result};
use crate::tensor::FeatureGrid;

/// Input/output occupancy for the masked convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvMasks<'a> {
    pub input: &'a [bool],
    pub output: &'a [bool],
}

pub fn conv_out_dim(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

fn pad_before(input: usize, output: usize, k: usize, stride: usize) -> usize {
    ((output - 1) * stride + k).saturating_sub(input) / 2
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvShape {
    fn new(params: &ParamStore, name: &str, grid: &FeatureGrid, stride: usize) -> Result<Self> {
        let wt = params.get(&format!("{name}.weight"))?;
        let [cout, cin, k, k2] = wt.shape.as_slice() else {
            return Err(shape_err(format!("{name}.weight"), "4-d", format!("{:?}", wt.shape)));
        };
        if k != k2 || k % 2 == 0 {
            return Err(shape_err(format!("{name}.weight"), "odd square kernel", format!("{k}x{k2}")));
        }
        if *cin != grid.c {
            return Err(shape_err(format!("{name} input channels"), cin, grid.c));
        }
        if stride == 0 {
            return Err(shape_err(format!("{name} stride"), ">= 1", 0));
        }
        let ho = conv_out_dim(grid.h, stride);
        let wo = conv_out_dim(grid.w, stride);
        Ok(Self {
            cout: *cout,
            cin: *cin,
            k: *k,
            stride,
            h: grid.h,
            w: grid.w,
            ho,
            wo,
            pad_t: pad_before(grid.h, ho, *k, stride),
            pad_l: pad_before(grid.w, wo, *k, stride),
        })
    }

    /// In-bounds taps of output cell `(r, c)` as `(kr, kc, input cell)`.
    fn taps(&self, r: usize, c: usize, out: &mut Vec<(usize, usize, usize)>) {
        out.clear();
        for kr in 0..self.k {
            let ir = (r * self.stride + kr) as isize - self.pad_t as isize;
            if ir < 0 || ir >= self.h as isize {
                continue;
            }
            for kc in 0..self.k {
                let ic = (c * self.stride + kc) as isize - self.pad_l as isize;
                if ic < 0 || ic >= self.w as isize {
                    continue;
                }
                out.push((kr, kc, ir as usize * self.w + ic as usize));
            }
        }
    }

    /// Tap set after masking plus the renormalization factor.
    fn active_taps(&self, r: usize, c: usize, masks: Option<ConvMasks>, taps: &mut Vec<(usize, usize, usize)>) -> f64 {
        self.taps(r, c, taps);
        match masks {
            None => 1.0,
            Some(m) => {
                let valid = taps.len();
                taps.retain(|t| m.input[t.2]);
                if taps.is_empty() {
                    0.0
                } else {
                    valid as f64 / taps.len() as f64
                }
            }
        }
    }
}

fn check_masks(shape: &ConvShape, masks: Option<ConvMasks>) -> Result<()> {
    if let Some(m) = masks {
        if m.input.len() != shape.h * shape.w {
            return Err(shape_err("conv input mask", shape.h * shape.w, m.input.len()));
        }
        if m.output.len() != shape.ho * shape.wo {
            return Err(shape_err("conv output mask", shape.ho * shape.wo, m.output.len()));
        }
    }
    Ok(())
}

fn conv_impl(
    params: &ParamStore,
    name: &str,
    grid: &FeatureGrid,
    stride: usize,
    masks: Option<ConvMasks>,
) -> Result<FeatureGrid> {
    let s = ConvShape::new(params, name, grid, stride)?;
    check_masks(&s, masks)?;
    let wt = params.data(&format!("{name}.weight"))?;
    let bias = params.data(&format!("{name}.bias"))?;
    if bias.len() != s.cout {
        return Err(shape_err(format!("{name}.bias"), s.cout, bias.len()));
    }
    // Reorder to [kr][kc][in][out] so the innermost loop is contiguous.
    let mut wr = vec![0.0; wt.len()];
    for o in 0..s.cout {
        for i in 0..s.cin {
            for kr in 0..s.k {
                for kc in 0..s.k {
                    wr[((kr * s.k + kc) * s.cin + i) * s.cout + o] = wt[((o * s.cin + i) * s.k + kr) * s.k + kc];
                }
            }
        }
    }
    let mut out = FeatureGrid::zeros(s.ho, s.wo, s.cout);
    let row_len = s.wo * s.cout;
    out.data.par_chunks_mut(row_len).enumerate().for_each(|(r, orow)| {
        let mut taps = Vec::with_capacity(s.k * s.k);
        for c in 0..s.wo {
            if let Some(m) = masks {
                if !m.output[r * s.wo + c] {
                    continue;
                }
            }
            let scale = s.active_taps(r, c, masks, &mut taps);
            let y = &mut orow[c * s.cout..(c + 1) * s.cout];
            if scale == 0.0 {
                continue;
            }
            for &(kr, kc, cell) in &taps {
                let x = &grid.data[cell * s.cin..(cell + 1) * s.cin];
                let base = (kr * s.k + kc) * s.cin;
                for (i, xv) in x.iter().enumerate() {
                    if *xv == 0.0 {
                        continue;
                    }
                    let wrow = &wr[(base + i) * s.cout..(base + i + 1) * s.cout];
                    for o in 0..s.cout {
                        y[o] += wrow[o] * xv;
                    }
                }
            }
            for o in 0..s.cout {
                y[o] = y[o] * scale + bias[o];
            }
        }
    });
    Ok(out)
}

/// Plain convolution, output `ceil(h/stride) x ceil(w/stride)`.
pub fn conv2d_grid(params: &ParamStore, name: &str, grid: &FeatureGrid, stride: usize) -> Result<FeatureGrid> {
    conv_impl(params, name, grid, stride, None)
}

/// Occupancy-aware convolution: unoccupied inputs contribute nothing, the
/// sum is rescaled by `in-bounds taps / occupied taps`, and only occupied
/// output cells are computed (others are zero).
pub fn conv2d_masked(
    params: &ParamStore,
    name: &str,
    grid: &FeatureGrid,
    stride: usize,
    masks: ConvMasks,
) -> Result<FeatureGrid> {
    conv_impl(params, name, grid, stride, Some(masks))
}

/// Adjoint of [`conv2d_grid`] / [`conv2d_masked`]. Accumulates parameter
/// adjoints and returns the input adjoint.
pub fn conv2d_backward(
    params: &ParamStore,
    name: &str,
    grid: &FeatureGrid,
    stride: usize,
    masks: Option<ConvMasks>,
    dy: &FeatureGrid,
    grads: &mut ParamStore,
) -> Result<FeatureGrid> {
    let s = ConvShape::new(params, name, grid, stride)?;
    check_masks(&s, masks)?;
    if dy.h != s.ho || dy.w != s.wo || dy.c != s.cout {
        return Err(shape_err(
            format!("{name} output adjoint"),
            format!("{}x{}x{}", s.ho, s.wo, s.cout),
            format!("{}x{}x{}", dy.h, dy.w, dy.c),
        ));
    }
    let wt = params.data(&format!("{name}.weight"))?;
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; s.cout];
    let mut dx = FeatureGrid::zeros(s.h, s.w, s.cin);
    let mut taps = Vec::with_capacity(s.k * s.k);
    for r in 0..s.ho {
        for c in 0..s.wo {
            if let Some(m) = masks {
                if !m.output[r * s.wo + c] {
                    continue;
                }
            }
            let g = &dy.data[(r * s.wo + c) * s.cout..(r * s.wo + c + 1) * s.cout];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let scale = s.active_taps(r, c, masks, &mut taps);
            if scale == 0.0 {
                continue;
            }
            for o in 0..s.cout {
                db[o] += g[o];
            }
            for &(kr, kc, cell) in &taps {
                let x = &grid.data[cell * s.cin..(cell + 1) * s.cin];
                let dxc = &mut dx.data[cell * s.cin..(cell + 1) * s.cin];
                for o in 0..s.cout {
                    let go = g[o] * scale;
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..s.cin {
                        let wi = ((o * s.cin + i) * s.k + kr) * s.k + kc;
                        dw[wi] += go * x[i];
                        dxc[i] += go * wt[wi];
                    }
                }
            }
        }
    }
    grads.accumulate(&format!("{name}.weight"), &dw)?;
    grads.accumulate(&format!("{name}.bias"), &db)?;
    Ok(dx)
}

pub fn init_conv(params: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k;
    params.init_uniform(&format!("{name}.weight"), &[cout, cin, k, k], fan_in, 1.0);
    params.init_uniform(&format!("{name}.bias"), &[cout], fan_in, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
        FeatureGrid::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn one_by_one_identity_passes_through() {
        let mut p = ParamStore::new(0);
        p.insert("c.weight", &[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.insert("c.bias", &[2], vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 5, 7, 2);
        assert_eq!(conv2d_grid(&p, "c", &g, 1).unwrap(), g);
    }

    #[test]
    fn averaging_kernel_preserves_constant_interior() {
        let mut p = ParamStore::new(0);
        p.insert("c.weight", &[1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        p.insert("c.bias", &[1], vec![0.0]).unwrap();
        let g = FeatureGrid::from_vec(6, 6, 1, vec![2.5; 36]).unwrap();
        let out = conv2d_grid(&p, "c", &g, 1).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert!((out.at(r, c, 0) - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_dims_are_ceil() {
        let mut p = ParamStore::new(0);
        init_conv(&mut p, "c", 1, 1, 3);
        let g = FeatureGrid::zeros(7, 10, 1);
        let out = conv2d_grid(&p, "c", &g, 2).unwrap();
        assert_eq!((out.h, out.w), (4, 5));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut p = ParamStore::new(0);
        init_conv(&mut p, "c", 3, 2, 3);
        assert!(conv2d_grid(&p, "c", &FeatureGrid::zeros(4, 4, 2), 1).is_err());
    }

    #[test]
    fn masked_conv_with_full_occupancy_equals_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new(9);
        init_conv(&mut p, "c", 3, 4, 3);
        let g = random_grid(&mut rng, 9, 11, 3);
        for stride in [1, 2] {
            let plain = conv2d_grid(&p, "c", &g, stride).unwrap();
            let inm = vec![true; 99];
            let outm = vec![true; plain.h * plain.w];
            let masked = conv2d_masked(&p, "c", &g, stride, ConvMasks { input: &inm, output: &outm }).unwrap();
            assert_eq!(plain, masked);
        }
    }

    #[test]
    fn single_occupied_cell_sees_only_itself() {
        let mut p = ParamStore::new(4);
        init_conv(&mut p, "c", 3, 2, 3);
        let mut g = FeatureGrid::zeros(5, 5, 3);
        let mut occ = vec![false; 25];
        occ[12] = true;
        g.data[36..39].copy_from_slice(&[1.0, 2.0, 3.0]);
        let out = conv2d_masked(&p, "c", &g, 1, ConvMasks { input: &occ, output: &occ }).unwrap();
        // Output equals 9 * centre-tap response + bias.
        let w = p.data("c.weight").unwrap();
        let b = p.data("c.bias").unwrap();
        for o in 0..2 {
            let centre: f64 = (0..3).map(|i| w[((o * 3 + i) * 3 + 1) * 3 + 1] * (i as f64 + 1.0)).sum();
            assert!((out.at(2, 2, o) - (9.0 * centre + b[o])).abs() < 1e-12);
        }
        // Changing a masked-out neighbour changes nothing.
        let mut g2 = g.clone();
        g2.data[0] = 100.0;
        let out2 = conv2d_masked(&p, "c", &g2, 1, ConvMasks { input: &occ, output: &occ }).unwrap();
        assert_eq!(out, out2);
    }
}
