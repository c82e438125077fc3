//! Bilinear sampling of feature grids at continuous pixel positions.
//!
//! Coordinates are `[x, y]` = `[column, row]` in grid cells; node `(r, c)`
//! sits at `x = c, y = r`. Out-of-range coordinates are clamped to the
//! border.

use crate::tensor::FeatureGrid;

#[derive(Clone, Copy, Debug)]
struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the coordinate was inside the clamp range on each axis.
    free_x: bool,
    free_y: bool,
}

fn stencil(h: usize, w: usize, coord: [f64; 2]) -> Option<Stencil> {
    let [x, y] = coord;
    if !x.is_finite() || !y.is_finite() {
        return None;
    }
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let xc = x.clamp(0.0, wm);
    let yc = y.clamp(0.0, hm);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    Some(Stencil {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: xc - x0 as f64,
        fy: yc - y0 as f64,
        free_x: x > 0.0 && x < wm,
        free_y: y > 0.0 && y < hm,
    })
}

/// Samples every coordinate; returns an `N x C` row-major matrix.
/// Non-finite coordinates yield zero rows.
pub fn bilinear_sample(grid: &FeatureGrid, coords: &[[f64; 2]]) -> Vec<f64> {
    let c = grid.c;
    let mut out = vec![0.0; coords.len() * c];
    for (n, coord) in coords.iter().enumerate() {
        let Some(s) = stencil(grid.h, grid.w, *coord) else {
            continue;
        };
        let row = &mut out[n * c..(n + 1) * c];
        let (v00, v01) = (grid.pixel(s.y0, s.x0), grid.pixel(s.y0, s.x1));
        let (v10, v11) = (grid.pixel(s.y1, s.x0), grid.pixel(s.y1, s.x1));
        for ch in 0..c {
            let top = (1.0 - s.fx) * v00[ch] + s.fx * v01[ch];
            let bottom = (1.0 - s.fx) * v10[ch] + s.fx * v11[ch];
            row[ch] = (1.0 - s.fy) * top + s.fy * bottom;
        }
    }
    out
}

/// Adjoint of [`bilinear_sample`]: returns the grid adjoint and the
/// coordinate adjoint (zero along clamped axes).
pub fn bilinear_backward(grid: &FeatureGrid, coords: &[[f64; 2]], dout: &[f64]) -> (FeatureGrid, Vec<[f64; 2]>) {
    let c = grid.c;
    let mut dgrid = FeatureGrid::zeros(grid.h, grid.w, c);
    let mut dcoords = vec![[0.0; 2]; coords.len()];
    for (n, coord) in coords.iter().enumerate() {
        let Some(s) = stencil(grid.h, grid.w, *coord) else {
            continue;
        };
        let g = &dout[n * c..(n + 1) * c];
        let weights = [
            ((s.y0, s.x0), (1.0 - s.fy) * (1.0 - s.fx)),
            ((s.y0, s.x1), (1.0 - s.fy) * s.fx),
            ((s.y1, s.x0), s.fy * (1.0 - s.fx)),
            ((s.y1, s.x1), s.fy * s.fx),
        ];
        for ((r, col), wgt) in weights {
            let base = (r * grid.w + col) * c;
            for ch in 0..c {
                dgrid.data[base + ch] += wgt * g[ch];
            }
        }
        let (v00, v01) = (grid.pixel(s.y0, s.x0), grid.pixel(s.y0, s.x1));
        let (v10, v11) = (grid.pixel(s.y1, s.x0), grid.pixel(s.y1, s.x1));
        for ch in 0..c {
            if s.free_x {
                dcoords[n][0] += g[ch] * ((1.0 - s.fy) * (v01[ch] - v00[ch]) + s.fy * (v11[ch] - v10[ch]));
            }
            if s.free_y {
                dcoords[n][1] += g[ch]
                    * ((1.0 - s.fx) * (v10[ch] - v00[ch]) + s.fx * (v11[ch] - v01[ch]));
            }
        }
    }
    (dgrid, dcoords)
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
    fn node_coordinates_return_node_values_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_grid(&mut rng, 4, 6, 3);
        for r in 0..4 {
            for c in 0..6 {
                let v = bilinear_sample(&g, &[[c as f64, r as f64]]);
                assert_eq!(v.as_slice(), g.pixel(r, c));
            }
        }
    }

    #[test]
    fn constant_grid_midpoint() {
        let g = FeatureGrid::from_vec(3, 3, 2, vec![0.75; 18]).unwrap();
        let v = bilinear_sample(&g, &[[0.5, 1.0], [1.5, 1.5], [-4.0, 9.0]]);
        assert!(v.iter().all(|x| (x - 0.75).abs() < 1e-15));
    }

    #[test]
    fn matches_four_neighbour_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = random_grid(&mut rng, 7, 9, 2);
        for _ in 0..200 {
            let x = rng.random_range(0.0..8.0);
            let y = rng.random_range(0.0..6.0);
            let v = bilinear_sample(&g, &[[x, y]]);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (ax, ay) = (x - x0 as f64, y - y0 as f64);
            for ch in 0..2 {
                let want = g.at(y0, x0, ch) * (1.0 - ax) * (1.0 - ay)
                    + g.at(y0, x0 + 1, ch) * ax * (1.0 - ay)
                    + g.at(y0 + 1, x0, ch) * (1.0 - ax) * ay
                    + g.at(y0 + 1, x0 + 1, ch) * ax * ay;
                assert!((v[ch] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_coordinate_gives_zero_row() {
        let g = FeatureGrid::from_vec(2, 2, 1, vec![1.0; 4]).unwrap();
        assert_eq!(bilinear_sample(&g, &[[f64::NAN, 0.0]]), vec![0.0]);
    }

    proptest::proptest! {
        #[test]
        fn piecewise_linear_within_a_cell(seed in 0u64..5000, lambda in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, 5, 5, 2);
            let (cx, cy) = (rng.random_range(0..4) as f64, rng.random_range(0..4) as f64);
            // Two points inside the same cell on a common horizontal line.
            let y = cy + rng.random_range(0.0..1.0);
            let a = [cx + rng.random_range(0.0..1.0), y];
            let b = [cx + rng.random_range(0.0..1.0), y];
            let m = [lambda * a[0] + (1.0 - lambda) * b[0], y];
            let va = bilinear_sample(&g, &[a]);
            let vb = bilinear_sample(&g, &[b]);
            let vm = bilinear_sample(&g, &[m]);
            for ch in 0..2 {
                proptest::prop_assert!((vm[ch] - (lambda * va[ch] + (1.0 - lambda) * vb[ch])).abs() < 1e-9);
            }
        }
    }
}
