//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is written from the defining formulas on plain slices and
//! shares no code with the production kernels. Slow on purpose.

/// Weights of one dense layer, `out x in` row-major, plus bias.
#[derive(Clone, Debug)]
pub struct DenseRef {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseRef {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let inp = x.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| b + (0..inp).map(|i| self.weight[o * inp + i] * x[i]).sum::<f64>())
            .collect()
    }
}

/// Dense layers with leaky-ReLU (slope 0.1) between them.
pub fn brute_mlp(layers: &[DenseRef], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = l.apply(&h);
        if i + 1 < layers.len() {
            h = h.into_iter().map(|v| if v > 0.0 { v } else { 0.1 * v }).collect();
        }
    }
    h
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over rows for every column of a row-major `rows x cols` matrix.
pub fn brute_softmax(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| z[r * cols + c]).collect();
        let m = col.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = col.iter().map(|v| (v - m).exp()).sum();
        for r in 0..rows {
            out[r * cols + c] = (col[r] - m).exp() / denom;
        }
    }
    out
}

/// All indices sorted by `(squared distance, index)`, first `k` kept.
pub fn brute_knn(points: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = (0..3).map(|a| (p[a] - query[a]) * (p[a] - query[a])).sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Direct "same"-padded convolution on an `h x w x cin` grid. Weights are
/// `cout x cin x k x k`. With masks, only occupied inputs contribute, the
/// sum is rescaled by in-bounds / contributing taps, and unoccupied outputs
/// (or outputs without contributing taps) are zero.
#[allow(clippy::too_many_arguments)]
pub fn brute_conv(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    k: usize,
    stride: usize,
    masks: Option<(&[bool], &[bool])>,
) -> (Vec<f64>, usize, usize) {
    let cout = bias.len();
    let ho = (h + stride - 1) / stride;
    let wo = (w + stride - 1) / stride;
    let pad_total = |n: usize, no: usize| ((no - 1) * stride + k).saturating_sub(n);
    let (pt, pl) = (pad_total(h, ho) / 2, pad_total(w, wo) / 2);
    let mut out = vec![0.0; ho * wo * cout];
    for r in 0..ho {
        for c in 0..wo {
            if let Some((_, om)) = masks {
                if !om[r * wo + c] {
                    continue;
                }
            }
            let mut in_bounds = 0usize;
            let mut used = 0usize;
            let mut acc = vec![0.0; cout];
            for kr in 0..k {
                for kc in 0..k {
                    let ir = (r * stride + kr) as i64 - pt as i64;
                    let ic = (c * stride + kc) as i64 - pl as i64;
                    if ir < 0 || ic < 0 || ir >= h as i64 || ic >= w as i64 {
                        continue;
                    }
                    in_bounds += 1;
                    let cell = ir as usize * w + ic as usize;
                    if let Some((im, _)) = masks {
                        if !im[cell] {
                            continue;
                        }
                    }
                    used += 1;
                    for o in 0..cout {
                        for i in 0..cin {
                            acc[o] += weight[((o * cin + i) * k + kr) * k + kc] * input[cell * cin + i];
                        }
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let scale = if masks.is_some() { in_bounds as f64 / used as f64 } else { 1.0 };
            for o in 0..cout {
                out[(r * wo + c) * cout + o] = acc[o] * scale + bias[o];
            }
        }
    }
    (out, ho, wo)
}

/// Four-neighbour bilinear interpolation at `(x, y) = (col, row)` with
/// coordinates clamped to the grid.
pub fn brute_bilinear(grid: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, col: usize, ch: usize| grid[(r * w + col) * c + ch];
    (0..c)
        .map(|ch| {
            at(y0, x0, ch) * (1.0 - ax) * (1.0 - ay)
                + at(y0, x1, ch) * ax * (1.0 - ay)
                + at(y1, x0, ch) * (1.0 - ax) * ay
                + at(y1, x1, ch) * ax * ay
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Exhaustive cluster assignment. `centers` holds `(row, col)` positions on
/// an `h x w` map with `c`-channel features; `pseudo` is the flattened map.
/// Each map cell joins the most similar valid center located in the same
/// `rh x rw` region (lowest index on ties). Returns `(center, similarity)`
/// per cell.
#[allow(clippy::too_many_arguments)]
pub fn brute_cluster_assign(
    center_pos: &[(f64, f64)],
    center_feat: &[f64],
    valid: &[bool],
    pseudo: &[f64],
    h: usize,
    w: usize,
    c: usize,
    rh: usize,
    rw: usize,
) -> Vec<(Option<usize>, f64)> {
    let region = |r: usize, col: usize| (r / rh, col / rw);
    let center_region = |p: (f64, f64)| {
        let r = (p.0.floor().max(0.0) as usize).min(h - 1);
        let col = (p.1.floor().max(0.0) as usize).min(w - 1);
        region(r, col)
    };
    (0..h * w)
        .map(|cell| {
            let reg = region(cell / w, cell % w);
            let mut best: Option<(usize, f64)> = None;
            for i in 0..center_pos.len() {
                if !valid[i] || center_region(center_pos[i]) != reg {
                    continue;
                }
                let s = cosine(&center_feat[i * c..(i + 1) * c], &pseudo[cell * c..(cell + 1) * c]);
                match best {
                    Some((_, bs)) if bs >= s => {}
                    _ => best = Some((i, s)),
                }
            }
            best.map_or((None, 0.0), |(i, s)| (Some(i), s))
        })
        .collect()
}

/// Direct similarity-gated aggregation. `assignment` is per pseudo point;
/// `value_map` is applied to centers and members alike.
#[allow(clippy::too_many_arguments)]
pub fn brute_aggregate(
    value_map: &DenseRef,
    center_feat: &[f64],
    valid: &[bool],
    pseudo: &[f64],
    assignment: &[(Option<usize>, f64)],
    c: usize,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    let n = valid.len();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let mut num = value_map.apply(&center_feat[i * c..(i + 1) * c]);
        let mut denom = 1.0;
        for (j, (a, s)) in assignment.iter().enumerate() {
            if *a != Some(i) {
                continue;
            }
            let g = logistic(alpha * s + beta);
            let v = value_map.apply(&pseudo[j * c..(j + 1) * c]);
            for k in 0..c {
                num[k] += g * v[k];
            }
            denom += g;
        }
        for k in 0..c {
            out[i * c + k] = num[k] / denom;
        }
    }
    out
}

/// Direct adaptive fusion of `N x D` point rows with `N x C` local rows.
pub fn brute_adaptive_fuse(
    align: &DenseRef,
    gate_point: &[DenseRef],
    gate_local: &[DenseRef],
    fp: &[f64],
    fl: &[f64],
    mask: &[bool],
    d: usize,
    c: usize,
) -> Vec<f64> {
    let mut out = fp.to_vec();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let p = &fp[i * d..(i + 1) * d];
        let l = align.apply(&fl[i * c..(i + 1) * c]);
        let ap: Vec<f64> = brute_mlp(gate_point, p).into_iter().map(logistic).collect();
        let al: Vec<f64> = brute_mlp(gate_local, &l).into_iter().map(logistic).collect();
        for k in 0..d {
            out[i * d + k] = (ap[k] * p[k] + al[k] * l[k]) / (ap[k] + al[k]);
        }
    }
    out
}

/// KNN attention cost volume from its definition.
#[allow(clippy::too_many_arguments)]
pub fn brute_cost_volume(
    score: &[DenseRef],
    value: &[DenseRef],
    src_xyz: &[[f64; 3]],
    src_feat: &[f64],
    tgt_xyz: &[[f64; 3]],
    tgt_feat: &[f64],
    d: usize,
    k: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; src_xyz.len() * d];
    for (i, q) in src_xyz.iter().enumerate() {
        let nbrs = brute_knn(tgt_xyz, *q, k);
        let mut scores = Vec::new();
        let mut values = Vec::new();
        for &j in &nbrs {
            let rel: Vec<f64> = (0..3).map(|a| tgt_xyz[j][a] - q[a]).collect();
            let ft = &tgt_feat[j * d..(j + 1) * d];
            let fs = &src_feat[i * d..(i + 1) * d];
            let mut s_in = rel.clone();
            s_in.extend(ft.iter().zip(fs).map(|(a, b)| a - b));
            let mut v_in = ft.to_vec();
            v_in.extend(&rel);
            scores.extend(brute_mlp(score, &s_in));
            values.extend(brute_mlp(value, &v_in));
        }
        let wts = brute_softmax(&scores, nbrs.len(), d);
        for kk in 0..nbrs.len() {
            for ch in 0..d {
                out[i * d + ch] += wts[kk * d + ch] * values[kk * d + ch];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_center_takes_everything() {
        let pseudo = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.5, 0.5];
        let a = brute_cluster_assign(&[(0.3, 0.7)], &[1.0, 0.0], &[true], &pseudo, 2, 2, 2, 2, 2);
        assert!(a.iter().all(|(c, _)| *c == Some(0)));
    }

    #[test]
    fn knn_with_k_equal_n_sorts_everything() {
        let pts = [[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(brute_knn(&pts, [0.0; 3], 4), vec![1, 3, 2, 0]);
    }

    #[test]
    fn knn_is_permutation_consistent() {
        let pts = [[0.5, 1.0, 0.0], [2.0, -1.0, 0.3], [-0.2, 0.1, 0.0]];
        let perm = [2usize, 0, 1];
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let a = brute_knn(&pts, [0.0; 3], 3);
        let b: Vec<usize> = brute_knn(&permuted, [0.0; 3], 3).into_iter().map(|i| perm[i]).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let s = brute_softmax(&[1.0, 2.0, 3.0, -1.0, 0.0, 5.0], 3, 2);
        assert!(((s[0] + s[2] + s[4]) - 1.0).abs() < 1e-15);
        assert!(((s[1] + s[3] + s[5]) - 1.0).abs() < 1e-15);
    }
}
