//! Cross-frame association and coarse-to-fine pose regression.
//!
//! Per level: a KNN attention cost volume correlates source points with the
//! target, a per-channel softmax mask weights the embedding, and two affine
//! heads regress `q` and `t` from the pooled vector. Finer levels warp the
//! source by the coarser pose and regress a residual that is composed on
//! top. Parameters live under `pose_head.level{l}.*`.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::config::LEVELS;
use crate::error::{shape_err, Result, VloError};
use crate::geometry::grad::{compose_refinement_backward, normalize_backward, transform_points_backward, PoseGrad};
use crate::geometry::{compose_refinement, transform_points, PoseSE3, Quaternion, Vec3};
use crate::nn::layers::{
    dense, dense_backward, init_dense, init_mlp, mlp_backward, mlp_forward, softmax_columns,
    softmax_columns_backward, MlpCache,
};
use crate::nn::ParamStore;
use crate::tensor::PointFeatureSet;

/// Scale applied to the initial weights of the `q` and `t` heads so the
/// untrained network starts near the identity pose.
pub const HEAD_WEIGHT_SCALE: f64 = 0.01;

pub fn prefix(level: usize) -> String {
    format!("pose_head.level{level}")
}

struct Names {
    score: String,
    value: String,
    mask: String,
    fc_q: String,
    fc_t: String,
}

fn names(level: usize) -> Names {
    let p = prefix(level);
    Names {
        score: format!("{p}.score"),
        value: format!("{p}.value"),
        mask: format!("{p}.mask"),
        fc_q: format!("{p}.fc_q"),
        fc_t: format!("{p}.fc_t"),
    }
}

pub fn init_pose_head(params: &mut ParamStore, level: usize, d: usize) -> Result<()> {
    let n = names(level);
    init_mlp(params, &n.score, &[3 + d, d, d], 1.0);
    init_mlp(params, &n.value, &[d + 3, d, d], 1.0);
    init_mlp(params, &n.mask, &[2 * d, d, d], 1.0);
    init_dense(params, &n.fc_q, d, 4, HEAD_WEIGHT_SCALE);
    init_dense(params, &n.fc_t, d, 3, HEAD_WEIGHT_SCALE);
    params.data_mut(&format!("{}.bias", n.fc_q))?.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    params.data_mut(&format!("{}.bias", n.fc_t))?.fill(0.0);
    Ok(())
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact K-nearest-neighbour search over a fixed point set.
///
/// Targets are sorted along x; a query sweeps outward from its x position
/// and stops once the x gap alone exceeds the current K-th distance. Ties in
/// distance resolve to the lower index.
pub struct KnnIndex<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
}

impl<'a> KnnIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
        Self { points, order }
    }

    /// Up to `k` nearest indices sorted by `(distance, index)`.
    pub fn query(&self, q: Vec3, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let offer = |best: &mut Vec<(f64, usize)>, idx: usize| {
            let cand = (dist2(q, self.points[idx]), idx);
            if best.len() == k && cmp(&cand, &best[k - 1]) != Ordering::Less {
                return;
            }
            let pos = best.partition_point(|b| cmp(b, &cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        };
        let start = self.order.partition_point(|&i| self.points[i][0] < q[0]);
        let (mut lo, mut hi) = (start, start);
        loop {
            let bound = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
            let gap = |i: usize| {
                let dx = self.points[i][0] - q[0];
                dx * dx
            };
            let left = (lo > 0).then(|| gap(self.order[lo - 1])).filter(|g| *g <= bound);
            let right = (hi < self.order.len()).then(|| gap(self.order[hi])).filter(|g| *g <= bound);
            match (left, right) {
                (None, None) => break,
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    offer(&mut best, self.order[lo]);
                }
                (Some(_), None) => {
                    lo -= 1;
                    offer(&mut best, self.order[lo]);
                }
                _ => {
                    offer(&mut best, self.order[hi]);
                    hi += 1;
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CostVolumeCache {
    /// Neighbours used per source point (`min(K, N_t)` each).
    pub k: usize,
    pub neighbours: Vec<usize>,
    weights: Vec<f64>,
    values: Vec<f64>,
    score_cache: MlpCache,
    value_cache: MlpCache,
}

/// KNN attention cost volume. Returns `N_s x D` embedding features.
pub fn cost_volume(
    params: &ParamStore,
    level: usize,
    src: &PointFeatureSet,
    tgt: &PointFeatureSet,
    k: usize,
) -> Result<(Vec<f64>, CostVolumeCache)> {
    if tgt.is_empty() {
        return Err(VloError::InvalidInput("cost volume target set is empty".into()));
    }
    if src.channels != tgt.channels {
        return Err(shape_err("cost volume channels", src.channels, tgt.channels));
    }
    let d = src.channels;
    let ns = src.len();
    let ke = k.max(1).min(tgt.len());
    let index = KnnIndex::new(&tgt.coords);
    let neighbours: Vec<usize> = (0..ns)
        .into_par_iter()
        .flat_map_iter(|i| index.query(src.coords[i], ke))
        .collect();

    let rows = ns * ke;
    let mut score_in = Vec::with_capacity(rows * (3 + d));
    let mut value_in = Vec::with_capacity(rows * (d + 3));
    for i in 0..ns {
        let fs = src.row(i);
        for &j in &neighbours[i * ke..(i + 1) * ke] {
            let rel = [
                tgt.coords[j][0] - src.coords[i][0],
                tgt.coords[j][1] - src.coords[i][1],
                tgt.coords[j][2] - src.coords[i][2],
            ];
            let ft = tgt.row(j);
            score_in.extend_from_slice(&rel);
            score_in.extend(ft.iter().zip(fs).map(|(a, b)| a - b));
            value_in.extend_from_slice(ft);
            value_in.extend_from_slice(&rel);
        }
    }
    let n = names(level);
    let (scores, score_cache) = mlp_forward(params, &n.score, &score_in, rows)?;
    let (values, value_cache) = mlp_forward(params, &n.value, &value_in, rows)?;
    let weights: Vec<f64> = scores
        .par_chunks(ke * d)
        .flat_map_iter(|block| softmax_columns(block, ke, d))
        .collect();
    let mut e = vec![0.0; ns * d];
    for i in 0..ns {
        for kk in 0..ke {
            let r = (i * ke + kk) * d;
            for c in 0..d {
                e[i * d + c] += weights[r + c] * values[r + c];
            }
        }
    }
    Ok((
        e,
        CostVolumeCache {
            k: ke,
            neighbours,
            weights,
            values,
            score_cache,
            value_cache,
        },
    ))
}

/// Adjoints of the cost volume inputs.
#[derive(Clone, Debug)]
pub struct CostVolumeGrad {
    pub src_features: Vec<f64>,
    pub src_coords: Vec<Vec3>,
    pub tgt_features: Vec<f64>,
}

pub fn cost_volume_backward(
    params: &ParamStore,
    level: usize,
    src: &PointFeatureSet,
    tgt: &PointFeatureSet,
    cache: &CostVolumeCache,
    de: &[f64],
    grads: &mut ParamStore,
) -> Result<CostVolumeGrad> {
    let d = src.channels;
    let ns = src.len();
    let ke = cache.k;
    if de.len() != ns * d {
        return Err(shape_err("cost volume adjoint", ns * d, de.len()));
    }
    let rows = ns * ke;
    let mut dvalues = vec![0.0; rows * d];
    let mut dweights = vec![0.0; rows * d];
    for i in 0..ns {
        for kk in 0..ke {
            let r = (i * ke + kk) * d;
            for c in 0..d {
                dvalues[r + c] = de[i * d + c] * cache.weights[r + c];
                dweights[r + c] = de[i * d + c] * cache.values[r + c];
            }
        }
    }
    let mut dscores = Vec::with_capacity(rows * d);
    for i in 0..ns {
        let span = i * ke * d..(i + 1) * ke * d;
        dscores.extend(softmax_columns_backward(&cache.weights[span.clone()], &dweights[span], ke, d));
    }
    let n = names(level);
    let dscore_in = mlp_backward(params, &n.score, &cache.score_cache, &dscores, grads)?;
    let dvalue_in = mlp_backward(params, &n.value, &cache.value_cache, &dvalues, grads)?;

    let mut out = CostVolumeGrad {
        src_features: vec![0.0; ns * d],
        src_coords: vec![[0.0; 3]; ns],
        tgt_features: vec![0.0; tgt.len() * d],
    };
    for i in 0..ns {
        for kk in 0..ke {
            let r = i * ke + kk;
            let j = cache.neighbours[r];
            let ds = &dscore_in[r * (3 + d)..(r + 1) * (3 + d)];
            let dv = &dvalue_in[r * (d + 3)..(r + 1) * (d + 3)];
            for a in 0..3 {
                out.src_coords[i][a] -= ds[a] + dv[d + a];
            }
            for c in 0..d {
                out.tgt_features[j * d + c] += ds[3 + c] + dv[c];
                out.src_features[i * d + c] -= ds[3 + c];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MaskCache {
    mask: Vec<f64>,
    mlp_cache: MlpCache,
}

/// Per-channel softmax over points of `MLP([E | F_GS])`. Every column of the
/// returned `N x D` matrix sums to 1.
pub fn embedding_mask(
    params: &ParamStore,
    level: usize,
    e: &[f64],
    src_features: &[f64],
    d: usize,
) -> Result<(Vec<f64>, MaskCache)> {
    if e.len() != src_features.len() || e.len() % d != 0 {
        return Err(shape_err("embedding mask input", e.len(), src_features.len()));
    }
    let n = e.len() / d;
    let mut x = Vec::with_capacity(2 * e.len());
    for i in 0..n {
        x.extend_from_slice(&e[i * d..(i + 1) * d]);
        x.extend_from_slice(&src_features[i * d..(i + 1) * d]);
    }
    let (z, mlp_cache) = mlp_forward(params, &names(level).mask, &x, n)?;
    let mask = softmax_columns(&z, n, d);
    Ok((mask.clone(), MaskCache { mask, mlp_cache }))
}

/// Returns `(dE, dF_GS)`.
pub fn embedding_mask_backward(
    params: &ParamStore,
    level: usize,
    cache: &MaskCache,
    dmask: &[f64],
    d: usize,
    grads: &mut ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cache.mask.len() / d;
    let dz = softmax_columns_backward(&cache.mask, dmask, n, d);
    let dx = mlp_backward(params, &names(level).mask, &cache.mlp_cache, &dz, grads)?;
    let mut de = Vec::with_capacity(n * d);
    let mut df = Vec::with_capacity(n * d);
    for i in 0..n {
        de.extend_from_slice(&dx[i * 2 * d..i * 2 * d + d]);
        df.extend_from_slice(&dx[i * 2 * d + d..(i + 1) * 2 * d]);
    }
    Ok((de, df))
}

#[derive(Clone, Debug)]
pub struct RegressCache {
    pooled: Vec<f64>,
    raw_q: Quaternion,
}

/// Pools `sum_i E_i * M_i` and applies the affine `q` and `t` heads; `q` is
/// normalized.
pub fn regress_pose(
    params: &ParamStore,
    level: usize,
    e: &[f64],
    m: &[f64],
    d: usize,
) -> Result<(PoseSE3, RegressCache)> {
    if e.len() != m.len() || e.len() % d != 0 {
        return Err(shape_err("regress input", e.len(), m.len()));
    }
    let mut pooled = vec![0.0; d];
    for (i, (ev, mv)) in e.iter().zip(m).enumerate() {
        pooled[i % d] += ev * mv;
    }
    let n = names(level);
    let u = dense(params, &n.fc_q, &pooled, 1)?;
    let t = dense(params, &n.fc_t, &pooled, 1)?;
    let raw_q = Quaternion::new(u[0], u[1], u[2], u[3]);
    let pose = PoseSE3::new(raw_q.normalize(), [t[0], t[1], t[2]]);
    Ok((pose, RegressCache { pooled, raw_q }))
}

/// Returns `(dE, dM)`.
pub fn regress_pose_backward(
    params: &ParamStore,
    level: usize,
    e: &[f64],
    m: &[f64],
    d: usize,
    cache: &RegressCache,
    dpose: &PoseGrad,
    grads: &mut ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = names(level);
    let du = normalize_backward(cache.raw_q, dpose.q);
    let dp_q = dense_backward(params, &n.fc_q, &cache.pooled, 1, &du, grads)?;
    let dp_t = dense_backward(params, &n.fc_t, &cache.pooled, 1, &dpose.t, grads)?;
    let dp: Vec<f64> = dp_q.iter().zip(&dp_t).map(|(a, b)| a + b).collect();
    let de = m.iter().enumerate().map(|(i, mv)| dp[i % d] * mv).collect();
    let dm = e.iter().enumerate().map(|(i, ev)| dp[i % d] * ev).collect();
    Ok((de, dm))
}

/// Caches of one level's head (cost volume, mask, regression).
#[derive(Clone, Debug)]
pub struct HeadCache {
    /// Source set as fed to the cost volume (coordinates possibly warped).
    pub src: PointFeatureSet,
    pub embedding: Vec<f64>,
    pub mask: Vec<f64>,
    pub pose: PoseSE3,
    cv: CostVolumeCache,
    mask_cache: MaskCache,
    regress: RegressCache,
}

/// Cost volume, mask and regression for one level.
pub fn level_head(
    params: &ParamStore,
    level: usize,
    src: &PointFeatureSet,
    tgt: &PointFeatureSet,
    k: usize,
) -> Result<(PoseSE3, HeadCache)> {
    if src.is_empty() {
        return Err(VloError::InvalidInput(format!("level {level}: no source points to match")));
    }
    let d = src.channels;
    let (e, cv) = cost_volume(params, level, src, tgt, k)?;
    let (m, mask_cache) = embedding_mask(params, level, &e, &src.features, d)?;
    let (pose, regress) = regress_pose(params, level, &e, &m, d)?;
    Ok((
        pose,
        HeadCache {
            src: src.clone(),
            embedding: e,
            mask: m,
            pose,
            cv,
            mask_cache,
            regress,
        },
    ))
}

pub fn level_head_backward(
    params: &ParamStore,
    level: usize,
    tgt: &PointFeatureSet,
    cache: &HeadCache,
    dpose: &PoseGrad,
    grads: &mut ParamStore,
) -> Result<CostVolumeGrad> {
    let d = cache.src.channels;
    let (mut de, dm) = regress_pose_backward(params, level, &cache.embedding, &cache.mask, d, &cache.regress, dpose, grads)?;
    let (de_mask, df_mask) = embedding_mask_backward(params, level, &cache.mask_cache, &dm, d, grads)?;
    for (a, b) in de.iter_mut().zip(&de_mask) {
        *a += b;
    }
    let mut g = cost_volume_backward(params, level, &cache.src, tgt, &cache.cv, &de, grads)?;
    for (a, b) in g.src_features.iter_mut().zip(&df_mask) {
        *a += b;
    }
    Ok(g)
}

/// Fused source and target points of one level, restricted to the points
/// that take part in matching.
#[derive(Clone, Debug)]
pub struct LevelPair {
    pub src: PointFeatureSet,
    pub tgt: PointFeatureSet,
}

#[derive(Clone, Debug)]
pub struct IterativeCache {
    heads: Vec<HeadCache>,
    /// Per-level regressed pose (residual for all but the coarsest).
    regressed: Vec<PoseSE3>,
    /// Per-level accumulated pose, finest first.
    poses: Vec<PoseSE3>,
}

/// Coarse-to-fine estimate. `levels` is finest first; the result is
/// coarsest first (`l = LEVELS - 1 .. 0`).
pub fn iterative_estimate(params: &ParamStore, levels: &[LevelPair], k: usize) -> Result<(Vec<PoseSE3>, IterativeCache)> {
    if levels.len() != LEVELS {
        return Err(shape_err("pose head levels", LEVELS, levels.len()));
    }
    let mut heads: Vec<Option<HeadCache>> = vec![None; LEVELS];
    let mut regressed = vec![PoseSE3::identity(); LEVELS];
    let mut poses = vec![PoseSE3::identity(); LEVELS];
    for l in (0..LEVELS).rev() {
        let lp = &levels[l];
        log::debug!("level {l}: {} source, {} target points", lp.src.len(), lp.tgt.len());
        if l == LEVELS - 1 {
            let (pose, cache) = level_head(params, l, &lp.src, &lp.tgt, k)?;
            regressed[l] = pose;
            poses[l] = pose;
            heads[l] = Some(cache);
        } else {
            let prev = poses[l + 1];
            let warped = PointFeatureSet {
                coords: transform_points(&prev, &lp.src.coords),
                ..lp.src.clone()
            };
            let (delta, cache) = level_head(params, l, &warped, &lp.tgt, k)?;
            regressed[l] = delta;
            poses[l] = compose_refinement(&delta, &prev);
            heads[l] = Some(cache);
        }
    }
    let out = poses.iter().rev().copied().collect();
    Ok((
        out,
        IterativeCache {
            heads: heads.into_iter().map(|h| h.expect("every level visited")).collect(),
            regressed,
            poses,
        },
    ))
}

/// Adjoints of the per-level fused features.
#[derive(Clone, Debug)]
pub struct LevelPairGrad {
    pub src_features: Vec<f64>,
    pub tgt_features: Vec<f64>,
}

/// Adjoint of [`iterative_estimate`]. `dposes` is coarsest first, matching
/// the forward output.
pub fn iterative_estimate_backward(
    params: &ParamStore,
    levels: &[LevelPair],
    cache: &IterativeCache,
    dposes: &[PoseGrad],
    grads: &mut ParamStore,
) -> Result<Vec<LevelPairGrad>> {
    if dposes.len() != LEVELS {
        return Err(shape_err("pose adjoints", LEVELS, dposes.len()));
    }
    let mut dpose: Vec<PoseGrad> = dposes.iter().rev().copied().collect();
    let mut out: Vec<Option<LevelPairGrad>> = vec![None; LEVELS];
    for l in 0..LEVELS {
        let head = &cache.heads[l];
        let lp = &levels[l];
        let g = if l == LEVELS - 1 {
            level_head_backward(params, l, &lp.tgt, head, &dpose[l], grads)?
        } else {
            let prev = cache.poses[l + 1];
            let (d_delta, d_prev) = compose_refinement_backward(&cache.regressed[l], &prev, &dpose[l]);
            let g = level_head_backward(params, l, &lp.tgt, head, &d_delta, grads)?;
            let (d_warp, _) = transform_points_backward(&prev, &lp.src.coords, &g.src_coords);
            let mut acc = d_prev;
            acc.add(&d_warp);
            dpose[l + 1].add(&acc);
            g
        };
        out[l] = Some(LevelPairGrad {
            src_features: g.src_features,
            tgt_features: g.tgt_features,
        });
    }
    Ok(out.into_iter().map(|g| g.expect("every level visited")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointFeatureSet {
        PointFeatureSet::new(
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)]).collect(),
        )
        .unwrap()
    }

    fn brute_knn(pts: &[Vec3], q: Vec3, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        idx.sort_by(|&a, &b| dist2(q, pts[a]).total_cmp(&dist2(q, pts[b])).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn knn_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..80);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| [rng.random_range(-3i32..3) as f64, rng.random_range(-3i32..3) as f64, 0.0])
                .collect();
            let index = KnnIndex::new(&pts);
            for _ in 0..10 {
                let q = [rng.random_range(-3.0..3.0), rng.random_range(-3i32..3) as f64, 0.0];
                let k = rng.random_range(1..20);
                assert_eq!(index.query(q, k), brute_knn(&pts, q, k.min(n)));
            }
        }
    }

    #[test]
    fn single_target_gets_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamStore::new(6);
        init_pose_head(&mut p, 0, 3).unwrap();
        let src = random_set(&mut rng, 5, 3);
        let tgt = random_set(&mut rng, 1, 3);
        let (e, cache) = cost_volume(&p, 0, &src, &tgt, 4).unwrap();
        assert_eq!(cache.k, 1);
        assert!(cache.weights.iter().all(|w| (*w - 1.0).abs() < 1e-15));
        for i in 0..5 {
            for c in 0..3 {
                assert!((e[i * 3 + c] - cache.values[i * 3 + c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mask_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamStore::new(7);
        init_pose_head(&mut p, 1, 4).unwrap();
        let e: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (m, _) = embedding_mask(&p, 1, &e, &f, 4).unwrap();
        for c in 0..4 {
            let s: f64 = (0..10).map(|i| m[i * 4 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (m1, _) = embedding_mask(&p, 1, &e[..4], &f[..4], 4).unwrap();
        assert_eq!(m1, vec![1.0; 4]);
    }

    #[test]
    fn initial_heads_are_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParamStore::new(8);
        init_pose_head(&mut p, 0, 4).unwrap();
        let e: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = vec![0.2; 20];
        let (pose, _) = regress_pose(&p, 0, &e, &m, 4).unwrap();
        assert!((pose.q.norm() - 1.0).abs() < 1e-12);
        assert!(pose.q.angle() < 0.05);
        assert!(pose.t.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn regress_is_affine_in_pooled_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::new(9);
        init_pose_head(&mut p, 0, 3).unwrap();
        let e: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e2: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        let m = vec![1.0 / 5.0; 15];
        let (a, _) = regress_pose(&p, 0, &e, &m, 3).unwrap();
        let (b, _) = regress_pose(&p, 0, &e2, &m, 3).unwrap();
        let bias = p.data("pose_head.level0.fc_t.bias").unwrap();
        for i in 0..3 {
            assert!((b.t[i] - (2.0 * a.t[i] - bias[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn source_permutation_leaves_pose_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ParamStore::new(10);
        init_pose_head(&mut p, 0, 4).unwrap();
        let src = random_set(&mut rng, 12, 4);
        let tgt = random_set(&mut rng, 15, 4);
        let (a, _) = level_head(&p, 0, &src, &tgt, 4).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        let permuted = PointFeatureSet::new(
            4,
            perm.iter().flat_map(|&i| src.row(i).to_vec()).collect(),
            perm.iter().map(|&i| src.coords[i]).collect(),
        )
        .unwrap();
        let (b, _) = level_head(&p, 0, &permuted, &tgt, 4).unwrap();
        for i in 0..4 {
            assert!((a.q.to_array()[i] - b.q.to_array()[i]).abs() < 1e-9);
        }
        for i in 0..3 {
            assert!((a.t[i] - b.t[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_residuals_keep_coarsest_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ParamStore::new(12);
        let mut levels = Vec::new();
        for l in 0..LEVELS {
            init_pose_head(&mut p, l, 3).unwrap();
            levels.push(LevelPair {
                src: random_set(&mut rng, 6, 3),
                tgt: random_set(&mut rng, 6, 3),
            });
            if l < LEVELS - 1 {
                p.data_mut(&format!("pose_head.level{l}.fc_q.weight")).unwrap().fill(0.0);
                p.data_mut(&format!("pose_head.level{l}.fc_t.weight")).unwrap().fill(0.0);
            }
        }
        p.data_mut("pose_head.level3.fc_t.bias").unwrap().copy_from_slice(&[0.5, -0.2, 0.1]);
        let (poses, _) = iterative_estimate(&p, &levels, 4).unwrap();
        for pose in &poses[1..] {
            assert!((pose.t[0] - poses[0].t[0]).abs() < 1e-12);
            assert!((pose.q.dot(poses[0].q) - 1.0).abs() < 1e-12);
        }
    }
}
