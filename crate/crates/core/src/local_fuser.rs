//! Clustering-based local fusion.
//!
//! The image feature map is flattened into pseudo points. Every LiDAR point
//! that projects into the image becomes a cluster center whose feature is
//! bilinearly sampled from the map. Inside each rectangular region of the
//! map, every pseudo point joins its most cosine-similar center, and each
//! center then aggregates its members:
//!
//! ```text
//! F_L = (V(F_c) + sum_j sigmoid(alpha * s_j + beta) * V(F_pp_j)) / X
//! X   = 1 + sum_j sigmoid(alpha * s_j + beta)
//! ```
//!
//! where `V` is a shared value map. Points without an image correspondence
//! get an all-zero row.

use rayon::prelude::*;

use crate::error::{shape_err, Result, VloError};
use crate::nn::layers::{dense, dense_backward, init_dense, sigmoid};
use crate::nn::sample::{bilinear_backward, bilinear_sample};
use crate::nn::ParamStore;
use crate::tensor::{FeatureGrid, PointFeatureSet};

pub fn prefix(level: usize) -> String {
    format!("local_fuser.level{level}")
}

pub fn value_map_name(level: usize) -> String {
    format!("{}.value_map", prefix(level))
}

/// `alpha = 1`, `beta = 0`, uniform value map.
pub fn init_local_fuser(params: &mut ParamStore, level: usize, channels: usize) {
    let p = prefix(level);
    params
        .insert(format!("{p}.alpha"), &[], vec![1.0])
        .expect("scalar shape");
    params
        .insert(format!("{p}.beta"), &[], vec![0.0])
        .expect("scalar shape");
    init_dense(params, &value_map_name(level), channels, channels, 1.0);
}

/// Tiling of a feature map into equal rectangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub map_h: usize,
    pub map_w: usize,
    pub region_h: usize,
    pub region_w: usize,
}

impl RegionPartition {
    pub fn new(map_h: usize, map_w: usize, region_h: usize, region_w: usize) -> Result<Self> {
        if region_h == 0 || region_w == 0 || map_h % region_h != 0 || map_w % region_w != 0 {
            return Err(VloError::InvalidInput(format!(
                "region {region_h}x{region_w} does not tile {map_h}x{map_w}"
            )));
        }
        Ok(Self {
            map_h,
            map_w,
            region_h,
            region_w,
        })
    }

    pub fn regions_per_row(&self) -> usize {
        self.map_w / self.region_w
    }

    pub fn region_count(&self) -> usize {
        (self.map_h / self.region_h) * self.regions_per_row()
    }

    pub fn region_of_cell(&self, row: usize, col: usize) -> usize {
        (row / self.region_h) * self.regions_per_row() + col / self.region_w
    }

    /// Region containing a continuous `(row, col)` position (clamped).
    pub fn region_of_position(&self, row: f64, col: f64) -> usize {
        let r = (row.floor().max(0.0) as usize).min(self.map_h - 1);
        let c = (col.floor().max(0.0) as usize).min(self.map_w - 1);
        self.region_of_cell(r, c)
    }
}

/// Flattens an `H x W x C` map into `H * W` pseudo points (row-major). Each
/// point's coordinate is `(row, col, 0)`.
pub fn image_to_pseudo_points(feat: &FeatureGrid) -> PointFeatureSet {
    let coords = (0..feat.h)
        .flat_map(|r| (0..feat.w).map(move |c| [r as f64, c as f64, 0.0]))
        .collect();
    PointFeatureSet {
        channels: feat.c,
        features: feat.data.clone(),
        coords,
        mask: None,
    }
}

pub fn pseudo_points_to_image(points: &PointFeatureSet, h: usize, w: usize) -> Result<FeatureGrid> {
    if points.len() != h * w {
        return Err(shape_err("pseudo points", h * w, points.len()));
    }
    FeatureGrid::from_vec(h, w, points.channels, points.features.clone())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterAssignment {
    /// Center index per pseudo point; `None` when its region has no center.
    pub center_of: Vec<Option<usize>>,
    /// Pseudo-point indices per center, ascending.
    pub members: Vec<Vec<usize>>,
    /// Cosine similarity of each pseudo point to its center (0 if unassigned).
    pub similarities: Vec<f64>,
}

impl ClusterAssignment {
    pub fn unassigned(&self) -> usize {
        self.center_of.iter().filter(|c| c.is_none()).count()
    }

    /// Checks that `center_of` and `members` describe the same partition.
    pub fn is_consistent(&self) -> bool {
        let mut seen = vec![false; self.center_of.len()];
        for (i, m) in self.members.iter().enumerate() {
            for &j in m {
                if j >= seen.len() || seen[j] || self.center_of[j] != Some(i) {
                    return false;
                }
                seen[j] = true;
            }
        }
        seen.iter()
            .zip(&self.center_of)
            .all(|(s, c)| *s == c.is_some())
            && self.similarities.iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s))
    }
}

/// Vectors compared by cosine similarity, with cached norms.
struct SimVectors {
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl SimVectors {
    fn build(features: &[f64], channels: usize, positions: Option<Vec<[f64; 2]>>) -> Self {
        let rows = features.len() / channels;
        let dim = channels + if positions.is_some() { 2 } else { 0 };
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            data.extend_from_slice(&features[r * channels..(r + 1) * channels]);
            if let Some(p) = &positions {
                data.extend_from_slice(&p[r]);
            }
        }
        let norms = data.chunks(dim).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        Self { dim, data, norms }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn cosine(&self, i: usize, other: &SimVectors, j: usize) -> f64 {
        let (na, nb) = (self.norms[i], other.norms[j]);
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }

    /// Adds `ds * d cos(a_i, b_j)` into the adjoints of both rows.
    fn cosine_backward(&self, i: usize, other: &SimVectors, j: usize, ds: f64, da: &mut [f64], db: &mut [f64]) {
        let (na, nb) = (self.norms[i], other.norms[j]);
        if na == 0.0 || nb == 0.0 || ds == 0.0 {
            return;
        }
        let a = self.row(i);
        let b = other.row(j);
        let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        for k in 0..self.dim {
            da[k] += ds * (b[k] / (na * nb) - s * a[k] / (na * na));
            db[k] += ds * (a[k] / (na * nb) - s * b[k] / (nb * nb));
        }
    }
}

fn normalized_positions(coords: &[[f64; 3]], h: usize, w: usize) -> Vec<[f64; 2]> {
    coords
        .iter()
        .map(|c| [c[0] / h.max(1) as f64, c[1] / w.max(1) as f64])
        .collect()
}

fn assign_with_vectors(
    centers: &PointFeatureSet,
    center_vecs: &SimVectors,
    pseudo: &PointFeatureSet,
    pseudo_vecs: &SimVectors,
    partition: &RegionPartition,
) -> ClusterAssignment {
    let valid = |i: usize| centers.mask.as_ref().is_none_or(|m| m[i]);
    let mut by_region: Vec<Vec<usize>> = vec![Vec::new(); partition.region_count()];
    for i in 0..centers.len() {
        if valid(i) {
            let c = centers.coords[i];
            by_region[partition.region_of_position(c[0], c[1])].push(i);
        }
    }
    let zero_norm = center_vecs.norms.iter().chain(&pseudo_vecs.norms).any(|n| *n == 0.0);
    if zero_norm {
        log::debug!("zero-norm feature vectors present; their similarities are defined as 0");
    }
    let picks: Vec<(Option<usize>, f64)> = (0..pseudo.len())
        .into_par_iter()
        .map(|j| {
            let p = pseudo.coords[j];
            let region = partition.region_of_cell(p[0] as usize, p[1] as usize);
            let mut best: Option<(usize, f64)> = None;
            for &i in &by_region[region] {
                let s = center_vecs.cosine(i, pseudo_vecs, j);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((i, s));
                }
            }
            match best {
                Some((i, s)) => (Some(i), s),
                None => (None, 0.0),
            }
        })
        .collect();
    let mut members = vec![Vec::new(); centers.len()];
    for (j, (c, _)) in picks.iter().enumerate() {
        if let Some(i) = c {
            members[*i].push(j);
        }
    }
    ClusterAssignment {
        center_of: picks.iter().map(|p| p.0).collect(),
        similarities: picks.iter().map(|p| p.1).collect(),
        members,
    }
}

/// Assigns each pseudo point to the most similar center in its region.
///
/// `centers.coords` and `pseudo.coords` are `(row, col, 0)` positions on the
/// feature map; `centers.mask`, when present, disables centers. Ties go to
/// the lowest center index.
pub fn assign_clusters(
    centers: &PointFeatureSet,
    pseudo: &PointFeatureSet,
    partition: &RegionPartition,
    with_positions: bool,
) -> Result<ClusterAssignment> {
    centers.validate()?;
    pseudo.validate()?;
    if centers.channels != pseudo.channels {
        return Err(shape_err("center channels", pseudo.channels, centers.channels));
    }
    let pos = |s: &PointFeatureSet| with_positions.then(|| normalized_positions(&s.coords, partition.map_h, partition.map_w));
    let cv = SimVectors::build(&centers.features, centers.channels, pos(centers));
    let pv = SimVectors::build(&pseudo.features, pseudo.channels, pos(pseudo));
    Ok(assign_with_vectors(centers, &cv, pseudo, &pv, partition))
}

fn aggregate_values(
    assignment: &ClusterAssignment,
    center_values: &[f64],
    pseudo_values: &[f64],
    valid: &[bool],
    channels: usize,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    let c = channels;
    let mut out = vec![0.0; valid.len() * c];
    for (i, members) in assignment.members.iter().enumerate() {
        if !valid[i] {
            continue;
        }
        let row = &mut out[i * c..(i + 1) * c];
        row.copy_from_slice(&center_values[i * c..(i + 1) * c]);
        let mut x = 1.0;
        for &j in members {
            let g = sigmoid(alpha * assignment.similarities[j] + beta);
            x += g;
            for k in 0..c {
                row[k] += g * pseudo_values[j * c + k];
            }
        }
        for v in row.iter_mut() {
            *v /= x;
        }
    }
    out
}

/// Similarity-gated aggregation of each cluster into its center's row.
/// Centers disabled by `centers.mask` get zero rows.
pub fn aggregate_clusters(
    params: &ParamStore,
    level: usize,
    assignment: &ClusterAssignment,
    centers: &PointFeatureSet,
    pseudo: &PointFeatureSet,
) -> Result<PointFeatureSet> {
    let c = centers.channels;
    let alpha = params.scalar(&format!("{}.alpha", prefix(level)))?;
    let beta = params.scalar(&format!("{}.beta", prefix(level)))?;
    let vc = dense(params, &value_map_name(level), &centers.features, centers.len())?;
    let vp = dense(params, &value_map_name(level), &pseudo.features, pseudo.len())?;
    let valid: Vec<bool> = (0..centers.len())
        .map(|i| centers.mask.as_ref().is_none_or(|m| m[i]))
        .collect();
    let fused = aggregate_values(assignment, &vc, &vp, &valid, c, alpha, beta);
    Ok(PointFeatureSet {
        channels: c,
        features: fused,
        coords: centers.coords.clone(),
        mask: centers.mask.clone(),
    })
}

/// Converts image-pixel coordinates `[x', y']` to positions on a feature map
/// of the given stride (pixel centres aligned).
pub fn image_to_feature_coords(pixels: &[[f64; 2]], stride: usize) -> Vec<[f64; 2]> {
    let s = stride as f64;
    pixels
        .iter()
        .map(|p| [(p[0] + 0.5) / s - 0.5, (p[1] + 0.5) / s - 0.5])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalFuseOptions {
    pub region_h: usize,
    pub region_w: usize,
    pub with_positions: bool,
    pub on_values: bool,
}

impl LocalFuseOptions {
    pub fn from_config(cfg: &crate::config::PipelineConfig, level: usize) -> Self {
        let (region_h, region_w) = cfg.region_size(level);
        Self {
            region_h,
            region_w,
            with_positions: cfg.local_fuser.similarity_with_positions,
            on_values: cfg.local_fuser.similarity_on_values,
        }
    }
}

/// Intermediate values kept for the adjoint pass and for visualization.
#[derive(Clone, Debug)]
pub struct LocalFuseCache {
    pub level: usize,
    pub options: LocalFuseOptions,
    /// Feature-map positions `[x, y]` of every point.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub centers: PointFeatureSet,
    pub assignment: ClusterAssignment,
    center_values: Vec<f64>,
    pseudo_values: Vec<f64>,
}

/// Full local fusion for one level: sample centers, assign, aggregate.
///
/// `coords` are `[x, y]` positions on `image_feat` (see
/// [`image_to_feature_coords`]); `mask` marks points with an image
/// correspondence. Returns `N x C` rows aligned with `coords`.
pub fn local_fuse(
    params: &ParamStore,
    level: usize,
    options: LocalFuseOptions,
    image_feat: &FeatureGrid,
    coords: &[[f64; 2]],
    mask: &[bool],
) -> Result<(Vec<f64>, LocalFuseCache)> {
    if coords.len() != mask.len() {
        return Err(shape_err("local fuse mask", coords.len(), mask.len()));
    }
    let partition = RegionPartition::new(image_feat.h, image_feat.w, options.region_h, options.region_w)?;
    let c = image_feat.c;
    let n = coords.len();
    let safe: Vec<[f64; 2]> = coords
        .iter()
        .zip(mask)
        .map(|(p, m)| if *m { *p } else { [f64::NAN, f64::NAN] })
        .collect();
    let fc = bilinear_sample(image_feat, &safe);
    let centers = PointFeatureSet {
        channels: c,
        features: fc,
        coords: coords.iter().map(|p| [p[1], p[0], 0.0]).collect(),
        mask: Some(mask.to_vec()),
    };
    let pseudo = image_to_pseudo_points(image_feat);
    let vm = value_map_name(level);
    let vc = dense(params, &vm, &centers.features, n)?;
    let vp = dense(params, &vm, &pseudo.features, pseudo.len())?;

    let pos = |s: &PointFeatureSet| {
        options
            .with_positions
            .then(|| normalized_positions(&s.coords, partition.map_h, partition.map_w))
    };
    let (cf, pf) = if options.on_values {
        (&vc, &vp)
    } else {
        (&centers.features, &pseudo.features)
    };
    let cv = SimVectors::build(cf, c, pos(&centers));
    let pv = SimVectors::build(pf, c, pos(&pseudo));
    let assignment = assign_with_vectors(&centers, &cv, &pseudo, &pv, &partition);

    let alpha = params.scalar(&format!("{}.alpha", prefix(level)))?;
    let beta = params.scalar(&format!("{}.beta", prefix(level)))?;
    let fused = aggregate_values(&assignment, &vc, &vp, mask, c, alpha, beta);
    Ok((
        fused,
        LocalFuseCache {
            level,
            options,
            coords: safe,
            valid: mask.to_vec(),
            centers,
            assignment,
            center_values: vc,
            pseudo_values: vp,
        },
    ))
}

/// Adjoint of [`local_fuse`]: accumulates `alpha`, `beta` and value-map
/// adjoints and returns the adjoint of the image feature map.
pub fn local_fuse_backward(
    params: &ParamStore,
    image_feat: &FeatureGrid,
    cache: &LocalFuseCache,
    dfused: &[f64],
    grads: &mut ParamStore,
) -> Result<FeatureGrid> {
    let c = image_feat.c;
    let n = cache.valid.len();
    if dfused.len() != n * c {
        return Err(shape_err("local fuse adjoint", n * c, dfused.len()));
    }
    let level = cache.level;
    let p = prefix(level);
    let alpha = params.scalar(&format!("{p}.alpha"))?;
    let beta = params.scalar(&format!("{p}.beta"))?;
    let (vc, vp) = (&cache.center_values, &cache.pseudo_values);
    let a = &cache.assignment;

    let m = image_feat.h * image_feat.w;
    let mut dvc = vec![0.0; n * c];
    let mut dvp = vec![0.0; m * c];
    let mut ds = vec![0.0; m];
    let (mut dalpha, mut dbeta) = (0.0, 0.0);
    let mut fused = vec![0.0; c];
    for i in 0..n {
        if !cache.valid[i] {
            continue;
        }
        let g_out = &dfused[i * c..(i + 1) * c];
        let members = &a.members[i];
        let gates: Vec<f64> = members.iter().map(|&j| sigmoid(alpha * a.similarities[j] + beta)).collect();
        let x = 1.0 + gates.iter().sum::<f64>();
        for k in 0..c {
            fused[k] = vc[i * c + k];
        }
        for (&j, g) in members.iter().zip(&gates) {
            for k in 0..c {
                fused[k] += g * vp[j * c + k];
            }
        }
        for v in fused.iter_mut() {
            *v /= x;
        }
        let dx = -(0..c).map(|k| g_out[k] * fused[k]).sum::<f64>() / x;
        for k in 0..c {
            dvc[i * c + k] += g_out[k] / x;
        }
        for (&j, &g) in members.iter().zip(&gates) {
            let mut dg = dx;
            for k in 0..c {
                let dnum = g_out[k] / x;
                dvp[j * c + k] += g * dnum;
                dg += dnum * vp[j * c + k];
            }
            let dz = dg * g * (1.0 - g);
            dalpha += dz * a.similarities[j];
            dbeta += dz;
            ds[j] += dz * alpha;
        }
    }
    grads.accumulate(&format!("{p}.alpha"), &[dalpha])?;
    grads.accumulate(&format!("{p}.beta"), &[dbeta])?;

    // Similarity adjoints flow into whichever vectors were compared.
    let partition = RegionPartition::new(image_feat.h, image_feat.w, cache.options.region_h, cache.options.region_w)?;
    let pseudo = image_to_pseudo_points(image_feat);
    let pos = |s: &PointFeatureSet| {
        cache
            .options
            .with_positions
            .then(|| normalized_positions(&s.coords, partition.map_h, partition.map_w))
    };
    let (cf, pf) = if cache.options.on_values {
        (vc, vp)
    } else {
        (&cache.centers.features, &pseudo.features)
    };
    let cv = SimVectors::build(cf, c, pos(&cache.centers));
    let pv = SimVectors::build(pf, c, pos(&pseudo));
    let dim = cv.dim;
    let mut dcv = vec![0.0; n * dim];
    let mut dpv = vec![0.0; m * dim];
    for (j, center) in a.center_of.iter().enumerate() {
        if let Some(i) = *center {
            let (da, db) = (
                &mut dcv[i * dim..(i + 1) * dim],
                &mut dpv[j * dim..(j + 1) * dim],
            );
            cv.cosine_backward(i, &pv, j, ds[j], da, db);
        }
    }
    let strip = |v: &[f64], rows: usize| -> Vec<f64> {
        (0..rows).flat_map(|r| v[r * dim..r * dim + c].iter().copied()).collect()
    };
    let (sim_dc, sim_dp) = (strip(&dcv, n), strip(&dpv, m));
    if cache.options.on_values {
        for (a, b) in dvc.iter_mut().zip(&sim_dc) {
            *a += b;
        }
        for (a, b) in dvp.iter_mut().zip(&sim_dp) {
            *a += b;
        }
    }
    let vm = value_map_name(level);
    let mut dfc = dense_backward(params, &vm, &cache.centers.features, n, &dvc, grads)?;
    let mut dfp = dense_backward(params, &vm, &pseudo.features, m, &dvp, grads)?;
    if !cache.options.on_values {
        for (a, b) in dfc.iter_mut().zip(&sim_dc) {
            *a += b;
        }
        for (a, b) in dfp.iter_mut().zip(&sim_dp) {
            *a += b;
        }
    }
    let (mut dgrid, _) = bilinear_backward(image_feat, &cache.coords, &dfc);
    for (a, b) in dgrid.data.iter_mut().zip(&dfp) {
        *a += b;
    }
    Ok(dgrid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::set_dense_identity;

    fn identity_params(level: usize, c: usize, alpha: f64, beta: f64) -> ParamStore {
        let mut p = ParamStore::new(0);
        let pre = prefix(level);
        p.insert(format!("{pre}.alpha"), &[], vec![alpha]).unwrap();
        p.insert(format!("{pre}.beta"), &[], vec![beta]).unwrap();
        set_dense_identity(&mut p, &value_map_name(level), c).unwrap();
        p
    }

    #[test]
    fn flattening_is_row_major_and_invertible() {
        let g = FeatureGrid::from_vec(2, 3, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let pts = image_to_pseudo_points(&g);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts.features, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(pts.coords[4], [1.0, 1.0, 0.0]);
        assert_eq!(pseudo_points_to_image(&pts, 2, 3).unwrap(), g);
    }

    #[test]
    fn single_center_takes_its_whole_region() {
        let g = FeatureGrid::from_vec(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let pseudo = image_to_pseudo_points(&g);
        let centers = PointFeatureSet::new(2, vec![1.0, 0.0], vec![[0.0, 0.0, 0.0]]).unwrap();
        let part = RegionPartition::new(2, 2, 2, 2).unwrap();
        let a = assign_clusters(&centers, &pseudo, &part, false).unwrap();
        assert_eq!(a.members[0], vec![0, 1, 2, 3]);
        assert!((a.similarities[0] - 1.0).abs() < 1e-12);
        assert!((a.similarities[2] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(a.is_consistent());
    }

    #[test]
    fn identical_feature_is_maximally_similar() {
        let g = FeatureGrid::from_vec(1, 3, 2, vec![0.3, 0.9, -1.0, 0.2, 0.5, 0.5]).unwrap();
        let pseudo = image_to_pseudo_points(&g);
        let centers = PointFeatureSet::new(
            2,
            vec![1.0, 0.0, -1.0, 0.2, 0.0, 1.0],
            vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]],
        )
        .unwrap();
        let part = RegionPartition::new(1, 3, 1, 3).unwrap();
        let a = assign_clusters(&centers, &pseudo, &part, false).unwrap();
        assert_eq!(a.center_of[1], Some(1));
        assert!((a.similarities[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_region_leaves_points_unassigned() {
        let g = FeatureGrid::from_vec(2, 4, 1, vec![1.0; 8]).unwrap();
        let pseudo = image_to_pseudo_points(&g);
        let centers = PointFeatureSet::new(1, vec![1.0], vec![[0.0, 0.5, 0.0]]).unwrap();
        let part = RegionPartition::new(2, 4, 2, 2).unwrap();
        let a = assign_clusters(&centers, &pseudo, &part, false).unwrap();
        assert_eq!(a.unassigned(), 4);
        assert_eq!(a.members[0], vec![0, 1, 4, 5]);
    }

    #[test]
    fn zero_norm_similarity_is_zero() {
        let g = FeatureGrid::from_vec(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let pseudo = image_to_pseudo_points(&g);
        let centers = PointFeatureSet::new(2, vec![1.0, 1.0], vec![[0.0, 0.0, 0.0]]).unwrap();
        let part = RegionPartition::new(1, 2, 1, 2).unwrap();
        let a = assign_clusters(&centers, &pseudo, &part, false).unwrap();
        assert_eq!(a.similarities[0], 0.0);
        assert!(a.similarities.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn empty_cluster_returns_center_feature() {
        let p = identity_params(0, 2, 1.0, 0.0);
        let centers = PointFeatureSet::new(2, vec![0.4, -0.3], vec![[0.0; 3]]).unwrap();
        let pseudo = PointFeatureSet::new(2, vec![1.0, 1.0], vec![[0.0; 3]]).unwrap();
        let a = ClusterAssignment {
            center_of: vec![None],
            members: vec![vec![]],
            similarities: vec![0.0],
        };
        let out = aggregate_clusters(&p, 0, &a, &centers, &pseudo).unwrap();
        assert_eq!(out.features, vec![0.4, -0.3]);
    }

    #[test]
    fn zero_gate_parameters_halve_member_weight() {
        let p = identity_params(0, 2, 0.0, 0.0);
        let centers = PointFeatureSet::new(2, vec![0.4, -0.3], vec![[0.0; 3]]).unwrap();
        let pseudo = PointFeatureSet::new(2, vec![1.0, 2.0], vec![[0.0; 3]]).unwrap();
        let a = ClusterAssignment {
            center_of: vec![Some(0)],
            members: vec![vec![0]],
            similarities: vec![0.37],
        };
        let out = aggregate_clusters(&p, 0, &a, &centers, &pseudo).unwrap();
        assert!((out.features[0] - (0.4 + 0.5) / 1.5).abs() < 1e-12);
        assert!((out.features[1] - (-0.3 + 1.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn masked_points_get_zero_rows() {
        let p = identity_params(0, 3, 1.0, 0.0);
        let g = FeatureGrid::from_vec(2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let opts = LocalFuseOptions {
            region_h: 2,
            region_w: 2,
            with_positions: false,
            on_values: false,
        };
        let (out, _) = local_fuse(&p, 0, opts, &g, &[[0.5, 0.5], [1.0, 1.0]], &[false, false]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_image_fixed_point() {
        let p = identity_params(0, 3, 1.3, -0.2);
        let g = FeatureGrid::from_vec(4, 4, 3, [0.2, -0.7, 1.1].repeat(16)).unwrap();
        let opts = LocalFuseOptions {
            region_h: 2,
            region_w: 2,
            with_positions: false,
            on_values: false,
        };
        let (out, cache) = local_fuse(&p, 0, opts, &g, &[[1.3, 2.6]], &[true]).unwrap();
        for (v, w) in out.iter().zip([0.2, -0.7, 1.1]) {
            assert!((v - w).abs() < 1e-12);
        }
        assert!(cache.assignment.similarities.iter().filter(|s| **s != 0.0).all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn feature_coordinate_mapping() {
        // Pixel centre of the first 2x2 block maps onto node 0.
        assert_eq!(image_to_feature_coords(&[[0.5, 0.5]], 2), vec![[0.0, 0.0]]);
        assert_eq!(image_to_feature_coords(&[[3.5, 1.5]], 4), vec![[0.5, 0.0]]);
    }
}
