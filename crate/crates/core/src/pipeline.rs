//! End-to-end two-frame network: encoders, fusion, pose head, loss.

use crate::config::{PipelineConfig, LEVELS};
use std::time::Instant;

use crate::dataio::{CalibFile, Frame, KittiSequence};
use crate::eval::accumulate_trajectory;
use crate::error::{Result, VloError};
use crate::geometry::grad::PoseGrad;
use crate::geometry::{PoseSE3, Vec3};
use crate::global_fuser::{global_fuse_rows, global_fuse_rows_backward, init_global_fuser, GlobalFuseCache};
use crate::local_fuser::{image_to_feature_coords, init_local_fuser, local_fuse, local_fuse_backward, LocalFuseCache, LocalFuseOptions};
use crate::loss::{init_loss_params, pyramid_loss};
use crate::nn::pyramid::{
    image_pyramid, image_pyramid_backward, init_image_pyramid, init_point_pyramid, point_pyramid,
    point_pyramid_backward, ImagePyramidCache, PointPyramidCache,
};
use crate::nn::{ParamStore, PointLevel};
use crate::pose_head::{init_pose_head, iterative_estimate, iterative_estimate_backward, IterativeCache, LevelPair};
use crate::projection::{cylindrical_project, project_to_image_with_zmin, PseudoImage};
use crate::tensor::{FeatureGrid, PointFeatureSet};

/// Fresh parameters for every module, seeded by `cfg.seed`.
pub fn init_params(cfg: &PipelineConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new(cfg.seed);
    init_image_pyramid(&mut p, &cfg.channels.image);
    init_point_pyramid(&mut p, &cfg.channels.point);
    for l in 0..LEVELS {
        let (c, d) = (cfg.channels.image[l], cfg.channels.point[l]);
        init_local_fuser(&mut p, l, c);
        init_global_fuser(&mut p, l, c, d);
        init_pose_head(&mut p, l, d)?;
    }
    init_loss_params(&mut p, &cfg.loss);
    Ok(p)
}

/// Loads weights and checks them against the shapes `cfg` implies.
pub fn load_params(cfg: &PipelineConfig, manifest: &std::path::Path) -> Result<ParamStore> {
    let params = ParamStore::load(manifest)?;
    params.validate_against(&init_params(cfg)?)?;
    Ok(params)
}

/// Zeroes every level's regression weights so each level outputs the
/// identity residual and the network predicts the identity pose.
pub fn zero_pose_heads(params: &mut ParamStore) -> Result<()> {
    for l in 0..LEVELS {
        let p = crate::pose_head::prefix(l);
        for fc in ["fc_q", "fc_t"] {
            params.data_mut(&format!("{p}.{fc}.weight"))?.fill(0.0);
        }
    }
    Ok(())
}

/// Fused features of one pyramid level of one frame.
#[derive(Clone, Debug)]
pub struct EncodedLevel {
    pub channels: usize,
    pub xyz: Vec<Vec3>,
    /// `N x D` globally fused features.
    pub fused: Vec<f64>,
    /// Whether each point projects into the image.
    pub mask: Vec<bool>,
}

impl EncodedLevel {
    /// Points that take part in matching, with their row indices.
    pub fn matchable(&self) -> (PointFeatureSet, Vec<usize>) {
        let set = PointFeatureSet {
            channels: self.channels,
            features: self.fused.clone(),
            coords: self.xyz.clone(),
            mask: None,
        };
        set.select(&self.mask)
    }
}

#[derive(Clone, Debug)]
pub struct FrameCache {
    pub pseudo: PseudoImage,
    pub point_levels: Vec<PointLevel>,
    point_cache: PointPyramidCache,
    pub image_levels: Vec<FeatureGrid>,
    image_cache: ImagePyramidCache,
    pub local: Vec<LocalFuseCache>,
    global: Vec<GlobalFuseCache>,
}

/// Runs both encoders and both fusion stages on one frame.
pub fn encode_frame(params: &ParamStore, cfg: &PipelineConfig, frame: &Frame) -> Result<(Vec<EncodedLevel>, FrameCache)> {
    let pseudo = cylindrical_project(&frame.scan, &cfg.cylindrical)?;
    let (point_levels, point_cache) = point_pyramid(params, &pseudo)?;
    let (image_levels, image_cache) = image_pyramid(params, &frame.image, (cfg.image.pad_height, cfg.image.pad_width))?;
    let mut out = Vec::with_capacity(LEVELS);
    let mut local = Vec::with_capacity(LEVELS);
    let mut global = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let pts = &point_levels[l].points;
        let (px, mask) = project_to_image_with_zmin(&pts.coords, &frame.camera, cfg.z_min)?;
        let coords = image_to_feature_coords(&px, PipelineConfig::level_stride(l));
        let opts = LocalFuseOptions::from_config(cfg, l);
        let (fl, lc) = local_fuse(params, l, opts, &image_levels[l], &coords, &mask.flags)?;
        let (fg, gc) = global_fuse_rows(params, l, &pts.features, &fl, &mask.flags)?;
        log::debug!(
            "frame {} level {l}: {} points, {} fusable",
            frame.index,
            pts.len(),
            mask.count()
        );
        out.push(EncodedLevel {
            channels: pts.channels,
            xyz: pts.coords.clone(),
            fused: fg,
            mask: mask.flags,
        });
        local.push(lc);
        global.push(gc);
    }
    Ok((
        out,
        FrameCache {
            pseudo,
            point_levels,
            point_cache,
            image_levels,
            image_cache,
            local,
            global,
        },
    ))
}

/// Adjoint of [`encode_frame`] given adjoints of every level's fused rows.
pub fn encode_frame_backward(
    params: &ParamStore,
    cache: &FrameCache,
    dfused: &[Vec<f64>],
    grads: &mut ParamStore,
) -> Result<()> {
    let mut dimage = Vec::with_capacity(LEVELS);
    let mut dpoints = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let (dfp, dfl) = global_fuse_rows_backward(params, &cache.global[l], &dfused[l], grads)?;
        dimage.push(local_fuse_backward(params, &cache.image_levels[l], &cache.local[l], &dfl, grads)?);
        dpoints.push(dfp);
    }
    image_pyramid_backward(params, &cache.image_cache, &dimage, grads)?;
    point_pyramid_backward(params, &cache.point_levels, &cache.point_cache, &dpoints, grads)
}

#[derive(Clone, Debug)]
pub struct PairCache {
    pub source: FrameCache,
    pub target: FrameCache,
    pub source_levels: Vec<EncodedLevel>,
    pub target_levels: Vec<EncodedLevel>,
    level_pairs: Vec<LevelPair>,
    src_rows: Vec<Vec<usize>>,
    tgt_rows: Vec<Vec<usize>>,
    head: IterativeCache,
}

/// Estimates the pose mapping `source` points into the `target` frame.
/// Returns the per-level poses, coarsest first; the last entry is the final
/// estimate.
pub fn forward_pair(
    params: &ParamStore,
    cfg: &PipelineConfig,
    source: &Frame,
    target: &Frame,
) -> Result<(Vec<PoseSE3>, PairCache)> {
    let (source_levels, sc) = encode_frame(params, cfg, source)?;
    let (target_levels, tc) = encode_frame(params, cfg, target)?;
    let mut level_pairs = Vec::with_capacity(LEVELS);
    let mut src_rows = Vec::with_capacity(LEVELS);
    let mut tgt_rows = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let (src, si) = source_levels[l].matchable();
        let (tgt, ti) = target_levels[l].matchable();
        if src.is_empty() || tgt.is_empty() {
            return Err(VloError::InvalidInput(format!(
                "level {l}: no points project into the image (source {}, target {})",
                src.len(),
                tgt.len()
            )));
        }
        level_pairs.push(LevelPair { src, tgt });
        src_rows.push(si);
        tgt_rows.push(ti);
    }
    let (poses, head) = iterative_estimate(params, &level_pairs, cfg.knn)?;
    Ok((
        poses,
        PairCache {
            source: sc,
            target: tc,
            source_levels,
            target_levels,
            level_pairs,
            src_rows,
            tgt_rows,
            head,
        },
    ))
}

fn scatter_rows(rows: &[usize], d: usize, total: usize, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; total * d];
    for (k, &r) in rows.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&values[k * d..(k + 1) * d]);
    }
    out
}

/// Adjoint of [`forward_pair`] given pose adjoints (coarsest first).
pub fn backward_pair(params: &ParamStore, cache: &PairCache, dposes: &[PoseGrad], grads: &mut ParamStore) -> Result<()> {
    let g = iterative_estimate_backward(params, &cache.level_pairs, &cache.head, dposes, grads)?;
    let mut dsrc = Vec::with_capacity(LEVELS);
    let mut dtgt = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let (s, t) = (&cache.source_levels[l], &cache.target_levels[l]);
        dsrc.push(scatter_rows(&cache.src_rows[l], s.channels, s.xyz.len(), &g[l].src_features));
        dtgt.push(scatter_rows(&cache.tgt_rows[l], t.channels, t.xyz.len(), &g[l].tgt_features));
    }
    encode_frame_backward(params, &cache.source, &dsrc, grads)?;
    encode_frame_backward(params, &cache.target, &dtgt, grads)
}

/// Total loss of one pair and, optionally, its gradient.
pub fn pair_loss(
    params: &ParamStore,
    cfg: &PipelineConfig,
    source: &Frame,
    target: &Frame,
    gt: &PoseSE3,
    with_grad: bool,
) -> Result<(f64, Vec<PoseSE3>, Option<ParamStore>)> {
    let (poses, cache) = forward_pair(params, cfg, source, target)?;
    if !with_grad {
        let (loss, _) = pyramid_loss(params, &poses, gt, &cfg.loss.alpha, None)?;
        return Ok((loss, poses, None));
    }
    let mut grads = params.zeros_like();
    let (loss, dposes) = pyramid_loss(params, &poses, gt, &cfg.loss.alpha, Some(&mut grads))?;
    backward_pair(params, &cache, &dposes, &mut grads)?;
    Ok((loss, poses, Some(grads)))
}

/// Final (finest-level) pose for a pair.
pub fn estimate_pose(params: &ParamStore, cfg: &PipelineConfig, source: &Frame, target: &Frame) -> Result<PoseSE3> {
    let (poses, _) = forward_pair(params, cfg, source, target)?;
    Ok(*poses.last().expect("LEVELS > 0"))
}

#[derive(Clone, Debug)]
pub struct SequenceRun {
    /// LiDAR-frame estimate per consecutive pair; entry `i` maps scan
    /// `i + 1` into the frame of scan `i`.
    pub relative: Vec<PoseSE3>,
    /// Absolute camera-frame poses, one per frame, KITTI convention.
    pub trajectory: Vec<PoseSE3>,
    /// Wall-clock milliseconds per pair. Informational only.
    pub pair_ms: Vec<f64>,
}

impl SequenceRun {
    pub fn mean_ms(&self) -> f64 {
        if self.pair_ms.is_empty() {
            0.0
        } else {
            self.pair_ms.iter().sum::<f64>() / self.pair_ms.len() as f64
        }
    }
}

/// Estimates every consecutive pair of `seq` and chains the results.
pub fn run_sequence(params: &ParamStore, cfg: &PipelineConfig, seq: &KittiSequence) -> Result<SequenceRun> {
    let tr = PoseSE3::from_matrix(&CalibFile::load(&seq.calib)?.velo_to_cam(&seq.calib)?);
    let mut relative = Vec::with_capacity(seq.len().saturating_sub(1));
    let mut pair_ms = Vec::with_capacity(relative.capacity());
    let mut frames = seq.frames(cfg.image.pad_height, cfg.image.pad_width);
    let mut prev = match frames.next() {
        Some(f) => f?,
        None => return Err(VloError::InvalidInput("sequence has no frames".into())),
    };
    for frame in frames {
        let frame = frame?;
        let start = Instant::now();
        relative.push(estimate_pose(params, cfg, &frame, &prev)?);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("pair {}-{}: {ms:.1} ms", prev.index, frame.index);
        pair_ms.push(ms);
        prev = frame;
    }
    let tr_inv = tr.inverse();
    let trajectory = accumulate_trajectory(&relative)
        .iter()
        .map(|p| tr.compose(p).compose(&tr_inv))
        .collect();
    Ok(SequenceRun {
        relative,
        trajectory,
        pair_ms,
    })
}
