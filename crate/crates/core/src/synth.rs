//! Synthetic LiDAR/camera frames with exact ground truth.
//!
//! Points are drawn in a forward-facing sector in front of the sensor so
//! most of them land in the synthetic camera. Images are point splats: each
//! projected point paints a 3x3 patch with a colour derived from its
//! position, nearest point on top.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{write_image, write_poses, write_scan, CalibFile, Frame, KittiSequence};
use crate::error::{Result, VloError};
use crate::geometry::{transform_points, PoseSE3, Quaternion, Vec3};
use crate::projection::{CameraModel, LidarScan};
use crate::tensor::FeatureGrid;

/// Seed of the canonical pair used by the micro-scale overfit check.
pub const CANONICAL_SEED: u64 = 20240611;

pub const SPLAT_RADIUS: isize = 1;

/// Camera matching the micro profile's 64 x 192 image.
pub fn synthetic_camera() -> CameraModel {
    CameraModel {
        fx: 120.0,
        fy: 120.0,
        cx: 96.0,
        cy: 32.0,
        image_width: 192,
        image_height: 64,
        extrinsic: CameraModel::lidar_axes_to_camera(),
    }
}

/// Exact size of the ground-truth motion: rotation angle (radians) about a
/// random axis and translation norm (meters) along a random direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseMagnitude {
    pub rotation: f64,
    pub translation: f64,
}

impl PoseMagnitude {
    pub fn new(rotation: f64, translation: f64) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub seed: u64,
    pub source: LidarScan,
    pub target: LidarScan,
    pub source_image: FeatureGrid,
    pub target_image: FeatureGrid,
    /// Maps source points into the target frame.
    pub gt: PoseSE3,
    pub camera: CameraModel,
    /// Per-point colour, shared by both scans.
    pub colors: Vec<[f64; 3]>,
}

impl SyntheticPair {
    /// `(source, target)` frames ready for the pipeline; the source is frame
    /// 1 and the target frame 0.
    pub fn frames(&self) -> (Frame, Frame) {
        (
            Frame {
                index: 1,
                scan: self.source.clone(),
                image: self.source_image.clone(),
                camera: self.camera,
            },
            Frame {
                index: 0,
                scan: self.target.clone(),
                image: self.target_image.clone(),
                camera: self.camera,
            },
        )
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Smooth colour field so neighbouring points look alike; quantized to
/// 8 bits so images survive PNG storage exactly.
pub fn point_color(p: Vec3) -> [f64; 3] {
    [
        quantize(0.5 + 0.45 * (0.9 * p[0] + 0.4 * p[2]).sin()),
        quantize(0.5 + 0.45 * (0.7 * p[1] - 0.3 * p[0]).sin()),
        quantize(0.5 + 0.45 * (1.3 * p[2] + 0.5 * p[1]).cos()),
    ]
}

fn sample_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let r: f64 = rng.random_range(5.0..25.0);
            let az: f64 = rng.random_range(-30f64..30.0).to_radians();
            let el: f64 = rng.random_range(-12f64..1.0).to_radians();
            // f32-representable so scans survive the velodyne format exactly.
            [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()].map(|v| v as f32 as f64)
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, m: PoseMagnitude) -> PoseSE3 {
    let axis = random_unit(rng);
    let dir = random_unit(rng);
    if m.rotation == 0.0 && m.translation == 0.0 {
        return PoseSE3::identity();
    }
    PoseSE3::new(Quaternion::from_axis_angle(axis, m.rotation), dir.map(|v| v * m.translation))
}

/// Splats every point into a blank image; nearest depth wins, ties go to
/// the lower index.
pub fn render(points: &[Vec3], colors: &[[f64; 3]], cam: &CameraModel) -> FeatureGrid {
    let (w, h) = (cam.image_width, cam.image_height);
    let mut img = FeatureGrid::zeros(h, w, 3);
    let mut depth = vec![f64::INFINITY; w * h];
    for (p, color) in points.iter().zip(colors) {
        let pc = cam.extrinsic.transform_point(*p);
        if pc[2] <= 0.1 {
            continue;
        }
        let u = (cam.fx * pc[0] / pc[2] + cam.cx).round() as isize;
        let v = (cam.fy * pc[1] / pc[2] + cam.cy).round() as isize;
        for dv in -SPLAT_RADIUS..=SPLAT_RADIUS {
            for du in -SPLAT_RADIUS..=SPLAT_RADIUS {
                let (x, y) = (u + du, v + dv);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let cell = y as usize * w + x as usize;
                if pc[2] < depth[cell] {
                    depth[cell] = pc[2];
                    img.data[cell * 3..cell * 3 + 3].copy_from_slice(color);
                }
            }
        }
    }
    img
}

/// Deterministic pair: `target = gt(source) + N(0, noise_sigma)`.
pub fn generate_pair(
    seed: u64,
    n_points: usize,
    magnitude: PoseMagnitude,
    noise_sigma: f64,
    cam: &CameraModel,
) -> Result<SyntheticPair> {
    if n_points < 8 {
        return Err(VloError::InvalidInput(format!("need at least 8 points, got {n_points}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(VloError::InvalidInput(format!("invalid noise sigma {noise_sigma}")));
    }
    cam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = sample_scene(&mut rng, n_points);
    let gt = random_pose(&mut rng, magnitude);
    let mut target = transform_points(&gt, &source);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for p in &mut target {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let colors: Vec<[f64; 3]> = source.iter().map(|p| point_color(*p)).collect();
    Ok(SyntheticPair {
        seed,
        source_image: render(&source, &colors, cam),
        target_image: render(&target, &colors, cam),
        source: LidarScan::new(source)?,
        target: LidarScan::new(target)?,
        gt,
        camera: *cam,
        colors,
    })
}

/// The pinned pair for the overfit check: 512 points, 5 degrees, 0.3 m,
/// no noise.
pub fn canonical_pair() -> Result<SyntheticPair> {
    generate_pair(CANONICAL_SEED, 512, PoseMagnitude::new(5f64.to_radians(), 0.3), 0.0, &synthetic_camera())
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceSpec {
    pub seed: u64,
    pub frames: usize,
    pub n_points: usize,
    pub magnitude: PoseMagnitude,
    pub noise_sigma: f64,
}

/// Writes a synthetic sequence in the KITTI layout. Every step applies the
/// same relative motion; scan `i + 1` is scan `i` moved by its inverse, so
/// the LiDAR-frame relative ground truth of every pair is that motion.
/// Ground-truth poses are written in the camera frame, as KITTI does.
pub fn write_sequence(root: &Path, id: &str, spec: &SequenceSpec) -> Result<PoseSE3> {
    if spec.frames < 2 {
        return Err(VloError::InvalidInput("a sequence needs at least 2 frames".into()));
    }
    let cam = synthetic_camera();
    let pair = generate_pair(spec.seed, spec.n_points, spec.magnitude, 0.0, &cam)?;
    let step_inv = pair.gt.inverse();
    let normal = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);

    let dir = KittiSequence::sequence_dir(root, id);
    std::fs::create_dir_all(dir.join("velodyne"))?;
    std::fs::create_dir_all(dir.join("image_2"))?;
    std::fs::create_dir_all(root.join("poses"))?;
    CalibFile::from_camera(&cam).save(&dir.join("calib.txt"))?;

    let tr = cam.extrinsic;
    let mut lidar_pose = PoseSE3::identity();
    let mut pts = pair.target.points.clone();
    let mut cam_poses = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let mut noisy = pts.clone();
        if let Some(n) = &normal {
            for p in &mut noisy {
                for v in p.iter_mut() {
                    *v += n.sample(&mut rng);
                }
            }
        }
        let image = render(&noisy, &pair.colors, &cam);
        write_scan(&dir.join("velodyne").join(format!("{i:06}.bin")), &LidarScan::new(noisy)?)?;
        write_image(&dir.join("image_2").join(format!("{i:06}.png")), &image)?;
        cam_poses.push(tr.compose(&lidar_pose).compose(&tr.inverse()));
        pts = transform_points(&step_inv, &pts);
        lidar_pose = lidar_pose.compose(&pair.gt);
    }
    write_poses(&KittiSequence::pose_path(root, id), &cam_poses)?;
    Ok(pair.gt)
}

/// Angle between two poses' rotations (radians) and distance between their
/// translations (meters).
pub fn pose_errors(est: &PoseSE3, gt: &PoseSE3) -> (f64, f64) {
    let rel = gt.inverse().compose(est);
    let dt = [est.t[0] - gt.t[0], est.t[1] - gt.t[1], est.t[2] - gt.t[2]];
    (rel.rotation_angle(), (dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2]).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project_to_image;

    #[test]
    fn zero_magnitude_is_identity() {
        let p = generate_pair(1, 64, PoseMagnitude::zero(), 0.0, &synthetic_camera()).unwrap();
        assert_eq!(p.gt, PoseSE3::identity());
        assert_eq!(p.source.points, p.target.points);
        assert_eq!(p.source_image, p.target_image);
    }

    #[test]
    fn same_seed_same_pair() {
        let a = generate_pair(9, 100, PoseMagnitude::new(0.1, 0.5), 0.01, &synthetic_camera()).unwrap();
        let b = generate_pair(9, 100, PoseMagnitude::new(0.1, 0.5), 0.01, &synthetic_camera()).unwrap();
        assert_eq!(a.target.points, b.target.points);
        assert_eq!(a.target_image, b.target_image);
    }

    #[test]
    fn magnitude_is_exact() {
        let p = generate_pair(3, 32, PoseMagnitude::new(0.2, 0.7), 0.0, &synthetic_camera()).unwrap();
        assert!((p.gt.rotation_angle() - 0.2).abs() < 1e-12);
        assert!(((p.gt.t[0].powi(2) + p.gt.t[1].powi(2) + p.gt.t[2].powi(2)).sqrt() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn most_points_are_visible() {
        let p = canonical_pair().unwrap();
        let (_, m) = project_to_image(&p.source.points, &p.camera).unwrap();
        assert!(m.count() as f64 > 0.95 * p.source.len() as f64);
        let (_, m) = project_to_image(&p.target.points, &p.camera).unwrap();
        assert!(m.count() as f64 > 0.8 * p.target.len() as f64);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(generate_pair(1, 7, PoseMagnitude::zero(), 0.0, &synthetic_camera()).is_err());
    }
}
