//! Structure alignment between LiDAR points and images: the cylindrical
//! pseudo-image, pinhole projection onto the camera plane and the fusion
//! mask derived from it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, VloError};
use crate::geometry::{PoseSE3, Vec3};
use crate::tensor::FeatureGrid;

/// Near-plane cutoff (meters) for the fusion mask.
pub const DEFAULT_Z_MIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub points: Vec<Vec3>,
    pub intensity: Option<Vec<f64>>,
}

impl LidarScan {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let scan = Self {
            points,
            intensity: None,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn with_intensity(points: Vec<Vec3>, intensity: Vec<f64>) -> Result<Self> {
        let scan = Self {
            points,
            intensity: Some(intensity),
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(VloError::InvalidInput("scan has no points".into()));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(VloError::InvalidInput(format!("non-finite point at index {i}")));
        }
        if let Some(int) = &self.intensity {
            if int.len() != self.points.len() {
                return Err(shape_err("scan intensity", self.points.len(), int.len()));
            }
        }
        Ok(())
    }
}

/// Geometry of the cylindrical range image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylindricalConfig {
    /// Azimuth step per column (radians).
    pub delta_theta: f64,
    /// Elevation step per row (radians).
    pub delta_phi: f64,
    pub width: usize,
    pub height: usize,
    /// Elevation (radians) of row 0, the top beam.
    pub vertical_offset: f64,
}

impl Default for CylindricalConfig {
    /// 64 x 1800 grid over the HDL-64E elevation span (+2.0 to -24.8 deg).
    fn default() -> Self {
        Self::from_fov(64, 1800, 2.0, -24.8)
    }
}

impl CylindricalConfig {
    /// Grid whose first and last rows sit exactly on the `fov_up_deg` and
    /// `fov_down_deg` beams.
    pub fn from_fov(height: usize, width: usize, fov_up_deg: f64, fov_down_deg: f64) -> Self {
        let span = (fov_up_deg - fov_down_deg).to_radians();
        let delta_phi = if height > 1 {
            span / (height - 1) as f64
        } else {
            span.max(1e-6)
        };
        Self {
            delta_theta: 2.0 * PI / width as f64,
            delta_phi,
            width,
            height,
            vertical_offset: fov_up_deg.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(VloError::Config("cylindrical grid must be at least 1x1".into()));
        }
        if !(self.delta_theta > 0.0 && self.delta_phi > 0.0) {
            return Err(VloError::Config("angular resolutions must be positive".into()));
        }
        if (self.width as f64 * self.delta_theta - 2.0 * PI).abs() > self.delta_theta {
            return Err(VloError::Config(format!(
                "width {} x delta_theta {} does not cover 360 degrees",
                self.width, self.delta_theta
            )));
        }
        Ok(())
    }

    /// Grid cell of a point, or `None` if it falls outside the vertical span
    /// or sits at the origin.
    pub fn cell_of(&self, p: Vec3) -> Option<(usize, usize)> {
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if range == 0.0 {
            return None;
        }
        let azimuth = p[1].atan2(p[0]);
        let mut col = (azimuth / self.delta_theta).round() as i64;
        let w = self.width as i64;
        col = col.rem_euclid(w);
        let elevation = (p[2] / range).clamp(-1.0, 1.0).asin();
        let row = ((self.vertical_offset - elevation) / self.delta_phi).round() as i64;
        if row < 0 || row >= self.height as i64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

/// Cylindrical range image. Each occupied cell stores the raw xyz of the
/// point that won the cell and that point's index in the source scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoImage {
    pub height: usize,
    pub width: usize,
    /// `height * width` xyz triples, zero where unoccupied.
    pub xyz: Vec<Vec3>,
    pub point_index: Vec<Option<usize>>,
    /// Number of source points that fell outside the grid or sat at the origin.
    pub dropped: usize,
}

impl PseudoImage {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            xyz: vec![[0.0; 3]; height * width],
            point_index: vec![None; height * width],
            dropped: 0,
        }
    }

    pub fn occupied(&self, r: usize, c: usize) -> bool {
        self.point_index[r * self.width + c].is_some()
    }

    pub fn occupancy(&self) -> Vec<bool> {
        self.point_index.iter().map(Option::is_some).collect()
    }

    /// Occupied cells in row-major order as `(flat cell index, scan index)`.
    pub fn occupied_cells(&self) -> Vec<(usize, usize)> {
        self.point_index
            .iter()
            .enumerate()
            .filter_map(|(cell, idx)| idx.map(|i| (cell, i)))
            .collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.point_index.iter().filter(|p| p.is_some()).count()
    }

    /// Stored coordinates of the occupied cells, row-major.
    pub fn occupied_xyz(&self) -> Vec<Vec3> {
        self.occupied_cells()
            .iter()
            .map(|&(cell, _)| self.xyz[cell])
            .collect()
    }

    /// Halves the resolution (ceil). A coarse cell is occupied if any cell in
    /// its 2x2 block is; the nearest-range point of the block represents it.
    pub fn decimate(&self) -> PseudoImage {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        let mut out = PseudoImage::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                let mut best: Option<(f64, usize, usize)> = None;
                for rr in 2 * r..(2 * r + 2).min(self.height) {
                    for cc in 2 * c..(2 * c + 2).min(self.width) {
                        let cell = rr * self.width + cc;
                        if let Some(idx) = self.point_index[cell] {
                            let p = self.xyz[cell];
                            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                            let better = match best {
                                None => true,
                                Some((br, bi, _)) => range < br || (range == br && idx < bi),
                            };
                            if better {
                                best = Some((range, idx, cell));
                            }
                        }
                    }
                }
                if let Some((_, idx, cell)) = best {
                    out.xyz[r * w + c] = self.xyz[cell];
                    out.point_index[r * w + c] = Some(idx);
                }
            }
        }
        out
    }
}

/// Projects a scan onto the cylindrical grid. Collisions keep the point with
/// the smaller range, ties going to the lower point index.
pub fn cylindrical_project(scan: &LidarScan, cfg: &CylindricalConfig) -> Result<PseudoImage> {
    scan.validate()?;
    cfg.validate()?;
    let mut img = PseudoImage::empty(cfg.height, cfg.width);
    let mut best_range = vec![f64::INFINITY; cfg.height * cfg.width];
    for (i, &p) in scan.points.iter().enumerate() {
        let Some((r, c)) = cfg.cell_of(p) else {
            img.dropped += 1;
            continue;
        };
        let cell = r * cfg.width + c;
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        // Points are visited in index order, so strict `<` keeps the lower
        // index on equal range.
        if range < best_range[cell] {
            if img.point_index[cell].is_some() {
                img.dropped += 1;
            }
            best_range[cell] = range;
            img.xyz[cell] = p;
            img.point_index[cell] = Some(i);
        } else {
            img.dropped += 1;
        }
    }
    Ok(img)
}

/// Pinhole camera with a LiDAR-to-camera extrinsic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub extrinsic: PoseSE3,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(VloError::InvalidInput("focal lengths must be positive".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(VloError::InvalidInput("image dimensions must be positive".into()));
        }
        Ok(())
    }

    /// LiDAR (x forward, y left, z up) to camera (x right, y down, z forward)
    /// axis permutation with no offset.
    pub fn lidar_axes_to_camera() -> PoseSE3 {
        let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        PoseSE3 {
            q: crate::geometry::Quaternion::from_rotation_matrix(&r),
            t: [0.0; 3],
        }
    }
}

/// Per-point flag: true when the point projects inside the image with
/// positive depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionMask {
    pub flags: Vec<bool>,
}

impl FusionMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// Projects points onto the image plane. Pixel coordinates are `(x', y')`
/// (column, row); masked-out points keep their (possibly meaningless)
/// coordinates.
pub fn project_to_image(points: &[Vec3], cam: &CameraModel) -> Result<(Vec<[f64; 2]>, FusionMask)> {
    project_to_image_with_zmin(points, cam, DEFAULT_Z_MIN)
}

pub fn project_to_image_with_zmin(
    points: &[Vec3],
    cam: &CameraModel,
    z_min: f64,
) -> Result<(Vec<[f64; 2]>, FusionMask)> {
    cam.validate()?;
    let mut coords = Vec::with_capacity(points.len());
    let mut flags = Vec::with_capacity(points.len());
    let (w, h) = (cam.image_width as f64, cam.image_height as f64);
    for &p in points {
        let pc = cam.extrinsic.transform_point(p);
        let z = pc[2];
        let (u, v) = if z.abs() > 1e-300 {
            (cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy)
        } else {
            (f64::NAN, f64::NAN)
        };
        let valid = z > z_min && u >= 0.0 && u < w && v >= 0.0 && v < h;
        coords.push([u, v]);
        flags.push(valid);
    }
    Ok((coords, FusionMask { flags }))
}

/// Places per-point rows (aligned with the scan that built `pseudo`) into
/// the grid; unoccupied cells are zero.
pub fn scatter_to_pseudo_image(values: &[f64], channels: usize, pseudo: &PseudoImage) -> Result<FeatureGrid> {
    if channels == 0 || values.len() % channels != 0 {
        return Err(shape_err("scatter values", format!("multiple of {channels}"), values.len()));
    }
    let n = values.len() / channels;
    let mut grid = FeatureGrid::zeros(pseudo.height, pseudo.width, channels);
    for (cell, idx) in pseudo.occupied_cells() {
        if idx >= n {
            return Err(shape_err("scatter values rows", format!("> {idx}"), n));
        }
        grid.data[cell * channels..(cell + 1) * channels]
            .copy_from_slice(&values[idx * channels..(idx + 1) * channels]);
    }
    Ok(grid)
}

/// Inverse of [`scatter_to_pseudo_image`]: returns `(scan index, row)` for
/// every occupied cell in row-major order.
pub fn gather_from_pseudo_image(grid: &FeatureGrid, pseudo: &PseudoImage) -> Result<Vec<(usize, Vec<f64>)>> {
    if grid.h != pseudo.height || grid.w != pseudo.width {
        return Err(shape_err(
            "gather grid",
            format!("{}x{}", pseudo.height, pseudo.width),
            format!("{}x{}", grid.h, grid.w),
        ));
    }
    Ok(pseudo
        .occupied_cells()
        .into_iter()
        .map(|(cell, idx)| (idx, grid.data[cell * grid.c..(cell + 1) * grid.c].to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_1800() -> CylindricalConfig {
        CylindricalConfig::default()
    }

    #[test]
    fn on_axis_point_lands_in_column_zero() {
        // Row 0 at +0 deg: the on-axis point sits on row 0.
        let cfg = CylindricalConfig {
            vertical_offset: 0.0,
            ..cfg_1800()
        };
        let img = cylindrical_project(&LidarScan::new(vec![[1.0, 0.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert!(img.occupied(0, 0));
        // With the default span the horizon row is round(2.0 / delta_phi_deg).
        let cfg = cfg_1800();
        let r0 = (cfg.vertical_offset / cfg.delta_phi).round() as usize;
        let img = cylindrical_project(&LidarScan::new(vec![[1.0, 0.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert!(img.occupied(r0, 0));
    }

    #[test]
    fn left_point_lands_in_column_450() {
        let cfg = cfg_1800();
        let r0 = (cfg.vertical_offset / cfg.delta_phi).round() as usize;
        let img = cylindrical_project(&LidarScan::new(vec![[0.0, 1.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert!(img.occupied(r0, 450));
        // Negative azimuth wraps to the end of the row.
        let img = cylindrical_project(&LidarScan::new(vec![[0.0, -1.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert!(img.occupied(r0, 1350));
    }

    #[test]
    fn nearest_range_wins_collisions() {
        let cfg = cfg_1800();
        let scan = LidarScan::new(vec![[7.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let img = cylindrical_project(&scan, &cfg).unwrap();
        assert_eq!(img.occupied_count(), 1);
        assert_eq!(img.occupied_cells()[0].1, 1);
        assert_eq!(img.occupied_xyz()[0], [5.0, 0.0, 0.0]);
        assert_eq!(img.dropped, 1);

        // Equal range keeps the lower index.
        let scan = LidarScan::new(vec![[5.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let img = cylindrical_project(&scan, &cfg).unwrap();
        assert_eq!(img.occupied_cells()[0].1, 0);
    }

    #[test]
    fn origin_point_is_dropped() {
        let scan = LidarScan::new(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let img = cylindrical_project(&scan, &cfg_1800()).unwrap();
        assert_eq!(img.dropped, 1);
        assert_eq!(img.occupied_count(), 1);
        assert!(img.xyz.iter().all(|p| p.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn out_of_span_rows_are_dropped() {
        let scan = LidarScan::new(vec![[0.0, 0.0, 1.0]]).unwrap();
        let img = cylindrical_project(&scan, &cfg_1800()).unwrap();
        assert_eq!(img.occupied_count(), 0);
        assert_eq!(img.dropped, 1);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CylindricalConfig {
            width: 900,
            ..cfg_1800()
        };
        let scan = LidarScan::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert!(cylindrical_project(&scan, &cfg).is_err());
    }

    fn random_scan(rng: &mut ChaCha8Rng, n: usize) -> LidarScan {
        LidarScan::new(
            (0..n)
                .map(|_| {
                    let r: f64 = rng.random_range(2.0..40.0);
                    let az: f64 = rng.random_range(-PI..PI);
                    let el: f64 = rng.random_range(-0.4..0.03);
                    [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stored_xyz_reprojects_to_own_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = cfg_1800();
        let img = cylindrical_project(&random_scan(&mut rng, 5000), &cfg).unwrap();
        for (cell, _) in img.occupied_cells() {
            let (r, c) = cfg.cell_of(img.xyz[cell]).unwrap();
            assert_eq!(r * cfg.width + c, cell);
        }
        // Fill value invariant.
        for (cell, idx) in img.point_index.iter().enumerate() {
            if idx.is_none() {
                assert_eq!(img.xyz[cell], [0.0; 3]);
            }
        }
    }

    #[test]
    fn grid_aligned_rotation_shifts_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = cfg_1800();
        // Points placed at cell centres so rounding is unambiguous.
        let pts: Vec<Vec3> = (0..400)
            .map(|_| {
                let col = rng.random_range(0..cfg.width) as f64;
                let row = rng.random_range(0..cfg.height) as f64;
                let az = col * cfg.delta_theta;
                let el = cfg.vertical_offset - row * cfg.delta_phi;
                let r = rng.random_range(3.0..30.0);
                [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
            })
            .collect();
        let scan = LidarScan::new(pts.clone()).unwrap();
        let base = cylindrical_project(&scan, &cfg).unwrap();
        let k = 37;
        let rot = PoseSE3::new(Quaternion::from_axis_angle([0.0, 0.0, 1.0], k as f64 * cfg.delta_theta), [0.0; 3]);
        let rotated = LidarScan::new(crate::geometry::transform_points(&rot, &pts)).unwrap();
        let shifted = cylindrical_project(&rotated, &cfg).unwrap();
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                assert_eq!(base.occupied(r, c), shifted.occupied(r, (c + k) % cfg.width));
            }
        }
    }

    fn test_camera() -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            image_width: 100,
            image_height: 100,
            extrinsic: PoseSE3::identity(),
        }
    }

    #[test]
    fn principal_ray_hits_principal_point() {
        let (px, mask) = project_to_image(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], &test_camera()).unwrap();
        assert_eq!(px[0], [50.0, 50.0]);
        assert_eq!(mask.flags, vec![true, false]);
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cam = CameraModel {
            fx: 721.5,
            fy: 721.5,
            cx: 609.6,
            cy: 172.9,
            image_width: 1242,
            image_height: 375,
            extrinsic: PoseSE3::new(
                Quaternion::from_axis_angle([0.3, -1.0, 0.2], 1.7),
                [0.1, -0.08, -0.3],
            ),
        };
        let pts: Vec<Vec3> = (0..200)
            .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)])
            .collect();
        let (px, mask) = project_to_image(&pts, &cam).unwrap();
        let k = nalgebra::Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
        let m = cam.extrinsic.to_matrix();
        let rt = nalgebra::Matrix3x4::from_fn(|i, j| m[i][j]);
        let p = k * rt;
        for (i, pt) in pts.iter().enumerate() {
            let h = p * nalgebra::Vector4::new(pt[0], pt[1], pt[2], 1.0);
            if h[2] > DEFAULT_Z_MIN {
                assert!((px[i][0] - h[0] / h[2]).abs() < 1e-6);
                assert!((px[i][1] - h[1] / h[2]).abs() < 1e-6);
            } else {
                assert!(!mask.flags[i]);
            }
        }
    }

    #[test]
    fn fusion_mask_monotone_in_image_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..5.0)])
            .collect();
        let small = test_camera();
        let big = CameraModel {
            image_width: 160,
            image_height: 140,
            ..small
        };
        let (_, ms) = project_to_image(&pts, &small).unwrap();
        let (_, mb) = project_to_image(&pts, &big).unwrap();
        for (a, b) in ms.flags.iter().zip(&mb.flags) {
            assert!(!a || *b);
        }
    }

    #[test]
    fn coincident_points_both_reported() {
        let (px, mask) = project_to_image(&[[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]], &test_camera()).unwrap();
        assert_eq!(px.len(), 2);
        assert_eq!(px[0], px[1]);
        assert_eq!(mask.count(), 2);
    }

    #[test]
    fn scatter_single_point() {
        let scan = LidarScan::new(vec![[4.0, 0.0, 0.0]]).unwrap();
        let img = cylindrical_project(&scan, &cfg_1800()).unwrap();
        let grid = scatter_to_pseudo_image(&[1.5, -2.0], 2, &img).unwrap();
        let (cell, _) = img.occupied_cells()[0];
        for (i, v) in grid.data.iter().enumerate() {
            if i / 2 == cell {
                assert_ne!(*v, 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn scatter_gather_matches_brute_force_with_collisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = CylindricalConfig::from_fov(8, 24, 2.0, -24.8);
        let scan = random_scan(&mut rng, 300);
        let img = cylindrical_project(&scan, &cfg).unwrap();
        assert!(img.dropped > 0);
        let c = 3;
        let values: Vec<f64> = (0..scan.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = scatter_to_pseudo_image(&values, c, &img).unwrap();
        let rows = gather_from_pseudo_image(&grid, &img).unwrap();

        // Brute force: for every cell, the winning point is the minimum
        // (range, index) among the points that map there.
        let mut winners = Vec::new();
        for cell in 0..cfg.height * cfg.width {
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in scan.points.iter().enumerate() {
                if let Some((r, col)) = cfg.cell_of(*p) {
                    if r * cfg.width + col == cell {
                        let range = crate::geometry::norm3(*p);
                        if best.is_none_or(|(br, bi)| range < br || (range == br && i < bi)) {
                            best = Some((range, i));
                        }
                    }
                }
            }
            if let Some((_, i)) = best {
                winners.push(i);
            }
        }
        assert_eq!(rows.len(), winners.len());
        for ((idx, row), w) in rows.iter().zip(&winners) {
            assert_eq!(idx, w);
            assert_eq!(row.as_slice(), &values[w * c..(w + 1) * c]);
        }
    }

    #[test]
    fn decimate_keeps_nearest_in_block() {
        let cfg = CylindricalConfig::from_fov(8, 24, 2.0, -24.8);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let img = cylindrical_project(&random_scan(&mut rng, 400), &cfg).unwrap();
        let half = img.decimate();
        assert_eq!((half.height, half.width), (4, 12));
        for r in 0..half.height {
            for c in 0..half.width {
                let block: Vec<Vec3> = (2 * r..2 * r + 2)
                    .flat_map(|rr| (2 * c..2 * c + 2).map(move |cc| (rr, cc)))
                    .filter(|&(rr, cc)| img.occupied(rr, cc))
                    .map(|(rr, cc)| img.xyz[rr * img.width + cc])
                    .collect();
                assert_eq!(half.occupied(r, c), !block.is_empty());
                if let Some(min) = block.iter().map(|p| crate::geometry::norm3(*p)).reduce(f64::min) {
                    assert_eq!(crate::geometry::norm3(half.xyz[r * half.width + c]), min);
                }
            }
        }
    }
}
