//! KITTI odometry file formats and sequence access.
//!
//! Layout:
//!
//! ```text
//! <root>/sequences/<id>/velodyne/NNNNNN.bin
//! <root>/sequences/<id>/image_2/NNNNNN.png
//! <root>/sequences/<id>/calib.txt
//! <root>/poses/<id>.txt            (optional)
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use image::{Rgb, RgbImage};
use nalgebra::Matrix3;

use crate::error::{Result, VloError};
use crate::geometry::{mat4_mul, Mat4, PoseSE3};
use crate::projection::{CameraModel, LidarScan};
use crate::tensor::FeatureGrid;

/// Largest Frobenius correction accepted when snapping a pose rotation onto
/// SO(3).
pub const MAX_ORTHO_CORRECTION: f64 = 1e-2;

fn load_err(path: &Path, reason: impl Into<String>) -> VloError {
    VloError::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| load_err(path, e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| load_err(path, e.to_string()))?;
    f.write_all(bytes).map_err(|e| load_err(path, e.to_string()))
}

/// Reads a velodyne `.bin` file: little-endian f32 quadruples `x y z i`.
pub fn load_scan(path: &Path) -> Result<LidarScan> {
    let bytes = read(path)?;
    if bytes.is_empty() {
        return Err(load_err(path, "empty scan file"));
    }
    if bytes.len() % 16 != 0 {
        return Err(load_err(
            path,
            format!("truncated scan: {} bytes, last record starts at offset {}", bytes.len(), bytes.len() / 16 * 16),
        ));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let mut v = [0f32; 4];
        for (k, b) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v[k].is_finite() {
                return Err(load_err(path, format!("non-finite value at byte offset {}", i * 16 + k * 4)));
            }
        }
        points.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        intensity.push(v[3] as f64);
    }
    LidarScan::with_intensity(points, intensity)
}

/// Writes a scan as f32 quadruples; missing intensity is written as 0.
/// Values are rounded to f32.
pub fn write_scan(path: &Path, scan: &LidarScan) -> Result<()> {
    let mut bytes = Vec::with_capacity(scan.len() * 16);
    for (i, p) in scan.points.iter().enumerate() {
        let inten = scan.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], inten] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}

/// Loads an 8-bit colour image as `H x W x 3` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<FeatureGrid> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| load_err(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| load_err(path, e.to_string()))?;
    let format = reader.format();
    let img = reader.decode().map_err(|e| {
        let name = format.map_or_else(
            || path.extension().and_then(|e| e.to_str()).unwrap_or("unknown").to_string(),
            |f| format!("{f:?}"),
        );
        load_err(path, format!("unsupported or corrupt image (format {name}): {e}"))
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    FeatureGrid::from_vec(h, w, 3, data)
}

/// Writes a 3-channel grid as an 8-bit PNG (values clamped to `[0, 1]`).
pub fn write_image(path: &Path, img: &FeatureGrid) -> Result<()> {
    if img.c != 3 {
        return Err(VloError::InvalidInput(format!("expected 3 channels, got {}", img.c)));
    }
    let mut out = RgbImage::new(img.w as u32, img.h as u32);
    for r in 0..img.h {
        for c in 0..img.w {
            let px = img.pixel(r, c);
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(c as u32, r as u32, Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
    }
    out.save(path).map_err(|e| load_err(path, e.to_string()))
}

/// Zero-pads on the right and bottom to `height x width`.
pub fn pad_image(img: &FeatureGrid, height: usize, width: usize) -> Result<FeatureGrid> {
    if img.h > height || img.w > width {
        return Err(VloError::InvalidInput(format!(
            "image {}x{} exceeds pad size {height}x{width}",
            img.h, img.w
        )));
    }
    let mut out = FeatureGrid::zeros(height, width, img.c);
    for r in 0..img.h {
        let src = &img.data[r * img.w * img.c..(r + 1) * img.w * img.c];
        out.data[r * width * img.c..r * width * img.c + src.len()].copy_from_slice(src);
    }
    Ok(out)
}

/// Raw contents of a KITTI `calib.txt`, keys in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibFile {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl CalibFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or_else(|| VloError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected `KEY: values`".into(),
            })?;
            let values = rest
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| VloError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("{key}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push((key.trim().to_string(), values));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    fn require(&self, key: &str, len: usize, path: &Path) -> Result<[f64; 12]> {
        let v = self.get(key).ok_or_else(|| VloError::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("missing key {key}"),
        })?;
        if v.len() != len {
            return Err(VloError::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("{key}: expected {len} values, got {}", v.len()),
            });
        }
        let mut out = [0.0; 12];
        out.copy_from_slice(v);
        Ok(out)
    }

    /// `KEY: v v v ...` lines with shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push(':');
            for x in v {
                s.push(' ');
                s.push_str(&format!("{x:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }

    /// Velodyne-to-camera-0 transform `Tr`, rotation snapped onto SO(3)
    /// (KITTI stores it to 7 significant digits).
    pub fn velo_to_cam(&self, path: &Path) -> Result<Mat4> {
        Ok(orthonormalize(&row12_to_mat4(&self.require("Tr", 12, path)?)).0)
    }

    /// Camera model of the left colour camera. The extrinsic maps LiDAR
    /// points into the rectified camera-2 frame: `T(b) * Tr` with `b` the
    /// offset encoded in the fourth column of `P2`.
    pub fn camera(&self, path: &Path, image_width: usize, image_height: usize) -> Result<CameraModel> {
        let p2 = self.require("P2", 12, path)?;
        let (fx, fy, cx, cy) = (p2[0], p2[5], p2[2], p2[6]);
        if fx == 0.0 || fy == 0.0 {
            return Err(VloError::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: "P2 has zero focal length".into(),
            });
        }
        let tz = p2[11];
        let tx = (p2[3] - cx * tz) / fx;
        let ty = (p2[7] - cy * tz) / fy;
        let mut offset = PoseSE3::identity().to_matrix();
        offset[0][3] = tx;
        offset[1][3] = ty;
        offset[2][3] = tz;
        let extrinsic = PoseSE3::from_matrix(&mat4_mul(&offset, &self.velo_to_cam(path)?));
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            image_width,
            image_height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Calibration file for a pinhole camera with no baseline offset whose
    /// extrinsic equals `Tr`.
    pub fn from_camera(cam: &CameraModel) -> Self {
        let p = [cam.fx, 0.0, cam.cx, 0.0, 0.0, cam.fy, cam.cy, 0.0, 0.0, 0.0, 1.0, 0.0];
        let tr = mat4_to_row12(&cam.extrinsic.to_matrix());
        Self {
            entries: vec![
                ("P0".into(), p.to_vec()),
                ("P1".into(), p.to_vec()),
                ("P2".into(), p.to_vec()),
                ("P3".into(), p.to_vec()),
                ("Tr".into(), tr.to_vec()),
            ],
        }
    }
}

/// Loads `calib.txt` and builds the left colour camera model.
pub fn load_calib(path: &Path, image_width: usize, image_height: usize) -> Result<CameraModel> {
    CalibFile::load(path)?.camera(path, image_width, image_height)
}

pub fn row12_to_mat4(v: &[f64; 12]) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i].copy_from_slice(&v[i * 4..i * 4 + 4]);
    }
    m[3][3] = 1.0;
    m
}

pub fn mat4_to_row12(m: &Mat4) -> [f64; 12] {
    let mut v = [0.0; 12];
    for i in 0..3 {
        v[i * 4..i * 4 + 4].copy_from_slice(&m[i]);
    }
    v
}

/// Nearest rotation (polar decomposition) and the Frobenius size of the
/// correction.
fn orthonormalize(m: &Mat4) -> (Mat4, f64) {
    let a = Matrix3::from_fn(|i, j| m[i][j]);
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let mut out = *m;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[(i, j)];
        }
    }
    (out, (r - a).norm())
}

/// Parses KITTI pose lines (12 floats, row-major `[R|t]`) without
/// interpreting them. Pairs with [`pose_rows_to_text`] for exact round trips.
pub fn parse_pose_rows(text: &str, path: &Path) -> Result<Vec<[f64; 12]>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| VloError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let vals = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 12 {
            return Err(parse_err(format!("expected 12 values, got {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let mut row = [0.0; 12];
        row.copy_from_slice(&vals);
        rows.push(row);
    }
    Ok(rows)
}

/// Shortest text that parses back to the same bits.
pub fn pose_rows_to_text(rows: &[[f64; 12]]) -> String {
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn load_pose_rows(path: &Path) -> Result<Vec<[f64; 12]>> {
    parse_pose_rows(&read_text(path)?, path)
}

pub fn write_pose_rows(path: &Path, rows: &[[f64; 12]]) -> Result<()> {
    write_bytes(path, pose_rows_to_text(rows).as_bytes())
}

/// Parses pose lines into rigid transforms, snapping each rotation block to
/// the nearest rotation.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<PoseSE3>> {
    let mut poses = Vec::new();
    let mut worst = 0.0f64;
    for (i, row) in parse_pose_rows(text, path)?.iter().enumerate() {
        let (m, corr) = orthonormalize(&row12_to_mat4(row));
        if corr > MAX_ORTHO_CORRECTION {
            return Err(VloError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("rotation block is not a rotation (correction {corr:.3e})"),
            });
        }
        worst = worst.max(corr);
        poses.push(PoseSE3::from_matrix(&m));
    }
    log::debug!("{}: {} poses, max orthonormalization correction {worst:.3e}", path.display(), poses.len());
    Ok(poses)
}

pub fn load_gt_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    parse_poses(&read_text(path)?, path)
}

pub fn poses_to_text(poses: &[PoseSE3]) -> String {
    let mut s = String::new();
    for p in poses {
        s.push_str(&p.to_kitti_line());
        s.push('\n');
    }
    s
}

pub fn write_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    write_bytes(path, poses_to_text(poses).as_bytes())
}

/// Relative motion from frame `i` to `j` expressed in the LiDAR frame:
/// `Tr^-1 * (cam_i^-1 * cam_j) * Tr`. It maps points of scan `j` into the
/// frame of scan `i`.
pub fn relative_lidar_pose(cam_i: &PoseSE3, cam_j: &PoseSE3, velo_to_cam: &Mat4) -> PoseSE3 {
    let tr = PoseSE3::from_matrix(velo_to_cam);
    let rel = cam_i.inverse().compose(cam_j);
    tr.inverse().compose(&rel).compose(&tr)
}

/// Everything the network needs from one frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub scan: LidarScan,
    /// Image padded to the configured size.
    pub image: FeatureGrid,
    /// Camera model with bounds of the unpadded image.
    pub camera: CameraModel,
}

/// One KITTI odometry sequence. Frames are loaded on demand.
#[derive(Clone, Debug)]
pub struct KittiSequence {
    pub id: String,
    pub scans: Vec<PathBuf>,
    pub images: Vec<PathBuf>,
    pub calib: PathBuf,
    pub poses: Option<PathBuf>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

impl KittiSequence {
    pub fn sequence_dir(root: &Path, id: &str) -> PathBuf {
        root.join("sequences").join(id)
    }

    pub fn pose_path(root: &Path, id: &str) -> PathBuf {
        root.join("poses").join(format!("{id}.txt"))
    }

    pub fn open(root: &Path, id: &str) -> Result<Self> {
        let dir = Self::sequence_dir(root, id);
        let scans = sorted_files(&dir.join("velodyne"), "bin")?;
        let images = sorted_files(&dir.join("image_2"), "png")?;
        if scans.len() != images.len() {
            return Err(load_err(
                &dir,
                format!("{} scans but {} images", scans.len(), images.len()),
            ));
        }
        if scans.is_empty() {
            return Err(load_err(&dir, "sequence has no frames"));
        }
        let calib = dir.join("calib.txt");
        if !calib.is_file() {
            return Err(load_err(&calib, "missing calib.txt"));
        }
        let pose_path = Self::pose_path(root, id);
        let seq = Self {
            id: id.to_string(),
            scans,
            images,
            calib,
            poses: pose_path.is_file().then_some(pose_path),
        };
        if let Some(gt) = seq.ground_truth()? {
            if gt.len() != seq.len() {
                return Err(load_err(
                    seq.poses.as_ref().expect("checked"),
                    format!("{} poses for {} frames", gt.len(), seq.len()),
                ));
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn ground_truth(&self) -> Result<Option<Vec<PoseSE3>>> {
        self.poses.as_deref().map(load_gt_poses).transpose()
    }

    pub fn load_frame(&self, index: usize, pad_height: usize, pad_width: usize) -> Result<Frame> {
        if index >= self.len() {
            return Err(VloError::InvalidInput(format!("frame {index} out of range ({} frames)", self.len())));
        }
        let scan = load_scan(&self.scans[index])?;
        let raw = load_image(&self.images[index])?;
        let camera = load_calib(&self.calib, raw.w, raw.h)?;
        let image = pad_image(&raw, pad_height, pad_width)?;
        Ok(Frame {
            index,
            scan,
            image,
            camera,
        })
    }

    /// LiDAR-frame relative ground truth for every consecutive pair: pose
    /// `i` maps scan `i + 1` into the frame of scan `i`.
    pub fn relative_ground_truth(&self) -> Result<Option<Vec<PoseSE3>>> {
        let Some(gt) = self.ground_truth()? else {
            return Ok(None);
        };
        let tr = CalibFile::load(&self.calib)?.velo_to_cam(&self.calib)?;
        Ok(Some(gt.windows(2).map(|w| relative_lidar_pose(&w[0], &w[1], &tr)).collect()))
    }

    /// Frames in order with one frame loaded ahead on a background thread.
    pub fn frames(&self, pad_height: usize, pad_width: usize) -> FrameIter {
        let (tx, rx) = mpsc::sync_channel(1);
        let seq = self.clone();
        let handle = thread::spawn(move || {
            for i in 0..seq.len() {
                let frame = seq.load_frame(i, pad_height, pad_width);
                let failed = frame.is_err();
                if tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        FrameIter {
            rx,
            handle: Some(handle),
        }
    }
}

pub struct FrameIter {
    rx: mpsc::Receiver<Result<Frame>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Iterator for FrameIter {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rx.recv() {
            Ok(f) => Some(f),
            Err(_) => {
                if let Some(h) = self.handle.take() {
                    let _ = h.join();
                }
                None
            }
        }
    }
}
