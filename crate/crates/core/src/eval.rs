//! KITTI odometry metrics, trajectory accumulation and plots.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;

use crate::error::{Result, VloError};
use crate::geometry::{mat4_mul, Mat4, PoseSE3};

/// Subsequence lengths of the KITTI protocol (meters).
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Start frames are taken every `KITTI_STEP` frames.
pub const KITTI_STEP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthStats {
    pub length: f64,
    pub segments: usize,
    /// Mean translational error, percent.
    pub t_rel: f64,
    /// Mean rotational error, degrees per 100 m.
    pub r_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEval {
    pub t_rel: f64,
    pub r_rel: f64,
    pub segments: usize,
    pub per_length: Vec<LengthStats>,
}

impl TrajectoryEval {
    /// Machine-readable summary line.
    pub fn summary_line(&self) -> String {
        format!("t_rel={:.6} r_rel={:.6}", self.t_rel, self.r_rel)
    }

    /// Plain-text table per length followed by the summary line.
    pub fn report(&self) -> String {
        let mut s = String::from("length_m  segments  t_rel_%   r_rel_deg/100m\n");
        for l in &self.per_length {
            let _ = writeln!(s, "{:>8.0}  {:>8}  {:>8.4}  {:>8.4}", l.length, l.segments, l.t_rel, l.r_rel);
        }
        let _ = writeln!(s, "{:>8}  {:>8}  {:>8.4}  {:>8.4}", "mean", self.segments, self.t_rel, self.r_rel);
        s.push_str(&self.summary_line());
        s.push('\n');
        s
    }
}

fn inverse4(m: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

fn rotation_error(m: &Mat4) -> f64 {
    let d = 0.5 * (m[0][0] + m[1][1] + m[2][2] - 1.0);
    d.clamp(-1.0, 1.0).acos()
}

fn translation_error(m: &Mat4) -> f64 {
    (m[0][3] * m[0][3] + m[1][3] * m[1][3] + m[2][3] * m[2][3]).sqrt()
}

/// Cumulative path length along the trajectory.
pub fn path_distances(traj: &[Mat4]) -> Vec<f64> {
    let mut dist = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    for (i, m) in traj.iter().enumerate() {
        if i > 0 {
            let p = &traj[i - 1];
            let d = [m[0][3] - p[0][3], m[1][3] - p[1][3], m[2][3] - p[2][3]];
            acc += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        dist.push(acc);
    }
    dist
}

/// Relative slack on segment-end comparisons, so a frame sitting exactly on
/// the boundary is found regardless of summation roundoff.
const BOUNDARY_SLACK: f64 = 1e-9;

/// First frame at or beyond `len` meters past `first`.
fn last_frame(dist: &[f64], first: usize, len: f64) -> Option<usize> {
    let target = dist[first] + len;
    let slack = BOUNDARY_SLACK * target.abs().max(1.0);
    (first..dist.len()).find(|&i| dist[i] >= target - slack)
}

/// KITTI relative-pose errors averaged over every start frame (stepped by
/// [`KITTI_STEP`]) and every reachable length.
pub fn kitti_eval(gt: &[PoseSE3], est: &[PoseSE3], lengths: &[f64]) -> Result<TrajectoryEval> {
    if gt.len() != est.len() {
        return Err(VloError::InvalidInput(format!(
            "trajectory lengths differ: {} ground-truth vs {} estimated poses",
            gt.len(),
            est.len()
        )));
    }
    let gm: Vec<Mat4> = gt.iter().map(PoseSE3::to_matrix).collect();
    let em: Vec<Mat4> = est.iter().map(PoseSE3::to_matrix).collect();
    let dist = path_distances(&gm);

    // (length index, t_err, r_err) per segment, collected in start order.
    let per_start: Vec<Vec<(usize, f64, f64)>> = (0..gm.len())
        .step_by(KITTI_STEP)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|first| {
            lengths
                .iter()
                .enumerate()
                .filter_map(|(li, &len)| {
                    let last = last_frame(&dist, first, len)?;
                    let dg = mat4_mul(&inverse4(&gm[first]), &gm[last]);
                    let de = mat4_mul(&inverse4(&em[first]), &em[last]);
                    let err = mat4_mul(&inverse4(&dg), &de);
                    Some((li, translation_error(&err) / len, rotation_error(&err) / len))
                })
                .collect()
        })
        .collect();

    let mut sums = vec![(0usize, 0.0, 0.0); lengths.len()];
    let (mut n, mut t_sum, mut r_sum) = (0usize, 0.0, 0.0);
    for (li, t, r) in per_start.into_iter().flatten() {
        sums[li].0 += 1;
        sums[li].1 += t;
        sums[li].2 += r;
        n += 1;
        t_sum += t;
        r_sum += r;
    }
    let total_length = dist.last().copied().unwrap_or(0.0);
    if n == 0 {
        return Err(VloError::TrajectoryTooShort {
            total_length,
            usable: lengths.iter().copied().filter(|l| *l <= total_length).collect(),
        });
    }
    let t_scale = 100.0;
    let r_scale = 100.0 * 180.0 / std::f64::consts::PI;
    let per_length = lengths
        .iter()
        .zip(&sums)
        .filter(|(_, s)| s.0 > 0)
        .map(|(&length, s)| LengthStats {
            length,
            segments: s.0,
            t_rel: s.1 / s.0 as f64 * t_scale,
            r_rel: s.2 / s.0 as f64 * r_scale,
        })
        .collect();
    Ok(TrajectoryEval {
        t_rel: t_sum / n as f64 * t_scale,
        r_rel: r_sum / n as f64 * r_scale,
        segments: n,
        per_length,
    })
}

/// Chains frame-to-frame poses into absolute poses starting at identity.
pub fn accumulate_trajectory(relative: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    let mut cur = PoseSE3::identity();
    out.push(cur);
    for r in relative {
        cur = cur.compose(r);
        out.push(cur);
    }
    out
}

const PANEL: u32 = 480;
const MARGIN: f64 = 20.0;
const GT_COLOR: Rgb<u8> = Rgb([30, 30, 30]);
const EST_COLOR: Rgb<u8> = Rgb([220, 40, 40]);

fn draw_line(img: &mut RgbImage, x_off: u32, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = (a.0 + f * (b.0 - a.0)).round();
        let y = (a.1 + f * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < PANEL && (y as u32) < PANEL {
            img.put_pixel(x_off + x as u32, y as u32, color);
        }
    }
}

fn draw_panel(img: &mut RgbImage, x_off: u32, tracks: &[(Vec<(f64, f64)>, Rgb<u8>)]) {
    let all = tracks.iter().flat_map(|(t, _)| t.iter());
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in all {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    if !lo.0.is_finite() {
        return;
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9);
    let scale = (PANEL as f64 - 2.0 * MARGIN) / span;
    let map = |(x, y): (f64, f64)| (MARGIN + (x - lo.0) * scale, PANEL as f64 - MARGIN - (y - lo.1) * scale);
    for (track, color) in tracks {
        for w in track.windows(2) {
            draw_line(img, x_off, map(w[0]), map(w[1]), *color);
        }
    }
}

/// Renders ground truth (dark) and estimate (red) side by side: a top-down
/// x-y view and an oblique 3D view. Written as PNG.
pub fn plot_trajectories(gt: &[PoseSE3], est: &[PoseSE3], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(2 * PANEL, PANEL, Rgb([255, 255, 255]));
    let top = |t: &[PoseSE3]| t.iter().map(|p| (p.t[0], p.t[1])).collect::<Vec<_>>();
    // Oblique view: azimuth 30 deg, elevation 25 deg.
    let (ca, sa, se, ce) = (30f64.to_radians().cos(), 30f64.to_radians().sin(), 25f64.to_radians().sin(), 25f64.to_radians().cos());
    let oblique = |t: &[PoseSE3]| {
        t.iter()
            .map(|p| {
                let u = ca * p.t[0] - sa * p.t[1];
                let v = se * (sa * p.t[0] + ca * p.t[1]) + ce * p.t[2];
                (u, v)
            })
            .collect::<Vec<_>>()
    };
    draw_panel(&mut img, 0, &[(top(gt), GT_COLOR), (top(est), EST_COLOR)]);
    draw_panel(&mut img, PANEL, &[(oblique(gt), GT_COLOR), (oblique(est), EST_COLOR)]);
    img.save(path).map_err(|e| VloError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
