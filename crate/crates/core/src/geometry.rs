//! Quaternion and rigid-pose algebra used by the pose regression and
//! refinement stages.
//!
//! Conventions: Hamilton product, `(w, x, y, z)` component order, active
//! rotations. A normalized quaternion always has `w >= 0`.

use std::fmt;

use crate::error::{Result, VloError};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

/// Norm below which a regressed quaternion is treated as degenerate.
pub const DEGENERATE_QUAT_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        self.to_array().iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Unit-norm, sign-canonical (`w >= 0`) copy. Returns `None` for a
    /// degenerate or non-finite input.
    pub fn try_normalize(self) -> Option<Self> {
        let n = self.norm();
        if !n.is_finite() || n < DEGENERATE_QUAT_NORM {
            return None;
        }
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Some(Self::new(self.w * s, self.x * s, self.y * s, self.z * s))
    }

    /// Like [`try_normalize`](Self::try_normalize) but falls back to the
    /// identity rotation with a warning.
    pub fn normalize(self) -> Self {
        self.try_normalize().unwrap_or_else(|| {
            log::warn!("degenerate quaternion {self:?} replaced by identity");
            Self::identity()
        })
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        if n < 1e-15 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n).normalize()
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(self) -> Self {
        self.conjugate()
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    pub fn to_rotation_matrix(self) -> Mat3 {
        let Self { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Mat3) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalize()
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

/// Rigid transform: rotation `q` followed by translation `t` (meters).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseSE3 {
    pub q: Quaternion,
    pub t: Vec3,
}

impl PoseSE3 {
    pub fn new(q: Quaternion, t: Vec3) -> Self {
        Self { q: q.normalize(), t }
    }

    pub fn identity() -> Self {
        Self {
            q: Quaternion::identity(),
            t: [0.0; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.t.iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.q.to_rotation_matrix()
    }

    pub fn to_matrix(&self) -> Mat4 {
        let r = self.rotation_matrix();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = self.t[i];
        }
        m[3][3] = 1.0;
        m
    }

    /// Pose from the upper 3x4 block of a homogeneous matrix. The rotation
    /// block is assumed orthonormal.
    pub fn from_matrix(m: &Mat4) -> Self {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Self {
            q: Quaternion::from_rotation_matrix(&r),
            t: [m[0][3], m[1][3], m[2][3]],
        }
    }

    pub fn inverse(&self) -> Self {
        let qi = self.q.inverse();
        let rt = rotate_vector(qi, self.t);
        Self {
            q: qi.normalize(),
            t: [-rt[0], -rt[1], -rt[2]],
        }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        compose_refinement(self, other)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let r = self.rotation_matrix();
        let rp = mat3_vec(&r, p);
        [rp[0] + self.t[0], rp[1] + self.t[1], rp[2] + self.t[2]]
    }

    /// Row-major 3x4 `[R|t]`, the KITTI pose line layout.
    pub fn to_kitti_row(&self) -> [f64; 12] {
        let m = self.to_matrix();
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 4..i * 4 + 4].copy_from_slice(&m[i]);
        }
        out
    }

    pub fn to_kitti_line(&self) -> String {
        self.to_kitti_row()
            .iter()
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rotation angle of the pose in radians.
    pub fn rotation_angle(&self) -> f64 {
        self.q.angle()
    }
}

fn check_finite_quat(q: Quaternion, what: &str) -> Result<()> {
    if q.is_finite() {
        Ok(())
    } else {
        Err(VloError::InvalidInput(format!("non-finite quaternion {what}: {q:?}")))
    }
}

/// Hamilton product without normalization.
pub fn hamilton(a: Quaternion, b: Quaternion) -> Quaternion {
    Quaternion::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Normalized Hamilton product `a ⊗ b`: rotation `b` followed by `a`.
pub fn quat_multiply(a: Quaternion, b: Quaternion) -> Result<Quaternion> {
    check_finite_quat(a, "lhs")?;
    check_finite_quat(b, "rhs")?;
    Ok(hamilton(a, b).normalize())
}

pub fn rotate_vector(q: Quaternion, v: Vec3) -> Vec3 {
    mat3_vec(&q.to_rotation_matrix(), v)
}

/// Applies a residual pose on top of a previous estimate:
/// `q = dq ⊗ q_prev`, `t = dq · t_prev · dq⁻¹ + dt`.
pub fn compose_refinement(delta: &PoseSE3, prev: &PoseSE3) -> PoseSE3 {
    let dq = delta.q.normalize();
    let rt = rotate_vector(dq, prev.t);
    PoseSE3 {
        q: hamilton(dq, prev.q).normalize(),
        t: [rt[0] + delta.t[0], rt[1] + delta.t[1], rt[2] + delta.t[2]],
    }
}

pub fn transform_points(pose: &PoseSE3, pts: &[Vec3]) -> Vec<Vec3> {
    let r = pose.rotation_matrix();
    pts.iter()
        .map(|&p| {
            let rp = mat3_vec(&r, p);
            [rp[0] + pose.t[0], rp[1] + pose.t[1], rp[2] + pose.t[2]]
        })
        .collect()
}

pub fn mat3_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Reverse-mode adjoints of the quaternion operations above.
pub mod grad {
    use super::*;

    /// Adjoint of [`Quaternion::normalize`] evaluated at the raw input `u`.
    /// Degenerate inputs (identity fallback) have zero adjoint.
    pub fn normalize_backward(u: Quaternion, dq: [f64; 4]) -> [f64; 4] {
        let Some(q) = u.try_normalize() else {
            return [0.0; 4];
        };
        let n = u.norm();
        let sign = if u.w < 0.0 { -1.0 } else { 1.0 };
        let qa = q.to_array();
        let dot: f64 = qa.iter().zip(dq.iter()).map(|(a, b)| a * b).sum();
        let mut du = [0.0; 4];
        for i in 0..4 {
            du[i] = sign * (dq[i] - qa[i] * dot) / n;
        }
        du
    }

    /// Adjoint of the raw Hamilton product `p = a ⊗ b`.
    pub fn hamilton_backward(a: Quaternion, b: Quaternion, dp: [f64; 4]) -> ([f64; 4], [f64; 4]) {
        // p = L(a) b = R(b) a, with L, R the left/right multiplication matrices.
        let la = [
            [a.w, -a.x, -a.y, -a.z],
            [a.x, a.w, -a.z, a.y],
            [a.y, a.z, a.w, -a.x],
            [a.z, -a.y, a.x, a.w],
        ];
        let rb = [
            [b.w, -b.x, -b.y, -b.z],
            [b.x, b.w, b.z, -b.y],
            [b.y, -b.z, b.w, b.x],
            [b.z, b.y, -b.x, b.w],
        ];
        let mut da = [0.0; 4];
        let mut db = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                da[j] += rb[i][j] * dp[i];
                db[j] += la[i][j] * dp[i];
            }
        }
        (da, db)
    }

    /// Adjoint of `R(q) v` with `R` the polynomial quaternion-to-matrix map.
    pub fn rotate_backward(q: Quaternion, v: Vec3, dout: Vec3) -> ([f64; 4], Vec3) {
        let Quaternion { w, x, y, z } = q;
        let dr: [Mat3; 4] = [
            [
                [0.0, -2.0 * z, 2.0 * y],
                [2.0 * z, 0.0, -2.0 * x],
                [-2.0 * y, 2.0 * x, 0.0],
            ],
            [
                [0.0, 2.0 * y, 2.0 * z],
                [2.0 * y, -4.0 * x, -2.0 * w],
                [2.0 * z, 2.0 * w, -4.0 * x],
            ],
            [
                [-4.0 * y, 2.0 * x, 2.0 * w],
                [2.0 * x, 0.0, 2.0 * z],
                [-2.0 * w, 2.0 * z, -4.0 * y],
            ],
            [
                [-4.0 * z, -2.0 * w, 2.0 * x],
                [2.0 * w, -4.0 * z, 2.0 * y],
                [2.0 * x, 2.0 * y, 0.0],
            ],
        ];
        let mut dq = [0.0; 4];
        for (k, m) in dr.iter().enumerate() {
            let mv = mat3_vec(m, v);
            dq[k] = mv[0] * dout[0] + mv[1] * dout[1] + mv[2] * dout[2];
        }
        let r = q.to_rotation_matrix();
        let mut dv = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                dv[j] += r[i][j] * dout[i];
            }
        }
        (dq, dv)
    }

    /// Adjoint of the quaternion and translation of a pose.
    #[derive(Clone, Copy, Debug, Default, PartialEq)]
    pub struct PoseGrad {
        pub q: [f64; 4],
        pub t: Vec3,
    }

    impl PoseGrad {
        pub fn add(&mut self, other: &PoseGrad) {
            for i in 0..4 {
                self.q[i] += other.q[i];
            }
            for i in 0..3 {
                self.t[i] += other.t[i];
            }
        }
    }

    /// Adjoint of [`compose_refinement`] for unit-norm inputs. Returns
    /// (d delta, d prev).
    pub fn compose_refinement_backward(
        delta: &PoseSE3,
        prev: &PoseSE3,
        dout: &PoseGrad,
    ) -> (PoseGrad, PoseGrad) {
        let raw = hamilton(delta.q, prev.q);
        let draw = normalize_backward(raw, dout.q);
        let (dq_delta, dq_prev) = hamilton_backward(delta.q, prev.q, draw);
        let (dq_rot, dt_prev) = rotate_backward(delta.q, prev.t, dout.t);
        let mut d_delta = PoseGrad {
            q: dq_delta,
            t: dout.t,
        };
        for i in 0..4 {
            d_delta.q[i] += dq_rot[i];
        }
        let d_prev = PoseGrad {
            q: dq_prev,
            t: dt_prev,
        };
        (d_delta, d_prev)
    }

    /// Adjoint of [`transform_points`] with respect to the pose and points.
    pub fn transform_points_backward(
        pose: &PoseSE3,
        pts: &[Vec3],
        dout: &[Vec3],
    ) -> (PoseGrad, Vec<Vec3>) {
        let mut dpose = PoseGrad::default();
        let mut dpts = Vec::with_capacity(pts.len());
        for (p, d) in pts.iter().zip(dout) {
            let (dq, dp) = rotate_backward(pose.q, *p, *d);
            for i in 0..4 {
                dpose.q[i] += dq[i];
            }
            for i in 0..3 {
                dpose.t[i] += d[i];
            }
            dpts.push(dp);
        }
        (dpose, dpts)
    }
}
