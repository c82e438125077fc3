//! Supervised pose loss with learnable balance terms.
//!
//! Per level:
//!
//! ```text
//! L = |t_gt - t|_1 * exp(-k_x) + k_x + |q_gt - q|_2 * exp(-k_q) + k_q
//! ```
//!
//! The quaternion residual is taken after flipping `q` onto the hemisphere
//! of `q_gt`, so `q` and `-q` score the same. The total is a weighted sum
//! over levels. `k_x` and `k_q` are parameters `loss.k_x` and `loss.k_q`.

use crate::config::{LossConfig, LEVELS};
use crate::error::{shape_err, Result};
use crate::geometry::grad::PoseGrad;
use crate::geometry::PoseSE3;
use crate::nn::ParamStore;

pub const K_X: &str = "loss.k_x";
pub const K_Q: &str = "loss.k_q";

pub fn init_loss_params(params: &mut ParamStore, cfg: &LossConfig) {
    params.insert(K_X, &[], vec![cfg.k_x]).expect("scalar shape");
    params.insert(K_Q, &[], vec![cfg.k_q]).expect("scalar shape");
}

fn aligned_residual(pred: &PoseSE3, gt: &PoseSE3) -> (f64, [f64; 4]) {
    let sign = if pred.q.dot(gt.q) < 0.0 { -1.0 } else { 1.0 };
    let (p, g) = (pred.q.to_array(), gt.q.to_array());
    let mut r = [0.0; 4];
    for i in 0..4 {
        r[i] = g[i] - sign * p[i];
    }
    (sign, r)
}

pub fn layer_loss(pred: &PoseSE3, gt: &PoseSE3, k_x: f64, k_q: f64) -> f64 {
    let l1: f64 = (0..3).map(|i| (gt.t[i] - pred.t[i]).abs()).sum();
    let (_, r) = aligned_residual(pred, gt);
    let l2 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    l1 * (-k_x).exp() + k_x + l2 * (-k_q).exp() + k_q
}

/// Gradient of [`layer_loss`] with respect to the prediction and both
/// balance terms. Non-differentiable points (zero residual components) take
/// the zero subgradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerLossGrad {
    pub pose: PoseGrad,
    pub k_x: f64,
    pub k_q: f64,
}

pub fn layer_loss_grad(pred: &PoseSE3, gt: &PoseSE3, k_x: f64, k_q: f64) -> (f64, LayerLossGrad) {
    let (ex, eq) = ((-k_x).exp(), (-k_q).exp());
    let mut g = LayerLossGrad::default();
    let mut l1 = 0.0;
    for i in 0..3 {
        let r = pred.t[i] - gt.t[i];
        l1 += r.abs();
        g.pose.t[i] = if r > 0.0 {
            ex
        } else if r < 0.0 {
            -ex
        } else {
            0.0
        };
    }
    let (sign, r) = aligned_residual(pred, gt);
    let l2 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 > 0.0 {
        for i in 0..4 {
            g.pose.q[i] = -sign * r[i] / l2 * eq;
        }
    }
    g.k_x = 1.0 - l1 * ex;
    g.k_q = 1.0 - l2 * eq;
    (l1 * ex + k_x + l2 * eq + k_q, g)
}

pub fn total_loss(per_level: &[f64], alpha: &[f64; LEVELS]) -> Result<f64> {
    if per_level.len() != LEVELS {
        return Err(shape_err("per-level losses", LEVELS, per_level.len()));
    }
    Ok(per_level.iter().zip(alpha).map(|(l, a)| l * a).sum())
}

/// Loss over the per-level estimates. `poses` is coarsest first as returned
/// by the pose head; `alpha` is finest first. Adds the adjoints of `k_x`,
/// `k_q` into `grads` and returns the pose adjoints (coarsest first).
pub fn pyramid_loss(
    params: &ParamStore,
    poses: &[PoseSE3],
    gt: &PoseSE3,
    alpha: &[f64; LEVELS],
    grads: Option<&mut ParamStore>,
) -> Result<(f64, Vec<PoseGrad>)> {
    if poses.len() != LEVELS {
        return Err(shape_err("pyramid poses", LEVELS, poses.len()));
    }
    let (k_x, k_q) = (params.scalar(K_X)?, params.scalar(K_Q)?);
    let mut per_level = [0.0; LEVELS];
    let mut dposes = Vec::with_capacity(LEVELS);
    let (mut dkx, mut dkq) = (0.0, 0.0);
    for (i, pose) in poses.iter().enumerate() {
        let level = LEVELS - 1 - i;
        let a = alpha[level];
        let (l, g) = layer_loss_grad(pose, gt, k_x, k_q);
        per_level[level] = l;
        let mut dp = g.pose;
        for v in dp.q.iter_mut().chain(dp.t.iter_mut()) {
            *v *= a;
        }
        dposes.push(dp);
        dkx += a * g.k_x;
        dkq += a * g.k_q;
    }
    if let Some(grads) = grads {
        grads.accumulate(K_X, &[dkx])?;
        grads.accumulate(K_Q, &[dkq])?;
    }
    Ok((total_loss(&per_level, alpha)?, dposes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        PoseSE3::new(q, [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
    }

    #[test]
    fn perfect_prediction_leaves_balance_terms() {
        let p = PoseSE3::new(Quaternion::new(0.9, 0.1, -0.2, 0.3), [1.0, 2.0, 3.0]);
        assert!((layer_loss(&p, &p, 0.0, -2.5) + 2.5).abs() < 1e-15);
    }

    #[test]
    fn unit_translation_residual() {
        let gt = PoseSE3::identity();
        let pred = PoseSE3::new(Quaternion::identity(), [1.0, 0.0, 0.0]);
        assert!((layer_loss(&pred, &gt, 0.0, -2.5) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn sign_flip_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let mut flipped = a;
            flipped.q = Quaternion::new(-a.q.w, -a.q.x, -a.q.y, -a.q.z);
            assert!((layer_loss(&a, &b, 0.3, -1.0) - layer_loss(&flipped, &b, 0.3, -1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_k_x_is_log_residual() {
        let gt = PoseSE3::identity();
        let pred = PoseSE3::new(Quaternion::identity(), [0.4, -0.3, 0.2]);
        let best = (0..4001)
            .map(|i| -4.0 + i as f64 * 0.001)
            .min_by(|a, b| layer_loss(&pred, &gt, *a, 0.0).total_cmp(&layer_loss(&pred, &gt, *b, 0.0)))
            .unwrap();
        assert!((best - 0.9f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn total_loss_weights() {
        let alpha = LossConfig::default().alpha;
        assert_eq!(total_loss(&[0.0; 4], &alpha).unwrap(), 0.0);
        assert!((total_loss(&[1.0; 4], &alpha).unwrap() - 3.0).abs() < 1e-15);
        assert!(total_loss(&[1.0; 3], &alpha).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (pred, gt) = (random_pose(&mut rng), random_pose(&mut rng));
            let (kx, kq) = (0.2, -1.3);
            let (_, g) = layer_loss_grad(&pred, &gt, kx, kq);
            let h = 1e-6;
            for i in 0..3 {
                let (mut a, mut b) = (pred, pred);
                a.t[i] += h;
                b.t[i] -= h;
                let fd = (layer_loss(&a, &gt, kx, kq) - layer_loss(&b, &gt, kx, kq)) / (2.0 * h);
                assert!((fd - g.pose.t[i]).abs() < 1e-6);
            }
            for i in 0..4 {
                let mut qa = pred.q.to_array();
                let mut qb = qa;
                qa[i] += h;
                qb[i] -= h;
                // Raw (unnormalized) perturbation: the loss is a plain function of q's entries.
                let a = PoseSE3 { q: Quaternion::from_array(qa), t: pred.t };
                let b = PoseSE3 { q: Quaternion::from_array(qb), t: pred.t };
                let fd = (layer_loss(&a, &gt, kx, kq) - layer_loss(&b, &gt, kx, kq)) / (2.0 * h);
                assert!((fd - g.pose.q[i]).abs() < 1e-6);
            }
            let fd = (layer_loss(&pred, &gt, kx + h, kq) - layer_loss(&pred, &gt, kx - h, kq)) / (2.0 * h);
            assert!((fd - g.k_x).abs() < 1e-6);
        }
    }
}
