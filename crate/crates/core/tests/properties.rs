//! Property tests for the structural invariants of the fusion and pose layers.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlo_core::dataio::{load_scan, parse_pose_rows, pose_rows_to_text, write_scan};
use vlo_core::eval::{kitti_eval, KITTI_LENGTHS};
use vlo_core::global_fuser::{global_fuse_rows, init_global_fuser};
use vlo_core::local_fuser::{aggregate_clusters, assign_clusters, image_to_pseudo_points, init_local_fuser, RegionPartition};
use vlo_core::nn::ParamStore;
use vlo_core::pose_head::{embedding_mask, init_pose_head, regress_pose};
use vlo_core::projection::LidarScan;
use vlo_core::{FeatureGrid, PointFeatureSet, PoseSE3, Quaternion};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> PoseSE3 {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    PoseSE3::new(
        Quaternion::from_axis_angle(axis, rng.random_range(-max_angle..max_angle)),
        [rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t), rng.random_range(-max_t..max_t)],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_columns_sum_to_one_and_quaternion_is_unit(seed in any::<u64>(), n in 1usize..40, d in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new(seed);
        init_pose_head(&mut p, 0, d).unwrap();
        for name in ["pose_head.level0.fc_q.weight", "pose_head.level0.fc_q.bias"] {
            for v in p.data_mut(name).unwrap() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let e = uniform(&mut rng, n * d, -3.0, 3.0);
        let f = uniform(&mut rng, n * d, -3.0, 3.0);
        let (m, _) = embedding_mask(&p, 0, &e, &f, d).unwrap();
        prop_assert!(m.iter().all(|v| *v >= 0.0));
        for ch in 0..d {
            let s: f64 = (0..n).map(|i| m[i * d + ch]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "column {ch} sums to {s}");
        }
        let (pose, _) = regress_pose(&p, 0, &e, &m, d).unwrap();
        prop_assert!((pose.q.norm() - 1.0).abs() < 1e-12);
        prop_assert!(pose.q.w >= 0.0);
    }

    #[test]
    fn global_fusion_stays_between_its_inputs(seed in any::<u64>(), n in 1usize..40, d in 1usize..7, cl in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ParamStore::new(seed);
        init_global_fuser(&mut g, 0, cl, d);
        let fp = uniform(&mut rng, n * d, -3.0, 3.0);
        let fl = uniform(&mut rng, n * cl, -3.0, 3.0);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let (fg, cache) = global_fuse_rows(&g, 0, &fp, &fl, &mask).unwrap();
        let aligned = cache.aligned_local();
        let rows = cache.fused_rows();
        for r in 0..n {
            if !rows.contains(&r) {
                // Rows without a projection pass through untouched.
                prop_assert_eq!(&fg[r * d..(r + 1) * d], &fp[r * d..(r + 1) * d]);
            }
        }
        for (k, &r) in rows.iter().enumerate() {
            for ch in 0..d {
                let (a, b, v) = (fp[r * d + ch], aligned[k * d + ch], fg[r * d + ch]);
                prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn clusters_partition_the_map_and_fused_features_are_finite(
        seed in any::<u64>(), hq in 1usize..5, wq in 1usize..5, rh in 0usize..3, rw in 0usize..3, c in 2usize..6, n in 1usize..48,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4 * hq, 4 * wq);
        let grid = FeatureGrid::from_vec(h, w, c, uniform(&mut rng, h * w * c, -1.0, 1.0)).unwrap();
        let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
        let centers = PointFeatureSet {
            channels: c,
            features: uniform(&mut rng, n * c, -1.0, 1.0),
            coords: (0..n).map(|_| [rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), 0.0]).collect(),
            mask: Some(valid.clone()),
        };
        let partition = RegionPartition::new(h, w, 1 << rh, 1 << rw).unwrap();
        let pseudo = image_to_pseudo_points(&grid);
        let a = assign_clusters(&centers, &pseudo, &partition, false).unwrap();
        prop_assert!(a.is_consistent());
        let members: usize = a.members.iter().map(|m| m.len()).sum();
        prop_assert_eq!(members + a.unassigned(), h * w);
        for (i, m) in a.members.iter().enumerate() {
            prop_assert!(valid[i] || m.is_empty());
        }

        let mut lp = ParamStore::new(seed);
        init_local_fuser(&mut lp, 0, c);
        let fused = aggregate_clusters(&lp, 0, &a, &centers, &pseudo).unwrap();
        prop_assert!(fused.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trajectory_error_ignores_a_common_rigid_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut gt, mut est) = (vec![PoseSE3::identity()], vec![PoseSE3::identity()]);
        for _ in 0..220 {
            let step = PoseSE3::new(Quaternion::from_axis_angle([0.0, 1.0, 0.0], rng.random_range(-0.02..0.02)), [0.0, 0.0, 1.0]);
            let noise = random_pose(&mut rng, 0.002, 0.02);
            gt.push(gt.last().unwrap().compose(&step));
            est.push(est.last().unwrap().compose(&step.compose(&noise)));
        }
        let lengths = &KITTI_LENGTHS[..2];
        let base = kitti_eval(&gt, &est, lengths).unwrap();
        let g = random_pose(&mut rng, 3.0, 100.0);
        let moved = |t: &[PoseSE3]| -> Vec<PoseSE3> { t.iter().map(|p| g.compose(p)).collect() };
        let other = kitti_eval(&moved(&gt), &moved(&est), lengths).unwrap();
        prop_assert_eq!(base.segments, other.segments);
        prop_assert!((base.t_rel - other.t_rel).abs() < 1e-8 * base.t_rel.max(1.0));
        prop_assert!((base.r_rel - other.r_rel).abs() < 1e-8 * base.r_rel.max(1.0));
    }

    #[test]
    fn scans_round_trip(points in proptest::collection::vec(proptest::array::uniform3(-80.0f32..80.0), 1..64)) {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let scan = LidarScan::new(pts.clone()).unwrap();
        write_scan(&path, &scan).unwrap();
        prop_assert_eq!(load_scan(&path).unwrap().points, pts);
    }

    #[test]
    fn pose_rows_round_trip_bit_exactly(rows in proptest::collection::vec(proptest::array::uniform12(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO), 1..8)) {
        let text = pose_rows_to_text(&rows);
        let back = parse_pose_rows(&text, std::path::Path::new("mem")).unwrap();
        prop_assert!(back.iter().flatten().map(|v| v.to_bits()).eq(rows.iter().flatten().map(|v| v.to_bits())));
        prop_assert_eq!(pose_rows_to_text(&back), text);
    }
}
