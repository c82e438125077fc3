"""Quick check that the extension imports and its main entry points agree
with the core crate. Build first: maturin develop -m crates/py/Cargo.toml"""

import math
import tempfile
from pathlib import Path

import vlo


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    q = vlo.quat_multiply([1, 0, 0, 0], [math.cos(0.2), math.sin(0.2), 0, 0])
    assert close(q, [math.cos(0.2), math.sin(0.2), 0, 0])

    pose = vlo.Pose.from_axis_angle([0, 0, 1], 0.3, [1.0, 2.0, 3.0])
    pts = [[1.0, 0.0, 0.0], [0.0, 2.0, -1.0]]
    back = pose.inverse().apply(pose.apply(pts))
    assert all(close(a, b) for a, b in zip(back, pts))
    delta = vlo.Pose.from_axis_angle([1, 0, 0], 0.1, [0.1, 0.0, 0.0])
    refined = vlo.compose_refinement(delta, pose)
    assert close(refined.t, [x + d for x, d in zip(vlo.rotate_vector(delta.q, pose.t), delta.t)])

    straight = [vlo.Pose(t=(0.0, 0.0, float(i))) for i in range(900)]
    drift = [vlo.Pose(t=(0.0, 0.0, 1.01 * i)) for i in range(900)]
    t_rel, r_rel = vlo.kitti_eval(straight, drift)
    assert abs(t_rel - 1.0) < 1e-6 and abs(r_rel) < 1e-9, (t_rel, r_rel)

    pair = vlo.generate_pair(seed=vlo.CANONICAL_SEED, n_points=64)
    moved = vlo.transform_points(pair.gt, pair.source)
    assert all(close(a, b) for a, b in zip(moved, pair.target))

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        vlo.write_synthetic_sequence(root, frames=3, n_points=256, rotation_deg=2.0, translation=0.5)
        weights = vlo.init_weights(root / "w.txt", profile="micro", identity=True)
        traj = vlo.run(root, weights, profile="micro")
        assert len(traj) == 3
        assert all(close(p.matrix()[i], [float(i == j) for j in range(4)]) for p in traj for i in range(4))

    reports = vlo.run_gradcheck(end_to_end=False)
    for op, err, tol, ok in reports:
        print(f"{op:<12} max_rel={err:.3e} tol={tol:.0e} {'PASS' if ok else 'FAIL'}")
    assert all(r[3] for r in reports)
    print("smoke test passed")


if __name__ == "__main__":
    main()
