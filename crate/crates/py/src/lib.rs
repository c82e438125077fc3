//! Python bindings for the odometry core.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vlo_core::dataio::{load_gt_poses, write_poses, KittiSequence};
use vlo_core::eval::{accumulate_trajectory, kitti_eval as eval_core, KITTI_LENGTHS};
use vlo_core::gradcheck;
use vlo_core::pipeline::{init_params, load_params, run_sequence, zero_pose_heads};
use vlo_core::synth::{self, PoseMagnitude, CANONICAL_SEED};
use vlo_core::train::micro_train as train_core;
use vlo_core::{PoseSE3, Quaternion, VloError};

fn to_py(e: VloError) -> PyErr {
    match e {
        VloError::Io(_) | VloError::Load { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config(profile: &str, seed: Option<u64>) -> PyResult<vlo_core::PipelineConfig> {
    let mut cfg = match profile {
        "full" => vlo_core::PipelineConfig::default(),
        "micro" => vlo_core::PipelineConfig::micro(),
        other => return Err(PyValueError::new_err(format!("unknown profile {other:?}, expected full or micro"))),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Rigid transform with a unit (w, x, y, z) quaternion and a translation.
#[pyclass(name = "Pose", module = "vlo", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct Pose(PoseSE3);

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)))]
    fn new(q: (f64, f64, f64, f64), t: (f64, f64, f64)) -> PyResult<Self> {
        let q = Quaternion::from_array([q.0, q.1, q.2, q.3])
            .try_normalize()
            .ok_or_else(|| PyValueError::new_err("quaternion is degenerate"))?;
        Ok(Pose(PoseSE3::new(q, [t.0, t.1, t.2])))
    }

    #[staticmethod]
    fn identity() -> Self {
        Pose(PoseSE3::identity())
    }

    #[staticmethod]
    fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        Pose(PoseSE3::new(Quaternion::from_axis_angle(axis, angle), t))
    }

    /// Row-major 4x4 matrix.
    #[staticmethod]
    fn from_matrix(m: [[f64; 4]; 4]) -> Self {
        Pose(PoseSE3::from_matrix(&m))
    }

    #[getter]
    fn q(&self) -> [f64; 4] {
        self.0.q.to_array()
    }

    #[getter]
    fn t(&self) -> [f64; 3] {
        self.0.t
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        self.0.to_matrix()
    }

    fn inverse(&self) -> Self {
        Pose(self.0.inverse())
    }

    /// `self * other`: apply `other` first.
    fn compose(&self, other: &Pose) -> Self {
        Pose(self.0.compose(&other.0))
    }

    fn apply(&self, points: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        vlo_core::transform_points(&self.0, &points)
    }

    fn rotation_angle(&self) -> f64 {
        self.0.rotation_angle()
    }

    fn kitti_line(&self) -> String {
        self.0.to_kitti_line()
    }

    fn __repr__(&self) -> String {
        let [w, x, y, z] = self.0.q.to_array();
        let [a, b, c] = self.0.t;
        format!("Pose(q=({w}, {x}, {y}, {z}), t=({a}, {b}, {c}))")
    }
}

/// Hamilton product of two (w, x, y, z) quaternions, normalised.
#[pyfunction]
fn quat_multiply(a: [f64; 4], b: [f64; 4]) -> PyResult<[f64; 4]> {
    vlo_core::quat_multiply(Quaternion::from_array(a), Quaternion::from_array(b))
        .map(|q| q.to_array())
        .map_err(to_py)
}

#[pyfunction]
fn rotate_vector(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    vlo_core::rotate_vector(Quaternion::from_array(q), v)
}

/// Applies a refinement `delta` on top of `prev`.
#[pyfunction]
fn compose_refinement(delta: &Pose, prev: &Pose) -> Pose {
    Pose(vlo_core::compose_refinement(&delta.0, &prev.0))
}

#[pyfunction]
fn transform_points(pose: &Pose, points: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    vlo_core::transform_points(&pose.0, &points)
}

/// Chains relative motions into absolute poses starting at the identity.
#[pyfunction]
fn accumulate(relative: Vec<PyRef<'_, Pose>>) -> Vec<Pose> {
    let rel: Vec<PoseSE3> = relative.iter().map(|p| p.0).collect();
    accumulate_trajectory(&rel).into_iter().map(Pose).collect()
}

/// Segment errors over the standard lengths: returns (t_rel %, r_rel deg/100 m).
#[pyfunction]
#[pyo3(signature = (gt, est, lengths=None))]
fn kitti_eval(gt: Vec<PyRef<'_, Pose>>, est: Vec<PyRef<'_, Pose>>, lengths: Option<Vec<f64>>) -> PyResult<(f64, f64)> {
    let g: Vec<PoseSE3> = gt.iter().map(|p| p.0).collect();
    let e: Vec<PoseSE3> = est.iter().map(|p| p.0).collect();
    let lengths = lengths.unwrap_or_else(|| KITTI_LENGTHS.to_vec());
    let r = eval_core(&g, &e, &lengths).map_err(to_py)?;
    Ok((r.t_rel, r.r_rel))
}

#[pyfunction]
fn load_poses(path: PathBuf) -> PyResult<Vec<Pose>> {
    Ok(load_gt_poses(&path).map_err(to_py)?.into_iter().map(Pose).collect())
}

#[pyfunction]
fn save_poses(path: PathBuf, poses: Vec<PyRef<'_, Pose>>) -> PyResult<()> {
    let p: Vec<PoseSE3> = poses.iter().map(|p| p.0).collect();
    write_poses(&path, &p).map_err(to_py)
}

/// Synthetic point-cloud pair with known motion.
#[pyclass(name = "SyntheticPair", module = "vlo", frozen)]
struct Pair(synth::SyntheticPair);

#[pymethods]
impl Pair {
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn source(&self) -> Vec<[f64; 3]> {
        self.0.source.points.clone()
    }

    #[getter]
    fn target(&self) -> Vec<[f64; 3]> {
        self.0.target.points.clone()
    }

    /// Maps source points into the target frame.
    #[getter]
    fn gt(&self) -> Pose {
        Pose(self.0.gt)
    }

    /// (height, width, row-major RGB values in [0, 1]).
    fn source_image(&self) -> (usize, usize, Vec<f64>) {
        let g = &self.0.source_image;
        (g.h, g.w, g.data.clone())
    }
}

#[pyfunction]
#[pyo3(signature = (seed=CANONICAL_SEED, n_points=512, rotation_deg=5.0, translation=0.3, noise=0.0))]
fn generate_pair(seed: u64, n_points: usize, rotation_deg: f64, translation: f64, noise: f64) -> PyResult<Pair> {
    let mag = PoseMagnitude::new(rotation_deg.to_radians(), translation);
    synth::generate_pair(seed, n_points, mag, noise, &synth::synthetic_camera())
        .map(Pair)
        .map_err(to_py)
}

/// (rotation error in radians, translation error in meters).
#[pyfunction]
fn pose_errors(est: &Pose, gt: &Pose) -> (f64, f64) {
    synth::pose_errors(&est.0, &gt.0)
}

/// Writes a synthetic sequence in the KITTI layout and returns the per-step motion.
#[pyfunction]
#[pyo3(signature = (root, sequence="00", frames=10, n_points=512, rotation_deg=5.0, translation=0.3, noise=0.0, seed=CANONICAL_SEED))]
#[allow(clippy::too_many_arguments)]
fn write_synthetic_sequence(
    root: PathBuf,
    sequence: &str,
    frames: usize,
    n_points: usize,
    rotation_deg: f64,
    translation: f64,
    noise: f64,
    seed: u64,
) -> PyResult<Pose> {
    let spec = synth::SequenceSpec {
        seed,
        frames,
        n_points,
        magnitude: PoseMagnitude::new(rotation_deg.to_radians(), translation),
        noise_sigma: noise,
    };
    synth::write_sequence(&root, sequence, &spec).map(Pose).map_err(to_py)
}

/// Writes freshly initialised weights; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, profile="full", seed=None, identity=false))]
fn init_weights(out: PathBuf, profile: &str, seed: Option<u64>, identity: bool) -> PyResult<PathBuf> {
    let cfg = config(profile, seed)?;
    let mut params = init_params(&cfg).map_err(to_py)?;
    if identity {
        zero_pose_heads(&mut params).map_err(to_py)?;
    }
    params.save(&out).map_err(to_py)?;
    Ok(out)
}

/// Estimates the camera-frame trajectory of one sequence.
#[pyfunction]
#[pyo3(signature = (root, weights, sequence="00", profile="full"))]
fn run(py: Python<'_>, root: PathBuf, weights: PathBuf, sequence: &str, profile: &str) -> PyResult<Vec<Pose>> {
    let cfg = config(profile, None)?;
    let params = load_params(&cfg, &weights).map_err(to_py)?;
    let seq = KittiSequence::open(&root, sequence).map_err(to_py)?;
    let out = py.detach(|| run_sequence(&params, &cfg, &seq)).map_err(to_py)?;
    Ok(out.trajectory.into_iter().map(Pose).collect())
}

/// Overfits one synthetic pair; returns (estimated pose, loss curve).
#[pyfunction]
#[pyo3(signature = (pair, steps=500, learning_rate=None, profile="micro", seed=None))]
fn micro_train(
    py: Python<'_>,
    pair: &Pair,
    steps: usize,
    learning_rate: Option<f64>,
    profile: &str,
    seed: Option<u64>,
) -> PyResult<(Pose, Vec<f64>)> {
    let cfg = config(profile, seed)?;
    let lr = learning_rate.unwrap_or(cfg.train.learning_rate);
    let out = py.detach(|| train_core(&cfg, &pair.0, steps, lr)).map_err(to_py)?;
    Ok((Pose(out.pose), out.losses))
}

/// Finite-difference check of every adjoint: list of (op, max_rel, tol, passed).
#[pyfunction]
#[pyo3(signature = (seed=CANONICAL_SEED, end_to_end=false))]
fn run_gradcheck(py: Python<'_>, seed: u64, end_to_end: bool) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let reports = py.detach(|| gradcheck::run_all(seed, end_to_end)).map_err(to_py)?;
    Ok(reports
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.op, r.max_rel_error, r.tolerance, ok)
        })
        .collect())
}

#[pymodule(name = "vlo")]
fn vlo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CANONICAL_SEED", CANONICAL_SEED)?;
    m.add_class::<Pose>()?;
    m.add_class::<Pair>()?;
    m.add_function(wrap_pyfunction!(quat_multiply, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_vector, m)?)?;
    m.add_function(wrap_pyfunction!(compose_refinement, m)?)?;
    m.add_function(wrap_pyfunction!(transform_points, m)?)?;
    m.add_function(wrap_pyfunction!(accumulate, m)?)?;
    m.add_function(wrap_pyfunction!(kitti_eval, m)?)?;
    m.add_function(wrap_pyfunction!(load_poses, m)?)?;
    m.add_function(wrap_pyfunction!(save_poses, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(pose_errors, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(init_weights, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(micro_train, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    Ok(())
}
