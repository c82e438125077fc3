//! Finite-difference verification of the hand-written adjoints.
//!
//! Every case reduces an op's output to a scalar through a fixed random
//! projection, then compares the analytic adjoint against central
//! differences on a deterministic sample of parameter and input entries.
//! Probes where the central difference at `h` and `h / 2` disagree sit on a
//! kink (leaky-ReLU, neighbour or cluster switch) and are skipped and
//! counted instead of compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Result, VloError};
use crate::geometry::grad::PoseGrad;
use crate::global_fuser::{global_fuse_rows, global_fuse_rows_backward, init_global_fuser};
use crate::local_fuser::{init_local_fuser, local_fuse, local_fuse_backward, LocalFuseOptions};
use crate::nn::conv::init_conv;
use crate::nn::layers::init_dense;
use crate::nn::{bilinear_backward, bilinear_sample, conv2d_backward, conv2d_grid, conv2d_masked, dense, dense_backward, ConvMasks, ParamStore};
use crate::pipeline::{init_params, pair_loss};
use crate::pose_head::{
    cost_volume, cost_volume_backward, embedding_mask, embedding_mask_backward, init_pose_head, regress_pose,
    regress_pose_backward,
};
use crate::synth::{generate_pair, synthetic_camera, PoseMagnitude};
use crate::tensor::{FeatureGrid, PointFeatureSet};

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Magnitude below which both derivatives count as zero.
pub const ABS_FLOOR: f64 = 1e-6;
/// Fraction of the tolerance by which the two step sizes may disagree
/// before a probe counts as non-smooth.
const KINK_FRACTION: f64 = 0.25;
/// At most this fraction of probes may be skipped as kinks.
const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Named differentiable inputs of a case.
#[derive(Clone, Debug, Default)]
pub struct Vars(pub Vec<(String, Vec<f64>)>);

impl Vars {
    pub fn get(&self, name: &str) -> &[f64] {
        &self.0.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no input {name}")).1
    }

    fn zeros_like(&self) -> Vars {
        Vars(self.0.iter().map(|(n, v)| (n.clone(), vec![0.0; v.len()])).collect())
    }
}

type LossFn = Box<dyn Fn(&ParamStore, &Vars) -> Result<f64> + Send + Sync>;
type GradFn = Box<dyn Fn(&ParamStore, &Vars) -> Result<(ParamStore, Vars)> + Send + Sync>;

pub struct GradCase {
    pub op: String,
    pub params: ParamStore,
    pub inputs: Vars,
    pub tolerance: f64,
    pub samples_per_tensor: usize,
    loss: LossFn,
    grad: GradFn,
}

impl GradCase {
    pub fn evaluate(&self, params: &ParamStore, inputs: &Vars) -> Result<f64> {
        (self.loss)(params, inputs)
    }

    pub fn gradient(&self, params: &ParamStore, inputs: &Vars) -> Result<(ParamStore, Vars)> {
        (self.grad)(params, inputs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Scales every analytic adjoint by `1 + corrupt`; used to confirm the
    /// checker notices wrong adjoints.
    pub corrupt: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub probes: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Entry with the largest error and its `(analytic, numeric)` values.
    pub worst: Option<(String, f64, f64)>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        let compared = self.probes - self.skipped;
        compared > 0
            && self.max_rel_error < self.tolerance
            && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * self.probes as f64
    }

    pub fn line(&self) -> String {
        format!(
            "{:<12} probes={:<4} skipped={:<3} max_rel={:.3e} tol={:.0e} {}",
            self.op,
            self.probes,
            self.skipped,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug)]
enum Target<'a> {
    Param(&'a str, usize),
    Input(usize, usize),
}

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

pub fn check_case(case: &GradCase, opts: CheckOptions, seed: u64) -> Result<OpReport> {
    let (gp, gx) = (case.grad)(&case.params, &case.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = Vec::new();
    for (name, t) in case.params.iter() {
        for i in sample_indices(&mut rng, t.data.len(), case.samples_per_tensor) {
            targets.push(Target::Param(name, i));
        }
    }
    for (k, (_, v)) in case.inputs.0.iter().enumerate() {
        for i in sample_indices(&mut rng, v.len(), case.samples_per_tensor) {
            targets.push(Target::Input(k, i));
        }
    }
    let h = opts.step;
    let eval = |t: Target, delta: f64| -> Result<f64> {
        match t {
            Target::Param(name, i) => {
                let mut p = case.params.clone();
                p.data_mut(name)?[i] += delta;
                (case.loss)(&p, &case.inputs)
            }
            Target::Input(k, i) => {
                let mut x = case.inputs.clone();
                x.0[k].1[i] += delta;
                (case.loss)(&case.params, &x)
            }
        }
    };
    let outcomes: Vec<Result<Option<(f64, f64, f64)>>> = targets
        .par_iter()
        .map(|&t| {
            let numeric = (eval(t, h)? - eval(t, -h)?) / (2.0 * h);
            let half = (eval(t, h / 2.0)? - eval(t, -h / 2.0)?) / h;
            if (numeric - half).abs() > KINK_FRACTION * case.tolerance * numeric.abs().max(half.abs()).max(ABS_FLOOR) {
                return Ok(None);
            }
            let mut analytic = match t {
                Target::Param(name, i) => gp.data(name)?[i],
                Target::Input(k, i) => gx.0[k].1[i],
            };
            if let Some(c) = opts.corrupt {
                analytic *= 1.0 + c;
            }
            Ok(Some((rel_error(analytic, numeric), analytic, numeric)))
        })
        .collect();
    let mut report = OpReport {
        op: case.op.clone(),
        probes: targets.len(),
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: case.tolerance,
        worst: None,
    };
    for (t, o) in targets.iter().zip(outcomes) {
        match o? {
            None => report.skipped += 1,
            Some((e, a, n)) if e > report.max_rel_error || report.worst.is_none() => {
                report.max_rel_error = e;
                let label = match *t {
                    Target::Param(name, i) => format!("{name}[{i}]"),
                    Target::Input(k, i) => format!("{}[{i}]", case.inputs.0[k].0),
                };
                report.worst = Some((label, a, n));
            }
            Some(_) => {}
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn grid(h: usize, w: usize, c: usize, data: &[f64]) -> FeatureGrid {
    FeatureGrid::from_vec(h, w, c, data.to_vec()).expect("case shapes are consistent")
}

fn case(op: &str, params: ParamStore, inputs: Vars, loss: LossFn, grad: GradFn) -> GradCase {
    GradCase {
        op: op.into(),
        params,
        inputs,
        tolerance: OP_TOLERANCE,
        samples_per_tensor: 12,
        loss,
        grad,
    }
}

pub fn dense_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, inp, out) = (3, 5, 4);
    let mut p = ParamStore::new(seed);
    init_dense(&mut p, "g.dense", inp, out, 1.0);
    let r = uniform(&mut rng, rows * out, -1.0, 1.0);
    let r2 = r.clone();
    let x = Vars(vec![("x".into(), uniform(&mut rng, rows * inp, -1.0, 1.0))]);
    case(
        "dense",
        p,
        x,
        Box::new(move |p, x| Ok(dot(&r, &dense(p, "g.dense", x.get("x"), rows)?))),
        Box::new(move |p, x| {
            let mut g = p.zeros_like();
            let dx = dense_backward(p, "g.dense", x.get("x"), rows, &r2, &mut g)?;
            Ok((g, Vars(vec![("x".into(), dx)])))
        }),
    )
}

pub fn conv_case(seed: u64, masked: bool) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, cin, cout, stride): (usize, usize, usize, usize, usize) = (6, 7, 3, 4, 2);
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut p = ParamStore::new(seed);
    init_conv(&mut p, "g.conv", cin, cout, 3);
    let r = uniform(&mut rng, ho * wo * cout, -1.0, 1.0);
    let (im, om): (Vec<bool>, Vec<bool>) = if masked {
        (
            (0..h * w).map(|_| rng.random_bool(0.6)).collect(),
            (0..ho * wo).map(|_| rng.random_bool(0.7)).collect(),
        )
    } else {
        (vec![true; h * w], vec![true; ho * wo])
    };
    let x = Vars(vec![("x".into(), uniform(&mut rng, h * w * cin, -1.0, 1.0))]);
    let (r2, im2, om2) = (r.clone(), im.clone(), om.clone());
    case(
        if masked { "conv_masked" } else { "conv" },
        p,
        x,
        Box::new(move |p, x| {
            let g = grid(h, w, cin, x.get("x"));
            let y = if masked {
                conv2d_masked(p, "g.conv", &g, stride, ConvMasks { input: &im, output: &om })?
            } else {
                conv2d_grid(p, "g.conv", &g, stride)?
            };
            Ok(dot(&r, &y.data))
        }),
        Box::new(move |p, x| {
            let g = grid(h, w, cin, x.get("x"));
            let masks = masked.then_some(ConvMasks { input: &im2, output: &om2 });
            let dy = grid(ho, wo, cout, &r2);
            let mut gp = p.zeros_like();
            let dx = conv2d_backward(p, "g.conv", &g, stride, masks, &dy, &mut gp)?;
            Ok((gp, Vars(vec![("x".into(), dx.data)])))
        }),
    )
}

pub fn bilinear_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c, n) = (5, 6, 3, 8);
    let coords: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(0.05..(w - 1) as f64 - 0.05), rng.random_range(0.05..(h - 1) as f64 - 0.05)])
        .collect();
    let r = uniform(&mut rng, n * c, -1.0, 1.0);
    let r2 = r.clone();
    let x = Vars(vec![
        ("grid".into(), uniform(&mut rng, h * w * c, -1.0, 1.0)),
        ("coords".into(), coords),
    ]);
    let pairs = |v: &[f64]| v.chunks(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>();
    case(
        "bilinear",
        ParamStore::new(seed),
        x,
        Box::new(move |_, x| Ok(dot(&r, &bilinear_sample(&grid(h, w, c, x.get("grid")), &pairs(x.get("coords")))))),
        Box::new(move |p, x| {
            let (dg, dc) = bilinear_backward(&grid(h, w, c, x.get("grid")), &pairs(x.get("coords")), &r2);
            Ok((
                p.zeros_like(),
                Vars(vec![("grid".into(), dg.data), ("coords".into(), dc.into_iter().flatten().collect())]),
            ))
        }),
    )
}

pub fn local_fuse_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c, n) = (6, 12, 4, 20);
    let mut p = ParamStore::new(seed);
    init_local_fuser(&mut p, 0, c);
    // Move the gate off its initial point so alpha and beta matter.
    p.set_scalar(&format!("{}.alpha", crate::local_fuser::prefix(0)), 1.7)
        .expect("alpha exists");
    let opts = LocalFuseOptions {
        region_h: 3,
        region_w: 4,
        with_positions: false,
        on_values: false,
    };
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.1..(w - 1) as f64 - 0.1), rng.random_range(0.1..(h - 1) as f64 - 0.1)])
        .collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 7 != 3).collect();
    let r = uniform(&mut rng, n * c, -1.0, 1.0);
    let x = Vars(vec![("grid".into(), uniform(&mut rng, h * w * c, -1.0, 1.0))]);
    let (coords2, mask2, r2) = (coords.clone(), mask.clone(), r.clone());
    case(
        "local_fuse",
        p,
        x,
        Box::new(move |p, x| {
            let (f, _) = local_fuse(p, 0, opts, &grid(h, w, c, x.get("grid")), &coords, &mask)?;
            Ok(dot(&r, &f))
        }),
        Box::new(move |p, x| {
            let g = grid(h, w, c, x.get("grid"));
            let (_, cache) = local_fuse(p, 0, opts, &g, &coords2, &mask2)?;
            let mut gp = p.zeros_like();
            let dg = local_fuse_backward(p, &g, &cache, &r2, &mut gp)?;
            Ok((gp, Vars(vec![("grid".into(), dg.data)])))
        }),
    )
}

pub fn global_fuse_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (10, 4, 6);
    let mut p = ParamStore::new(seed);
    init_global_fuser(&mut p, 0, c, d);
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 1).collect();
    let r = uniform(&mut rng, n * d, -1.0, 1.0);
    let x = Vars(vec![
        ("f_p".into(), uniform(&mut rng, n * d, -1.0, 1.0)),
        ("f_l".into(), uniform(&mut rng, n * c, -1.0, 1.0)),
    ]);
    let (mask2, r2) = (mask.clone(), r.clone());
    case(
        "global_fuse",
        p,
        x,
        Box::new(move |p, x| Ok(dot(&r, &global_fuse_rows(p, 0, x.get("f_p"), x.get("f_l"), &mask)?.0))),
        Box::new(move |p, x| {
            let (_, cache) = global_fuse_rows(p, 0, x.get("f_p"), x.get("f_l"), &mask2)?;
            let mut gp = p.zeros_like();
            let (dp, dl) = global_fuse_rows_backward(p, &cache, &r2, &mut gp)?;
            Ok((gp, Vars(vec![("f_p".into(), dp), ("f_l".into(), dl)])))
        }),
    )
}

fn head_params(seed: u64, d: usize) -> ParamStore {
    let mut p = ParamStore::new(seed);
    init_pose_head(&mut p, 0, d).expect("valid head width");
    p
}

fn point_set(d: usize, feats: &[f64], xyz: &[f64]) -> PointFeatureSet {
    PointFeatureSet::new(d, feats.to_vec(), xyz.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
        .expect("case shapes are consistent")
}

pub fn cost_volume_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, nt, d, k) = (7, 9, 4, 4);
    let p = head_params(seed, d);
    let tgt_xyz = uniform(&mut rng, nt * 3, -2.0, 2.0);
    let tgt_feat = uniform(&mut rng, nt * d, -1.0, 1.0);
    let r = uniform(&mut rng, ns * d, -1.0, 1.0);
    let x = Vars(vec![
        ("src_xyz".into(), uniform(&mut rng, ns * 3, -2.0, 2.0)),
        ("src_feat".into(), uniform(&mut rng, ns * d, -1.0, 1.0)),
        ("tgt_feat".into(), tgt_feat),
    ]);
    let (tgt_xyz2, r2) = (tgt_xyz.clone(), r.clone());
    case(
        "cost_volume",
        p,
        x,
        Box::new(move |p, x| {
            let src = point_set(d, x.get("src_feat"), x.get("src_xyz"));
            let tgt = point_set(d, x.get("tgt_feat"), &tgt_xyz);
            Ok(dot(&r, &cost_volume(p, 0, &src, &tgt, k)?.0))
        }),
        Box::new(move |p, x| {
            let src = point_set(d, x.get("src_feat"), x.get("src_xyz"));
            let tgt = point_set(d, x.get("tgt_feat"), &tgt_xyz2);
            let (_, cache) = cost_volume(p, 0, &src, &tgt, k)?;
            let mut gp = p.zeros_like();
            let g = cost_volume_backward(p, 0, &src, &tgt, &cache, &r2, &mut gp)?;
            Ok((
                gp,
                Vars(vec![
                    ("src_xyz".into(), g.src_coords.into_iter().flatten().collect()),
                    ("src_feat".into(), g.src_features),
                    ("tgt_feat".into(), g.tgt_features),
                ]),
            ))
        }),
    )
}

pub fn mask_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (8, 4);
    let p = head_params(seed, d);
    let r = uniform(&mut rng, n * d, -1.0, 1.0);
    let x = Vars(vec![
        ("e".into(), uniform(&mut rng, n * d, -1.0, 1.0)),
        ("f".into(), uniform(&mut rng, n * d, -1.0, 1.0)),
    ]);
    let r2 = r.clone();
    case(
        "mask",
        p,
        x,
        Box::new(move |p, x| Ok(dot(&r, &embedding_mask(p, 0, x.get("e"), x.get("f"), d)?.0))),
        Box::new(move |p, x| {
            let (_, cache) = embedding_mask(p, 0, x.get("e"), x.get("f"), d)?;
            let mut gp = p.zeros_like();
            let (de, df) = embedding_mask_backward(p, 0, &cache, &r2, d, &mut gp)?;
            Ok((gp, Vars(vec![("e".into(), de), ("f".into(), df)])))
        }),
    )
}

pub fn regress_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (8, 4);
    let mut p = head_params(seed, d);
    // Larger head weights so the normalisation is far from trivial.
    for fc in ["fc_q", "fc_t"] {
        let name = format!("{}.{fc}.weight", crate::pose_head::prefix(0));
        for v in p.data_mut(&name).expect("head weight exists").iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let rq = [0.3, -0.7, 0.5, 0.2];
    let rt = [0.4, 0.1, -0.9];
    let x = Vars(vec![
        ("e".into(), uniform(&mut rng, n * d, -1.0, 1.0)),
        ("m".into(), uniform(&mut rng, n * d, 0.0, 0.5)),
    ]);
    case(
        "regress",
        p,
        x,
        Box::new(move |p, x| {
            let (pose, _) = regress_pose(p, 0, x.get("e"), x.get("m"), d)?;
            Ok(dot(&rq, &pose.q.to_array()) + dot(&rt, &pose.t))
        }),
        Box::new(move |p, x| {
            let (_, cache) = regress_pose(p, 0, x.get("e"), x.get("m"), d)?;
            let mut gp = p.zeros_like();
            let dpose = PoseGrad { q: rq, t: rt };
            let (de, dm) = regress_pose_backward(p, 0, x.get("e"), x.get("m"), d, &cache, &dpose, &mut gp)?;
            Ok((gp, Vars(vec![("e".into(), de), ("m".into(), dm)])))
        }),
    )
}

/// Whole-network loss on a small synthetic pair with the micro profile.
pub fn end_to_end_case(seed: u64, n_points: usize) -> Result<GradCase> {
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::micro()
    };
    let pair = generate_pair(seed, n_points, PoseMagnitude::new(3f64.to_radians(), 0.2), 0.0, &synthetic_camera())?;
    let (source, target) = pair.frames();
    let gt = pair.gt;
    let params = init_params(&cfg)?;
    let (s2, t2) = (source.clone(), target.clone());
    Ok(GradCase {
        op: "end_to_end".into(),
        params,
        inputs: Vars::default(),
        tolerance: END_TO_END_TOLERANCE,
        samples_per_tensor: 2,
        loss: Box::new(move |p, _| Ok(pair_loss(p, &cfg, &source, &target, &gt, false)?.0)),
        grad: Box::new(move |p, x| {
            let (_, _, g) = pair_loss(p, &cfg, &s2, &t2, &gt, true)?;
            Ok((g.expect("gradients requested"), x.zeros_like()))
        }),
    })
}

/// Per-op cases in a fixed order.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    vec![
        dense_case(seed),
        conv_case(seed, false),
        conv_case(seed, true),
        bilinear_case(seed),
        local_fuse_case(seed),
        global_fuse_case(seed),
        cost_volume_case(seed),
        mask_case(seed),
        regress_case(seed),
    ]
}

/// Runs every per-op case and, if requested, the end-to-end check.
pub fn run_all(seed: u64, end_to_end: bool) -> Result<Vec<OpReport>> {
    run_all_with(seed, end_to_end, CheckOptions::default())
}

pub fn run_all_with(seed: u64, end_to_end: bool, opts: CheckOptions) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for c in op_cases(seed) {
        out.push(check_case(&c, opts, seed)?);
    }
    if end_to_end {
        let c = end_to_end_case(seed, 96)?;
        out.push(check_case(&c, opts, seed)?);
    }
    Ok(out)
}

/// Fails with the offending lines if any report failed.
pub fn require_all_passed(reports: &[OpReport]) -> Result<()> {
    let bad: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.line()).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(VloError::InvalidInput(format!("gradient check failed:\n{}", bad.join("\n"))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_passes() {
        for c in op_cases(11) {
            let r = check_case(&c, CheckOptions::default(), 11).unwrap();
            assert!(r.passed(), "{}", r.line());
        }
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        let c = dense_case(3);
        let r = check_case(
            &c,
            CheckOptions {
                corrupt: Some(1e-3),
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(!r.passed(), "{}", r.line());
    }

    #[test]
    fn rel_error_ignores_shared_zeros() {
        assert_eq!(rel_error(0.0, 1e-9), 0.0);
        assert!(rel_error(1.0, 1.1) > 0.09);
    }
}
