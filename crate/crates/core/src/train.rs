//! Adam optimiser and the single-pair micro-trainer.

use std::collections::HashMap;

use crate::config::{PipelineConfig, TrainConfig};
use crate::error::{Result, VloError};
use crate::geometry::PoseSE3;
use crate::nn::ParamStore;
use crate::pipeline::{estimate_pose, init_params, pair_loss};
use crate::synth::SyntheticPair;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub settings: TrainConfig,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(settings: TrainConfig) -> Self {
        Self {
            settings,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let TrainConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.settings;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, tensor) in params.iter_mut() {
            let g = grads.data(name)?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                tensor.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pose: PoseSE3,
    /// Loss before each step; one extra entry for the final parameters.
    pub losses: Vec<f64>,
    pub params: ParamStore,
}

/// Overfits freshly initialised parameters to one pair for `steps` Adam
/// steps at `learning_rate`.
pub fn micro_train(cfg: &PipelineConfig, pair: &SyntheticPair, steps: usize, learning_rate: f64) -> Result<TrainOutcome> {
    let params = init_params(cfg)?;
    micro_train_from(cfg, params, pair, steps, learning_rate)
}

pub fn micro_train_from(
    cfg: &PipelineConfig,
    mut params: ParamStore,
    pair: &SyntheticPair,
    steps: usize,
    learning_rate: f64,
) -> Result<TrainOutcome> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(VloError::InvalidInput(format!("invalid learning rate {learning_rate}")));
    }
    let (source, target) = pair.frames();
    let mut opt = Adam::new(TrainConfig {
        learning_rate,
        ..cfg.train
    });
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, _, grads) = pair_loss(&params, cfg, &source, &target, &pair.gt, true)?;
        let grads = grads.expect("gradients requested");
        if !loss.is_finite() || !grads.is_finite() {
            return Err(VloError::NonFiniteLoss(step));
        }
        if step % 50 == 0 {
            log::info!("step {step}: loss {loss:.6}");
        }
        losses.push(loss);
        opt.update(&mut params, &grads)?;
    }
    let (loss, poses, _) = pair_loss(&params, cfg, &source, &target, &pair.gt, false)?;
    if !loss.is_finite() {
        return Err(VloError::NonFiniteLoss(steps));
    }
    losses.push(loss);
    let pose = *poses.last().expect("LEVELS > 0");
    Ok(TrainOutcome { pose, losses, params })
}

/// Pose of the untrained network, as returned by zero training steps.
pub fn initial_pose(cfg: &PipelineConfig, pair: &SyntheticPair) -> Result<PoseSE3> {
    let params = init_params(cfg)?;
    let (s, t) = pair.frames();
    estimate_pose(&params, cfg, &s, &t)
}
