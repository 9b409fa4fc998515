//! End-to-end gradient verification on miniature model instances.
//!
//! Each differentiable objective is probed at several random parameter
//! points against central differences. Instances are deliberately small so
//! the full per-coordinate sweep stays fast; the gradient code paths are
//! identical to the full-size ones.

use crate::flowgen::{partial_denoise_predict, GenSpec, Generator};
use crate::gradcheck::grad_check;
use crate::mlp::Activation;
use crate::params::ParamVector;
use crate::prefdata::PreferencePair;
use crate::reward::{bt_loss, rm_loss, BtSpec, RewardModel, RmSpec, ScalarRewardModel};
use crate::rlhf::rl_step_loss_from_state;
use crate::rng::RngStream;
use crate::tasks::{composite, sample_condition, Dimension, Signal, TaskId, TaskParams};

#[derive(Debug, Clone)]
pub struct IntegrityCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl IntegrityCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Runs the four loss-gradient checks (flow matching, pairwise reward,
/// scalar baseline, and the full policy-side chain: one-step prediction →
/// composite → decode → reward → hinge), each at `points` random parameter
/// points on miniature instances.
pub fn gradient_integrity(points: usize, seed: u64) -> Vec<IntegrityCheck> {
    let tp = TaskParams::for_dim(24);
    let dim = tp.signal_dim;

    let gen_spec = GenSpec {
        signal_dim: dim,
        hidden: vec![6],
        activation: Activation::Tanh,
        cfg_dropout: 0.1,
    };
    let rm_spec = RmSpec {
        signal_dim: dim,
        hidden: vec![8],
        activation: Activation::Tanh,
    };
    let bt_spec = BtSpec {
        signal_dim: dim,
        hidden: vec![8],
        activation: Activation::Tanh,
    };

    let mut scene_rng = RngStream::new(seed, 900);
    let cond = sample_condition(&tp, TaskId::Fill, &mut scene_rng);
    let fm_batch = vec![(cond.source.clone(), cond.clone())];
    let fm_rng = RngStream::new(seed, 901);

    let pair = {
        let w = composite(&Signal::new(scene_rng.normal_vec(dim)), &cond);
        let l = composite(&Signal::new(scene_rng.normal_vec(dim)), &cond);
        PreferencePair {
            task: cond.task,
            dimension: Dimension::Structure,
            prompt: cond.prompt,
            winner: w,
            loser: l,
            source_set_id: 0,
        }
    };
    let x_ref = composite(&Signal::new(scene_rng.normal_vec(dim)), &cond);
    let noise = Signal::new(scene_rng.normal_vec(dim));

    let mut checks = Vec::new();

    // Flow-matching loss.
    {
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut init = RngStream::new(seed, 910 + p as u64);
            let start = Generator::init(gen_spec.clone(), &mut init);
            let spec = gen_spec.clone();
            let batch = fm_batch.clone();
            let rng = fm_rng.clone();
            let f = move |theta: &[f64]| {
                let g = Generator::from_params(spec.clone(), ParamVector::new(theta.to_vec(), spec.shape()));
                let (loss, grads) = crate::flowgen::fm_loss(&g, &batch, &rng).unwrap();
                (loss, grads.values().to_vec())
            };
            let report = grad_check(&f, start.params.values(), STEP).expect("finite fm evaluation");
            worst = worst.max(report.max_rel_err);
        }
        checks.push(IntegrityCheck {
            op: "fm_loss".into(),
            points,
            max_rel_err: worst,
            tolerance: TOLERANCE,
        });
    }

    // Pairwise reward loss.
    {
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut init = RngStream::new(seed, 920 + p as u64);
            let start = RewardModel::init(rm_spec.clone(), &mut init);
            let spec = rm_spec.clone();
            let pair = pair.clone();
            let f = move |theta: &[f64]| {
                let m = RewardModel::from_params(spec.clone(), ParamVector::new(theta.to_vec(), spec.shape()));
                let (loss, grads) = rm_loss(&m, &pair);
                (loss, grads.values().to_vec())
            };
            let report = grad_check(&f, start.params.values(), STEP).expect("finite rm evaluation");
            worst = worst.max(report.max_rel_err);
        }
        checks.push(IntegrityCheck {
            op: "rm_loss".into(),
            points,
            max_rel_err: worst,
            tolerance: TOLERANCE,
        });
    }

    // Scalar baseline loss.
    {
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut init = RngStream::new(seed, 930 + p as u64);
            let start = ScalarRewardModel::init(bt_spec.clone(), &mut init);
            let spec = bt_spec.clone();
            let pair = pair.clone();
            let f = move |theta: &[f64]| {
                let m = ScalarRewardModel {
                    spec: spec.clone(),
                    params: ParamVector::new(theta.to_vec(), spec.shape()),
                };
                let (loss, grads) = bt_loss(&m, &pair);
                (loss, grads.values().to_vec())
            };
            let report = grad_check(&f, start.params.values(), STEP).expect("finite bt evaluation");
            worst = worst.max(report.max_rel_err);
        }
        checks.push(IntegrityCheck {
            op: "bt_loss".into(),
            points,
            max_rel_err: worst,
            tolerance: TOLERANCE,
        });
    }

    // Full policy-side chain with the trajectory state frozen (the
    // deliberate gradient boundary of the one-step prediction).
    {
        let mut rm_rng = RngStream::new(seed, 940);
        let rm = RewardModel::init(rm_spec.clone(), &mut rm_rng);
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut init = RngStream::new(seed, 950 + p as u64);
            let start = Generator::init(gen_spec.clone(), &mut init);
            let s_star = 0.8;
            let x_star = partial_denoise_predict(&start, &cond, s_star, 10, 2.0, &noise)
                .expect("finite trajectory")
                .x_star;
            let spec = gen_spec.clone();
            let rm = rm.clone();
            let cond = cond.clone();
            let x_ref = x_ref.clone();
            let f = move |theta: &[f64]| {
                let g = Generator::from_params(spec.clone(), ParamVector::new(theta.to_vec(), spec.shape()));
                let out = rl_step_loss_from_state(&g, &rm, &cond, &x_ref, &x_star, s_star, 2.0, 0.95)
                    .unwrap();
                (out.j_mean, out.grads.values().to_vec())
            };
            let report = grad_check(&f, start.params.values(), STEP).expect("finite rl evaluation");
            worst = worst.max(report.max_rel_err);
        }
        checks.push(IntegrityCheck {
            op: "rl_step_loss".into(),
            points,
            max_rel_err: worst,
            tolerance: TOLERANCE,
        });
    }

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_suite_passes_quickly() {
        let checks = gradient_integrity(2, 123);
        assert_eq!(checks.len(), 4);
        for c in &checks {
            assert!(c.passed(), "{}: {}", c.op, c.max_rel_err);
        }
    }
}
