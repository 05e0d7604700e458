//! Per-segment velocity policies, their training loss and training loop.
//!
//! Policies operate in a segment's goal frame. [`TrainedModel`] bundles a
//! policy with its world-frame speed cap and training log, and is what gets
//! written to model files.

mod adam;
mod bc;
mod loss;
mod model_file;
mod network;
mod stable;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::GoalFrame;
use crate::error::{Error, Result};

pub use adam::Adam;
pub use bc::{bc_forward, BcPolicy};
pub use loss::{euler_rollout, hybrid_loss, hybrid_loss_on_tape, LossData};
pub use model_file::{load_model, save_model, ModelFile};
pub use network::{Dense, Icnn, IcnnJson, LayerJson, Mlp, INIT_STD};
pub use stable::{
    LyapunovCandidate, StableEval, StablePolicy, DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_HIDDEN,
    LYAPUNOV_KNEE, ORIGIN_RADIUS,
};
pub use train::{train_segment, train_segment_in_frame};

/// Parameters of a policy placed on a tape, plus any derived values that do
/// not depend on the input batch.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    pub aux: Vec<Var>,
}

/// A policy whose batched forward pass can be recorded for training.
pub trait DifferentiablePolicy {
    /// Registers the parameters as tape variables, in the order of the
    /// policy's `params()`.
    fn bind(&self, tape: &mut Tape) -> Result<Bound>;

    /// Velocities for an `m x d` batch of goal-frame positions.
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Stable,
    Bc,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Stable => "stable",
            PolicyKind::Bc => "bc",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stable" => Ok(PolicyKind::Stable),
            "bc" => Ok(PolicyKind::Bc),
            other => Err(Error::Config(format!(
                "unknown policy kind {other:?} (expected stable or bc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the velocity term; `1 - gamma` goes to the rollout term.
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub rollout_window: usize,
    /// Euler step of the rollout term. `None` uses the median sample spacing.
    pub dt: Option<f64>,
    /// Rollout starts per optimizer step; at least the segment length means
    /// full batch.
    pub batch: usize,
    pub seed: u64,
    pub alpha: f64,
    pub epsilon: f64,
    pub hidden: usize,
    /// Speed cap as a multiple of the segment's top recorded speed.
    pub v_max_factor: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.5,
            epochs: 10_000,
            lr: 1e-3,
            rollout_window: 5,
            dt: None,
            batch: 64,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            hidden: DEFAULT_HIDDEN,
            v_max_factor: 2.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad(format!("dt must be positive, got {dt}"));
            }
        }
        if self.rollout_window == 0 {
            return bad("rollout_window must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.alpha > 0.0) || !(self.epsilon > 0.0) {
            return bad("alpha and epsilon must be positive".into());
        }
        if self.hidden == 0 {
            return bad("hidden width must be at least 1".into());
        }
        if !(self.v_max_factor > 0.0) {
            return bad(format!("v_max_factor must be positive, got {}", self.v_max_factor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedPolicy {
    Stable(StablePolicy),
    Bc(BcPolicy),
}

impl TrainedPolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            TrainedPolicy::Stable(_) => PolicyKind::Stable,
            TrainedPolicy::Bc(_) => PolicyKind::Bc,
        }
    }

    pub fn frame(&self) -> &GoalFrame {
        match self {
            TrainedPolicy::Stable(p) => &p.frame,
            TrainedPolicy::Bc(p) => &p.frame,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrainedPolicy::Stable(p) => p.dim(),
            TrainedPolicy::Bc(p) => p.dim(),
        }
    }

    /// Velocity at a goal-frame position, in goal-frame units.
    pub fn velocity_in_frame(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TrainedPolicy::Stable(p) => p.velocity(x),
            TrainedPolicy::Bc(p) => bc_forward(p, x),
        }
    }

    /// Velocity at a world position, in world units.
    pub fn velocity_world(&self, x: &[f64]) -> Result<Vec<f64>> {
        let frame = self.frame();
        let p = frame.point_to_frame(x)?;
        frame.velocity_to_world(&self.velocity_in_frame(&p))
    }

    pub fn as_differentiable(&self) -> &dyn DifferentiablePolicy {
        match self {
            TrainedPolicy::Stable(p) => p,
            TrainedPolicy::Bc(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub final_loss: f64,
    #[serde(default)]
    pub initial_loss: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
}

/// A trained policy ready for deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub policy: TrainedPolicy,
    /// World-frame speed cap.
    pub v_max: f64,
    pub log: TrainLog,
}

impl TrainedModel {
    /// World velocity at world position `x`, radially clipped to `v_max`.
    pub fn command(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.policy.velocity_world(x)?;
        clip_speed(&mut v, self.v_max);
        Ok(v)
    }

    /// Velocity to hold for `dt` seconds so the plant lands where the
    /// policy's own flow would be after `dt`.
    ///
    /// The flow is integrated in substeps, each accepted only if it lowers
    /// `v` by at least [`STEP_DECREASE`] of the first-order prediction, so
    /// `v` falls on every executed step and not only in the continuous
    /// limit. Substeps halve after a rejection and double after an
    /// acceptance. BC policies have no `v`; their plain command is returned.
    pub fn command_for_period(&self, x: &[f64], dt: f64) -> Result<Vec<f64>> {
        let TrainedPolicy::Stable(p) = &self.policy else {
            return self.command(x);
        };
        let frame = &p.frame;
        let mut y = frame.point_to_frame(x)?;
        let (mut v, mut grad) = p.lyapunov.value_and_grad(&y);
        let mut left = dt;
        let mut h = dt;
        for _ in 0..MAX_SUBSTEPS {
            if left <= 0.0 {
                break;
            }
            h = h.min(left);
            let mut u = frame.velocity_to_world(&p.velocity(&y))?;
            clip_speed(&mut u, self.v_max);
            let u = frame.velocity_to_frame(&u)?;
            let slope = stable::dot(&grad, &u);
            if !(slope < 0.0) {
                break;
            }
            let next: Vec<f64> = y.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let (vn, gn) = p.lyapunov.value_and_grad(&next);
            if vn <= v + STEP_DECREASE * h * slope {
                y = next;
                (v, grad) = (vn, gn);
                left -= h;
                h *= 2.0;
            } else {
                h *= 0.5;
            }
        }
        let end = frame.point_to_world(&y)?;
        let mut cmd: Vec<f64> = end.iter().zip(x).map(|(a, b)| (a - b) / dt).collect();
        clip_speed(&mut cmd, self.v_max);
        Ok(cmd)
    }
}

/// Fraction of the predicted decrease of `v` a flow substep must achieve.
pub const STEP_DECREASE: f64 = 0.1;
const MAX_SUBSTEPS: usize = 256;

/// Rescales `v` so its norm is at most `cap`.
pub fn clip_speed(v: &mut [f64], cap: f64) {
    let n = crate::data::norm(v);
    if n > cap {
        let k = cap / n;
        v.iter_mut().for_each(|c| *c *= k);
    }
}
