//! Subgoal cascade: runs segment policy `k` until the observed position is
//! within `delta[k]` of subgoal `k`, then switches to policy `k + 1` and
//! commands that subgoal's gripper action. The last policy is never left.

use serde::{Deserialize, Serialize};

use crate::data::{distance, Gripper};
use crate::error::{Error, Result};
use crate::policy::TrainedModel;

/// Default attainment radius in meters.
pub const DEFAULT_DELTA: f64 = 0.008;

/// Tolerance on the input norm accepted by [`slerp`].
pub const QUAT_INPUT_TOL: f64 = 1e-6;

/// Quaternion `(w, x, y, z)`.
pub type Quat = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clause {
    /// Subgoal not reached; keep the active policy.
    Track,
    /// Subgoal reached with a later segment available; switch.
    Advance,
    /// Final subgoal reached; keep the last policy.
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// World-frame velocity command, already speed-capped.
    pub velocity: Vec<f64>,
    pub gripper_command: Option<Gripper>,
    pub orientation: Option<Quat>,
    pub segment_completed: bool,
    pub clause: Clause,
    /// Segment whose policy produced `velocity`.
    pub active_segment: usize,
}

#[derive(Debug, Clone)]
pub struct CascadeController {
    policies: Vec<TrainedModel>,
    subgoals: Vec<Vec<f64>>,
    deltas: Vec<f64>,
    gripper_actions: Vec<Gripper>,
    orientation_keys: Option<Vec<(Quat, Quat)>>,
    period: Option<f64>,
    active: usize,
}

impl CascadeController {
    pub fn new(
        policies: Vec<TrainedModel>,
        subgoals: Vec<Vec<f64>>,
        gripper_actions: Vec<Gripper>,
    ) -> Result<Self> {
        let k = policies.len();
        if k == 0 {
            return Err(Error::Config("controller needs at least one policy".into()));
        }
        if subgoals.len() != k || gripper_actions.len() != k {
            return Err(Error::Config(format!(
                "{k} policies but {} subgoals and {} gripper actions",
                subgoals.len(),
                gripper_actions.len()
            )));
        }
        let dim = policies[0].policy.dim();
        for (p, g) in policies.iter().zip(&subgoals) {
            if p.policy.dim() != dim || g.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if p.policy.dim() != dim { p.policy.dim() } else { g.len() },
                });
            }
        }
        Ok(CascadeController {
            policies,
            subgoals,
            deltas: vec![DEFAULT_DELTA; k],
            gripper_actions,
            orientation_keys: None,
            period: None,
            active: 0,
        })
    }

    pub fn with_deltas(mut self, deltas: Vec<f64>) -> Result<Self> {
        if deltas.len() != self.len() || deltas.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config(format!(
                "need {} nonnegative thresholds",
                self.len()
            )));
        }
        self.deltas = deltas;
        Ok(self)
    }

    pub fn with_delta(self, delta: f64) -> Result<Self> {
        let k = self.len();
        self.with_deltas(vec![delta; k])
    }

    pub fn with_orientation_keys(mut self, keys: Vec<(Quat, Quat)>) -> Result<Self> {
        if keys.len() != self.len() {
            return Err(Error::Config(format!(
                "need {} orientation key pairs, got {}",
                self.len(),
                keys.len()
            )));
        }
        for (a, b) in &keys {
            check_unit(a)?;
            check_unit(b)?;
        }
        self.orientation_keys = Some(keys);
        Ok(self)
    }

    /// Seconds each command is held by the plant. When set, stable policies
    /// command the displacement of their own flow over one period, so `v`
    /// decreases over every held step; see
    /// [`TrainedModel::command_for_period`].
    pub fn set_control_period(&mut self, dt: Option<f64>) -> Result<()> {
        if let Some(dt) = dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("control period must be positive, got {dt}")));
            }
        }
        self.period = dt;
        Ok(())
    }

    pub fn control_period(&self) -> Option<f64> {
        self.period
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.subgoals[0].len()
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn subgoals(&self) -> &[Vec<f64>] {
        &self.subgoals
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn policies(&self) -> &[TrainedModel] {
        &self.policies
    }

    /// Moves forward to segment `k` (clamped to the last one). Never moves
    /// backwards.
    pub fn resume_at(&mut self, k: usize) {
        self.active = self.active.max(k.min(self.len() - 1));
    }

    pub fn reset(&mut self) {
        self.active = 0;
    }

    /// Which clause fires for `x` with segment `k` active.
    pub fn clause(&self, k: usize, x: &[f64]) -> Clause {
        if distance(x, &self.subgoals[k]) > self.deltas[k] {
            Clause::Track
        } else if k + 1 < self.len() {
            Clause::Advance
        } else {
            Clause::Hold
        }
    }

    pub fn step(&mut self, x: &[f64], t_in_segment: f64) -> Result<ControlOutput> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite position".into()));
        }
        let clause = self.clause(self.active, x);
        let mut gripper_command = None;
        if clause == Clause::Advance {
            gripper_command = Some(self.gripper_actions[self.active]);
            self.active += 1;
        }
        if clause == Clause::Hold {
            gripper_command = Some(self.gripper_actions[self.active]);
        }
        let policy = &self.policies[self.active];
        let velocity = match self.period {
            Some(dt) => policy.command_for_period(x, dt)?,
            None => policy.command(x)?,
        };
        let orientation = match &self.orientation_keys {
            Some(keys) => {
                let (a, b) = keys[self.active];
                Some(slerp(&a, &b, t_in_segment.clamp(0.0, 1.0))?)
            }
            None => None,
        };
        Ok(ControlOutput {
            velocity,
            gripper_command,
            orientation,
            segment_completed: clause != Clause::Track,
            clause,
            active_segment: self.active,
        })
    }
}

fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn check_unit(q: &Quat) -> Result<()> {
    let norm = quat_norm(q);
    if (norm - 1.0).abs() > QUAT_INPUT_TOL || !norm.is_finite() {
        return Err(Error::NonUnitQuaternion { norm });
    }
    Ok(())
}

/// Constant angular velocity interpolation along the shorter arc.
pub fn slerp(q0: &Quat, q1: &Quat, s: f64) -> Result<Quat> {
    check_unit(q0)?;
    check_unit(q1)?;
    let mut q1 = *q1;
    let mut dot: f64 = q0.iter().zip(&q1).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        q1.iter_mut().for_each(|c| *c = -*c);
        dot = -dot;
    }
    let theta = dot.min(1.0).acos();
    let (w0, w1) = if theta < 1e-6 {
        (1.0 - s, s)
    } else {
        let sin = theta.sin();
        (((1.0 - s) * theta).sin() / sin, (s * theta).sin() / sin)
    };
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = w0 * q0[i] + w1 * q1[i];
    }
    let n = quat_norm(&out);
    out.iter_mut().for_each(|c| *c /= n);
    Ok(out)
}

/// Outcome for one subgoal of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalOutcome {
    pub attained: bool,
    /// Steps spent on this subgoal (the horizon on timeout).
    pub steps: usize,
    /// True when the state was reset to the subgoal after a timeout.
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub observed: Vec<f64>,
    /// Velocity commanded on the step that led here.
    pub velocity: Vec<f64>,
    pub gripper: Gripper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Quat>,
    pub active_segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub trajectory: Vec<TrajectoryPoint>,
    pub outcomes: Vec<SubgoalOutcome>,
    pub resets: usize,
    /// All subgoals attained in order without any reset.
    pub total_success: bool,
}

impl Rollout {
    /// Trajectory in the demonstration CSV layout plus an `active_segment`
    /// column. `xdot` holds the commanded velocity.
    pub fn to_csv(&self, dim: usize) -> String {
        let mut out = crate::data::csv_header(dim);
        out.push_str(",active_segment\n");
        for p in &self.trajectory {
            let sample = crate::data::Sample {
                t: p.t,
                x: p.x.clone(),
                xdot: p.velocity.clone(),
                gripper: p.gripper,
                q: p.q,
            };
            out.push_str(&crate::data::csv_row(&sample));
            out.push_str(&format!(",{}\n", p.active_segment));
        }
        out
    }
}

/// World the controller acts on.
pub trait Environment {
    /// True (noise-free) position.
    fn position(&self) -> &[f64];
    /// Applies one command; returns the observed position afterwards.
    fn step(&mut self, out: &ControlOutput, subgoal: usize, step_in_subgoal: usize) -> Result<Vec<f64>>;
    /// Places the true state at `x`; returns the observed position.
    fn reset_to(&mut self, x: &[f64]) -> Vec<f64>;
    /// Current observed position.
    fn observe(&mut self) -> Vec<f64>;
    fn dt(&self) -> f64;
}

/// Options of [`run_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub horizon_per_subgoal: usize,
    /// Reset to the missed subgoal on timeout and continue; otherwise stop.
    pub reset_on_timeout: bool,
    /// Expected steps per task subgoal, used for the orientation schedule.
    pub expected_steps: Vec<usize>,
    pub record_trajectory: bool,
}

/// Drives `ctrl` until every subgoal of `ctrl` is attained or timed out.
pub fn run_to_completion<E: Environment>(
    ctrl: &mut CascadeController,
    env: &mut E,
    horizon_per_subgoal: usize,
) -> Result<Rollout> {
    let task = TaskTargets {
        subgoals: ctrl.subgoals.clone(),
        deltas: ctrl.deltas.clone(),
        gripper_actions: ctrl.gripper_actions.clone(),
    };
    let opts = RunOptions {
        horizon_per_subgoal,
        reset_on_timeout: true,
        expected_steps: vec![horizon_per_subgoal.max(1); task.subgoals.len()],
        record_trajectory: true,
    };
    run_task(ctrl, env, &task, &opts)
}

/// Subgoals a run is scored against. They normally equal the controller's
/// own, but a controller with fewer segments can be scored against the full
/// task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTargets {
    pub subgoals: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
    pub gripper_actions: Vec<Gripper>,
}

/// Runs the controller against the task subgoals in order.
///
/// Task subgoal `j` is attained when an observed position lands within
/// `deltas[j]` of it. If that does not happen within the horizon, the
/// subgoal is recorded as failed and, with `reset_on_timeout`, the true state
/// is placed on the subgoal, its gripper action applied and the controller
/// moved to the following segment (when the controller has one segment per
/// task subgoal). Runs with a reset never count as a total success.
///
/// The controller's control period is set to the environment's `dt`.
pub fn run_task<E: Environment>(
    ctrl: &mut CascadeController,
    env: &mut E,
    task: &TaskTargets,
    opts: &RunOptions,
) -> Result<Rollout> {
    let k_task = task.subgoals.len();
    let same_cascade = ctrl.len() == k_task;
    let dt = env.dt();
    ctrl.set_control_period(Some(dt))?;
    let mut outcomes = Vec::with_capacity(k_task);
    let mut trajectory = Vec::new();
    let mut resets = 0;
    let mut gripper = Gripper::Open;
    let mut t = 0.0;
    let mut obs = env.observe();
    let mut stopped = false;

    for j in 0..k_task {
        if stopped {
            outcomes.push(SubgoalOutcome {
                attained: false,
                steps: 0,
                reset: false,
            });
            continue;
        }
        let expected = opts.expected_steps.get(j).copied().unwrap_or(1).max(1);
        let mut steps = 0;
        let mut attained = false;
        loop {
            if distance(&obs, &task.subgoals[j]) <= task.deltas[j] {
                attained = true;
                gripper = task.gripper_actions[j];
                break;
            }
            if steps >= opts.horizon_per_subgoal {
                break;
            }
            let out = ctrl.step(&obs, steps as f64 / expected as f64)?;
            obs = env.step(&out, j, steps)?;
            if obs.iter().any(|c| !c.is_finite()) || env.position().iter().any(|c| !c.is_finite()) {
                return Err(Error::Divergence { step: steps + 1 });
            }
            steps += 1;
            t += dt;
            if opts.record_trajectory {
                trajectory.push(TrajectoryPoint {
                    t,
                    x: env.position().to_vec(),
                    observed: obs.clone(),
                    velocity: out.velocity.clone(),
                    gripper,
                    q: out.orientation,
                    active_segment: out.active_segment,
                });
            }
        }
        let mut reset = false;
        if !attained {
            if opts.reset_on_timeout {
                obs = env.reset_to(&task.subgoals[j]);
                gripper = task.gripper_actions[j];
                resets += 1;
                reset = true;
            } else {
                stopped = true;
            }
        }
        if reset && same_cascade {
            ctrl.resume_at(j + 1);
        }
        outcomes.push(SubgoalOutcome {
            attained,
            steps,
            reset,
        });
    }

    let total_success = resets == 0 && outcomes.iter().all(|o| o.attained);
    Ok(Rollout {
        trajectory,
        outcomes,
        resets,
        total_success,
    })
}
