use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{PointMass, SimConfig};
use crate::controller::{
    run_task, CascadeController, Quat, RunOptions, SubgoalOutcome, TaskTargets, DEFAULT_DELTA,
};
use crate::data::Gripper;
use crate::error::{Error, Result};
use crate::policy::TrainedModel;
use crate::segment::SegmentedDemo;
use crate::waypoint::WaypointsFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "deterministic")]
    Deterministic,
    #[serde(rename = "noisy")]
    Noisy,
    #[serde(rename = "perturbed+noisy")]
    PerturbedNoisy,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::Deterministic,
        Condition::Noisy,
        Condition::PerturbedNoisy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Deterministic => "deterministic",
            Condition::Noisy => "noisy",
            Condition::PerturbedNoisy => "perturbed+noisy",
        }
    }

    /// `cfg` with the disturbances this condition excludes switched off.
    pub fn apply(self, cfg: &SimConfig) -> SimConfig {
        let mut out = cfg.clone();
        if self == Condition::Deterministic {
            out.noise_sigma = 0.0;
        }
        if self != Condition::PerturbedNoisy {
            out.perturb.count_per_segment = 0;
        }
        out
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown condition {s:?} (expected deterministic, noisy or perturbed+noisy)"
                ))
            })
    }
}

/// What a rollout has to accomplish: start point, ordered subgoals and the
/// timing of the demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub start: Vec<f64>,
    pub subgoals: Vec<Vec<f64>>,
    pub gripper_actions: Vec<Gripper>,
    pub deltas: Vec<f64>,
    /// Demonstrated duration of each segment, seconds.
    pub durations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_keys: Option<Vec<(Quat, Quat)>>,
}

impl TaskSpec {
    pub fn from_segmented(seg: &SegmentedDemo) -> Self {
        let keys: Option<Vec<(Quat, Quat)>> = seg
            .segments
            .iter()
            .map(|s| Some((s.first().q?, s.last().q?)))
            .collect();
        TaskSpec {
            start: seg.segments[0].first().x.clone(),
            subgoals: seg.subgoals.clone(),
            gripper_actions: seg.final_gripper_actions.clone(),
            deltas: vec![DEFAULT_DELTA; seg.len()],
            durations: seg.segments.iter().map(|s| s.duration()).collect(),
            orientation_keys: keys,
        }
    }

    pub fn from_waypoints(file: &WaypointsFile) -> Result<Self> {
        let seg = crate::segment::SegmentsFile {
            dim: file.dim,
            segments: file.segments.iter().map(|e| e.segment.clone()).collect(),
        }
        .into_segmented()?;
        Ok(Self::from_segmented(&seg))
    }

    pub fn len(&self) -> usize {
        self.subgoals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgoals.is_empty()
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.deltas = vec![delta; self.len()];
        self
    }

    fn targets(&self) -> TaskTargets {
        TaskTargets {
            subgoals: self.subgoals.clone(),
            deltas: self.deltas.clone(),
            gripper_actions: self.gripper_actions.clone(),
        }
    }

    /// Controller for `models`: either one model per subgoal, or a single
    /// model driving straight to the final subgoal.
    pub fn controller(&self, models: &[TrainedModel]) -> Result<CascadeController> {
        let k = self.len();
        let (subgoals, grippers, deltas, keys) = if models.len() == k {
            (
                self.subgoals.clone(),
                self.gripper_actions.clone(),
                self.deltas.clone(),
                self.orientation_keys.clone(),
            )
        } else if models.len() == 1 {
            (
                vec![self.subgoals[k - 1].clone()],
                vec![self.gripper_actions[k - 1]],
                vec![self.deltas[k - 1]],
                self.orientation_keys
                    .as_ref()
                    .map(|keys| vec![(keys[0].0, keys[k - 1].1)]),
            )
        } else {
            return Err(Error::Config(format!(
                "task has {k} segments but {} models were given",
                models.len()
            )));
        };
        let mut ctrl = CascadeController::new(models.to_vec(), subgoals, grippers)?
            .with_deltas(deltas)?;
        if let Some(keys) = keys {
            ctrl = ctrl.with_orientation_keys(keys)?;
        }
        Ok(ctrl)
    }
}

/// Trained models of one training seed.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub seed: u64,
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub rollout: usize,
    pub outcomes: Vec<SubgoalOutcome>,
    pub resets: usize,
    pub kicks: usize,
    pub total_success: bool,
}

/// Mean and population standard deviation over seeds, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub mean: f64,
    pub std: f64,
}

impl Rate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Rate {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub rollouts_per_seed: usize,
    pub subgoal_rates: Vec<Rate>,
    pub total: Rate,
    pub runs: Vec<RunLog>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-seed success percentages for subgoal `j`, or for the whole task
    /// when `j` is `None`, recomputed from the run logs.
    pub fn per_seed_rates(&self, j: Option<usize>) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|&s| {
                let runs: Vec<&RunLog> = self.runs.iter().filter(|r| r.seed == s).collect();
                let hits = runs
                    .iter()
                    .filter(|r| match j {
                        Some(j) => r.outcomes[j].attained,
                        None => r.total_success,
                    })
                    .count();
                100.0 * hits as f64 / runs.len() as f64
            })
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG seed of one rollout, derived from the simulator seed, the training
/// seed and the rollout index.
pub fn rollout_seed(sim_seed: u64, train_seed: u64, rollout: usize) -> u64 {
    splitmix(splitmix(splitmix(sim_seed) ^ train_seed) ^ rollout as u64)
}

/// Simulates one rollout of `models` on `task`.
pub fn simulate(
    models: &[TrainedModel],
    task: &TaskSpec,
    cfg: &SimConfig,
    rng_seed: u64,
    record_trajectory: bool,
) -> Result<(crate::controller::Rollout, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let expected: Vec<usize> = task
        .durations
        .iter()
        .map(|d| ((d / cfg.dt).round() as usize).max(1))
        .collect();
    let schedule: Vec<Vec<usize>> = expected
        .iter()
        .map(|&n| {
            (0..cfg.perturb.count_per_segment)
                .map(|_| rng.gen_range(0..n))
                .collect()
        })
        .collect();
    let mut ctrl = task.controller(models)?;
    let mut env = PointMass::new(task.start.clone(), cfg.clone(), schedule, rng);
    let opts = RunOptions {
        horizon_per_subgoal: cfg.horizon_per_subgoal,
        reset_on_timeout: true,
        expected_steps: expected,
        record_trajectory,
    };
    let rollout = run_task(&mut ctrl, &mut env, &task.targets(), &opts)?;
    Ok((rollout, env.kicks))
}

/// Monte-Carlo evaluation over training seeds and rollouts.
pub fn evaluate(
    models: &[SeedModels],
    task: &TaskSpec,
    condition: Condition,
    rollouts_per_seed: usize,
    cfg: &SimConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if models.is_empty() || rollouts_per_seed == 0 {
        return Err(Error::Config("need at least one seed and one rollout".into()));
    }
    for m in models {
        if m.models.len() != task.len() && m.models.len() != 1 {
            return Err(Error::Config(format!(
                "seed {}: {} models for a {}-segment task",
                m.seed,
                m.models.len(),
                task.len()
            )));
        }
    }
    let cfg = condition.apply(cfg);
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|s| (0..rollouts_per_seed).map(move |r| (s, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, r)| {
            let seed = models[s].seed;
            let (rollout, kicks) = simulate(
                &models[s].models,
                task,
                &cfg,
                rollout_seed(cfg.seed, seed, r),
                false,
            )?;
            Ok(RunLog {
                seed,
                rollout: r,
                outcomes: rollout.outcomes,
                resets: rollout.resets,
                kicks,
                total_success: rollout.total_success,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport {
        condition,
        seeds: models.iter().map(|m| m.seed).collect(),
        rollouts_per_seed,
        subgoal_rates: vec![],
        total: Rate { mean: 0.0, std: 0.0 },
        runs,
    };
    report.subgoal_rates = (0..task.len())
        .map(|j| Rate::from_samples(&report.per_seed_rates(Some(j))))
        .collect();
    report.total = Rate::from_samples(&report.per_seed_rates(None));
    Ok(report)
}

/// Success-rate table with one row per subgoal plus a total row and a
/// mean/std column pair per labelled report.
pub fn table_csv(columns: &[(String, &EvalReport)]) -> String {
    let mut out = String::from("row");
    for (label, r) in columns {
        let _ = write!(out, ",{}:{label}:mean,{}:{label}:std", r.condition, r.condition);
    }
    out.push('\n');
    let rows = columns.iter().map(|(_, r)| r.subgoal_rates.len()).max().unwrap_or(0);
    for j in 0..rows {
        let _ = write!(out, "subgoal {}", j + 1);
        for (_, r) in columns {
            match r.subgoal_rates.get(j) {
                Some(rate) => {
                    let _ = write!(out, ",{:.1},{:.1}", rate.mean, rate.std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out.push_str("total");
    for (_, r) in columns {
        let _ = write!(out, ",{:.1},{:.1}", r.total.mean, r.total.std);
    }
    out.push('\n');
    out
}
