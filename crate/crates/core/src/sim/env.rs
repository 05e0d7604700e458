use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{ControlOutput, Environment};
use crate::error::{Error, Result};
use crate::policy::clip_speed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub count_per_segment: usize,
    /// Displacement length of each kick, meters.
    pub magnitude: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            count_per_segment: 1,
            magnitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub noise_sigma: f64,
    pub perturb: Perturbation,
    /// Extra speed cap on top of each policy's own.
    pub v_max: Option<f64>,
    pub horizon_per_subgoal: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            noise_sigma: 0.01,
            perturb: Perturbation::default(),
            v_max: None,
            horizon_per_subgoal: 1000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.perturb.magnitude >= 0.0) {
            return Err(Error::Config(format!(
                "perturbation magnitude must be nonnegative, got {}",
                self.perturb.magnitude
            )));
        }
        if let Some(v) = self.v_max {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("v_max must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Uniformly random direction scaled to `magnitude`.
pub fn random_kick(dim: usize, magnitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = crate::data::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c * magnitude / n).collect();
        }
    }
}

/// One control period of the point mass. Returns the new true position and a
/// noisy observation of it.
pub fn env_step(
    x_true: &[f64],
    velocity: &[f64],
    cfg: &SimConfig,
    impulse: bool,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut v = velocity.to_vec();
    if let Some(cap) = cfg.v_max {
        clip_speed(&mut v, cap);
    }
    let mut next: Vec<f64> = x_true.iter().zip(&v).map(|(x, v)| x + v * cfg.dt).collect();
    if impulse {
        let kick = random_kick(next.len(), cfg.perturb.magnitude, rng);
        next.iter_mut().zip(kick).for_each(|(x, k)| *x += k);
    }
    let obs = observe(&next, cfg.noise_sigma, rng);
    (next, obs)
}

pub fn observe(x: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|c| {
            let n: f64 = StandardNormal.sample(&mut *rng);
            c + sigma * n
        })
        .collect()
}

/// Kinematic point mass with observation noise and scheduled kicks.
pub struct PointMass<R: Rng> {
    x: Vec<f64>,
    cfg: SimConfig,
    /// Per task subgoal: steps (counted within that subgoal) that get a kick.
    schedule: Vec<Vec<usize>>,
    rng: R,
    pub kicks: usize,
}

impl<R: Rng> PointMass<R> {
    pub fn new(x0: Vec<f64>, cfg: SimConfig, schedule: Vec<Vec<usize>>, rng: R) -> Self {
        PointMass {
            x: x0,
            cfg,
            schedule,
            rng,
            kicks: 0,
        }
    }
}

impl<R: Rng> Environment for PointMass<R> {
    fn position(&self) -> &[f64] {
        &self.x
    }

    fn step(&mut self, out: &ControlOutput, subgoal: usize, step_in_subgoal: usize) -> Result<Vec<f64>> {
        let impulse = self
            .schedule
            .get(subgoal)
            .is_some_and(|s| s.contains(&step_in_subgoal));
        if impulse {
            self.kicks += 1;
        }
        let (x, obs) = env_step(&self.x, &out.velocity, &self.cfg, impulse, &mut self.rng);
        self.x = x;
        Ok(obs)
    }

    fn reset_to(&mut self, x: &[f64]) -> Vec<f64> {
        self.x = x.to_vec();
        self.observe()
    }

    fn observe(&mut self) -> Vec<f64> {
        observe(&self.x, self.cfg.noise_sigma, &mut self.rng)
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }
}
