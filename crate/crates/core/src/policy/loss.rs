use super::{DifferentiablePolicy, TrainingConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Demonstration;
use crate::error::{Error, Result};

/// Positions and velocities of a goal-frame segment as `N x d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossData {
    pub x: Tensor,
    pub xdot: Tensor,
}

impl LossData {
    pub fn from_demo(demo: &Demonstration) -> Self {
        let (n, d) = (demo.len(), demo.dim());
        let mut x = Vec::with_capacity(n * d);
        let mut xdot = Vec::with_capacity(n * d);
        for s in demo.samples() {
            x.extend_from_slice(&s.x);
            xdot.extend_from_slice(&s.xdot);
        }
        LossData {
            x: Tensor::from_parts(n, d, x),
            xdot: Tensor::from_parts(n, d, xdot),
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn gather(t: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(t.row_slice(r));
        n += 1;
    }
    Tensor::from_parts(n, t.cols(), data)
}

/// `x_{m+1} = x_m + field(x_m) * dt` for `steps` steps; returns all `steps + 1`
/// states.
pub fn euler_rollout<F>(mut field: F, x0: &[f64], steps: usize, dt: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for m in 0..steps {
        let x = &traj[m];
        let v = field(x);
        let next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Divergence { step: m + 1 });
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Records the hybrid loss over the rollouts started at `starts` and returns
/// the scalar loss variable.
///
/// The velocity term is the mean squared error of the prediction at each
/// start. The trajectory term averages `|x_m - x_{i+m}|^2` over every valid
/// `(start i, step m)` pair with `1 <= m <= window`; windows running past the
/// end of the data are truncated.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss_on_tape<P: DifferentiablePolicy + ?Sized>(
    tape: &mut Tape,
    policy: &P,
    bound: &super::Bound,
    data: &LossData,
    starts: &[usize],
    gamma: f64,
    window: usize,
    dt: f64,
) -> Result<Var> {
    let n = data.len();
    let b = starts.len();
    let x0 = tape.constant(gather(&data.x, starts.iter().copied()));
    let pred = policy.forward(tape, bound, x0)?;

    let target = tape.constant(gather(&data.xdot, starts.iter().copied()));
    let err = tape.sub(pred, target)?;
    let err = tape.square(err);
    let vel = tape.sum(err);
    let vel = tape.scalar_mul(vel, 1.0 / b as f64);

    if gamma >= 1.0 {
        return Ok(tape.scalar_mul(vel, gamma));
    }

    let mut total: Option<Var> = None;
    let mut weight = 0.0;
    let mut x = x0;
    let mut v = pred;
    for m in 1..=window {
        let mask: Vec<f64> = starts
            .iter()
            .map(|&i| if i + m < n { 1.0 } else { 0.0 })
            .collect();
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            break;
        }
        if m > 1 {
            v = policy.forward(tape, bound, x)?;
        }
        let step = tape.scalar_mul(v, dt);
        x = tape.add(x, step)?;
        if !tape.value(x).all_finite() {
            return Err(Error::Divergence { step: m });
        }
        let target = tape.constant(gather(&data.x, starts.iter().map(|&i| (i + m).min(n - 1))));
        let d = tape.sub(x, target)?;
        let d = tape.square(d);
        let d = tape.row_sum(d);
        let w = tape.constant(Tensor::column(&mask));
        let d = tape.mul(d, w)?;
        let s = tape.sum(d);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        weight += count;
    }

    let vel = tape.scalar_mul(vel, gamma);
    match total {
        Some(t) => {
            let traj = tape.scalar_mul(t, (1.0 - gamma) / weight);
            tape.add(vel, traj)
        }
        None => Ok(vel),
    }
}

/// Full-batch hybrid loss of `policy` on goal-frame `data`.
pub fn hybrid_loss<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    data: &Demonstration,
    cfg: &TrainingConfig,
) -> Result<f64> {
    cfg.validate()?;
    let dt = cfg.dt.unwrap_or_else(|| data.median_dt());
    let loss_data = LossData::from_demo(data);
    let starts: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape)?;
    let loss = hybrid_loss_on_tape(
        &mut tape,
        policy,
        &bound,
        &loss_data,
        &starts,
        cfg.gamma,
        cfg.rollout_window,
        dt,
    )?;
    Ok(tape.value(loss).item())
}
