use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{hybrid_loss_on_tape, LossData};
use super::{
    Adam, BcPolicy, DifferentiablePolicy, PolicyKind, StablePolicy, TrainLog, TrainedModel,
    TrainedPolicy, TrainingConfig,
};
use crate::autodiff::{Tape, Tensor};
use crate::data::{to_goal_frame, Demonstration, GoalFrame};
use crate::error::{Error, Result};

trait Trainable: DifferentiablePolicy {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn after_step(&mut self) {}
}

impl Trainable for StablePolicy {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        StablePolicy::params_mut(self)
    }

    fn after_step(&mut self) {
        self.lyapunov.icnn.project();
    }
}

impl Trainable for BcPolicy {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Fits a policy of the given kind to one segment whose sequence ends at
/// `subgoal`. The data is mapped into the subgoal's goal frame first.
pub fn train_segment(
    segment: &Demonstration,
    subgoal: &[f64],
    cfg: &TrainingConfig,
    kind: PolicyKind,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let (data, frame) = to_goal_frame(segment, subgoal)?;
    let v_max = cfg.v_max_factor * segment.max_speed();
    train_segment_in_frame(&data, frame, v_max, cfg, kind)
}

/// Like [`train_segment`] for data already expressed in `frame`.
pub fn train_segment_in_frame(
    data: &Demonstration,
    frame: GoalFrame,
    v_max: f64,
    cfg: &TrainingConfig,
    kind: PolicyKind,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = data.dim();
    let loss_data = LossData::from_demo(data);
    let dt = cfg.dt.unwrap_or_else(|| data.median_dt());
    let (policy, initial, last) = match kind {
        PolicyKind::Stable => {
            let mut p = StablePolicy::init(&mut rng, dim, cfg.hidden, cfg.alpha, cfg.epsilon, frame);
            let (a, b) = fit(&mut p, &loss_data, cfg, dt, &mut rng)?;
            (TrainedPolicy::Stable(p), a, b)
        }
        PolicyKind::Bc => {
            let mut p = BcPolicy::init(&mut rng, dim, cfg.hidden, frame);
            let (a, b) = fit(&mut p, &loss_data, cfg, dt, &mut rng)?;
            (TrainedPolicy::Bc(p), a, b)
        }
    };
    log::info!(
        "trained {kind} policy: {} epochs, loss {initial:.3e} -> {last:.3e}",
        cfg.epochs
    );
    Ok(TrainedModel {
        policy,
        v_max,
        log: TrainLog {
            final_loss: last,
            initial_loss: Some(initial),
            epochs: cfg.epochs,
            seed: cfg.seed,
        },
    })
}

fn full_loss<P: DifferentiablePolicy>(
    policy: &P,
    data: &LossData,
    cfg: &TrainingConfig,
    dt: f64,
    tape: &mut Tape,
) -> Result<f64> {
    tape.clear();
    let starts: Vec<usize> = (0..data.len()).collect();
    let bound = policy.bind(tape)?;
    let loss = hybrid_loss_on_tape(
        tape,
        policy,
        &bound,
        data,
        &starts,
        cfg.gamma,
        cfg.rollout_window,
        dt,
    )?;
    Ok(tape.value(loss).item())
}

/// Runs the optimizer and returns the full-batch loss before and after.
fn fit<P: Trainable>(
    policy: &mut P,
    data: &LossData,
    cfg: &TrainingConfig,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let initial = full_loss(policy, data, cfg, dt, &mut tape)?;
    let mut opt = Adam::new(cfg.lr);
    let n = data.len();
    let full: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let starts = if cfg.batch >= n {
            full.clone()
        } else {
            let mut s = index::sample(rng, n, cfg.batch).into_vec();
            s.sort_unstable();
            s
        };
        tape.clear();
        let bound = policy.bind(&mut tape)?;
        let loss = hybrid_loss_on_tape(
            &mut tape,
            &*policy,
            &bound,
            data,
            &starts,
            cfg.gamma,
            cfg.rollout_window,
            dt,
        )
        .map_err(|e| match e {
            Error::Divergence { .. } => Error::NonFiniteLoss { epoch },
            other => other,
        })?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .params
            .iter()
            .map(|&p| grads.get_or_zeros(p, tape.shape(p)))
            .collect();
        if g.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        opt.step(policy.params_mut(), &g);
        policy.after_step();
        if (epoch + 1) % 1000 == 0 {
            log::debug!("epoch {}: batch loss {value:.4e}", epoch + 1);
        }
    }

    let last = if cfg.epochs == 0 {
        initial
    } else {
        full_loss(policy, data, cfg, dt, &mut tape)?
    };
    if !last.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok((initial, last))
}
