use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subgoal_ds::controller::{
    run_task, run_to_completion, slerp, CascadeController, Clause, ControlOutput, Environment,
    Quat, RunOptions, TaskTargets, DEFAULT_DELTA,
};
use subgoal_ds::data::{Gripper, GoalFrame};
use subgoal_ds::policy::{
    StablePolicy, TrainLog, TrainedModel, TrainedPolicy, DEFAULT_ALPHA, DEFAULT_EPSILON,
};
use subgoal_ds::Error;

/// Untrained stable policy converging on `goal`; stability does not depend
/// on training.
fn model(goal: &[f64], seed: u64) -> TrainedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = GoalFrame::new(goal.to_vec(), vec![4.0; goal.len()]).unwrap();
    TrainedModel {
        policy: TrainedPolicy::Stable(StablePolicy::init(
            &mut rng,
            goal.len(),
            8,
            DEFAULT_ALPHA,
            DEFAULT_EPSILON,
            frame,
        )),
        v_max: 0.5,
        log: TrainLog {
            final_loss: 0.0,
            initial_loss: None,
            epochs: 0,
            seed,
        },
    }
}

fn goals() -> Vec<Vec<f64>> {
    vec![vec![0.2, 0.1, 0.05], vec![-0.1, 0.25, 0.1], vec![0.05, -0.05, 0.3]]
}

fn cascade() -> CascadeController {
    let g = goals();
    let models = g.iter().enumerate().map(|(k, g)| model(g, k as u64)).collect();
    CascadeController::new(models, g, vec![Gripper::Closed, Gripper::Open, Gripper::Open]).unwrap()
}

/// `x <- x + v dt`, observed exactly.
struct Kinematic {
    x: Vec<f64>,
}

impl Environment for Kinematic {
    fn position(&self) -> &[f64] {
        &self.x
    }

    fn step(&mut self, out: &ControlOutput, _: usize, _: usize) -> subgoal_ds::Result<Vec<f64>> {
        for (x, v) in self.x.iter_mut().zip(&out.velocity) {
            *x += v * 0.01;
        }
        Ok(self.x.clone())
    }

    fn reset_to(&mut self, x: &[f64]) -> Vec<f64> {
        self.x = x.to_vec();
        self.x.clone()
    }

    fn observe(&mut self) -> Vec<f64> {
        self.x.clone()
    }

    fn dt(&self) -> f64 {
        0.01
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[test]
fn far_from_subgoal_tracks() {
    let mut c = cascade();
    let x = [0.5, 0.5, 0.5];
    let out = c.step(&x, 0.0).unwrap();
    assert_eq!(out.clause, Clause::Track);
    assert_eq!(c.active_index(), 0);
    assert_eq!(out.velocity, c.policies()[0].command(&x).unwrap());
    assert_eq!(out.gripper_command, None);
    assert!(!out.segment_completed);
}

#[test]
fn reaching_subgoal_advances() {
    let mut c = cascade();
    let g = goals();
    let x = [g[0][0] + 0.005, g[0][1], g[0][2]];
    let out = c.step(&x, 0.5).unwrap();
    assert_eq!(out.clause, Clause::Advance);
    assert_eq!(c.active_index(), 1);
    assert_eq!(out.active_segment, 1);
    assert_eq!(out.velocity, c.policies()[1].command(&x).unwrap());
    assert_eq!(out.gripper_command, Some(Gripper::Closed));
}

#[test]
fn final_subgoal_holds_last_policy() {
    let mut c = cascade();
    c.resume_at(2);
    let g = goals();
    let x = [g[2][0], g[2][1] - 0.004, g[2][2]];
    let out = c.step(&x, 1.0).unwrap();
    assert_eq!(out.clause, Clause::Hold);
    assert_eq!(c.active_index(), 2);
    let own = c.policies()[2].command(&x).unwrap();
    assert!(norm(&out.velocity) <= norm(&own));
    // never moves past the end
    c.resume_at(10);
    assert_eq!(c.active_index(), 2);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let g = goals();
    let err = CascadeController::new(vec![model(&g[0], 0)], g.clone(), vec![Gripper::Open]);
    assert!(matches!(err, Err(Error::Config(_))));
    let mut c = cascade();
    assert!(matches!(c.step(&[0.0, 0.0], 0.0), Err(Error::DimensionMismatch { .. })));
    assert!(c.step(&[f64::NAN, 0.0, 0.0], 0.0).is_err());
}

proptest! {
    #[test]
    fn exactly_one_clause_fires(k in 0usize..3, j in 0usize..3, r in 0.0f64..0.02, dir in prop::array::uniform3(-1.0f64..1.0)) {
        let c = cascade();
        let g = goals();
        let n = norm(&dir).max(1e-9);
        let x: Vec<f64> = (0..3).map(|i| g[j][i] + r * dir[i] / n).collect();
        let d = norm(&x.iter().zip(&g[k]).map(|(a, b)| a - b).collect::<Vec<_>>());
        let expected = match (d <= DEFAULT_DELTA, k == 2) {
            (false, _) => Clause::Track,
            (true, false) => Clause::Advance,
            (true, true) => Clause::Hold,
        };
        prop_assert_eq!(c.clause(k, &x), expected);

        let mut c = c;
        c.resume_at(k);
        let out = c.step(&x, 0.0).unwrap();
        prop_assert_eq!(out.clause, expected);
        let next = if expected == Clause::Advance { k + 1 } else { k };
        prop_assert_eq!(c.active_index(), next);
        prop_assert_eq!(out.velocity, c.policies()[next].command(&x).unwrap());
    }
}

#[test]
fn cascade_run_switches_monotonically() {
    let mut c = cascade();
    let mut env = Kinematic { x: vec![0.0, 0.0, 0.0] };
    let run = run_to_completion(&mut c, &mut env, 5000).unwrap();
    assert!(run.total_success, "{:?}", run.outcomes);
    assert_eq!(run.resets, 0);
    let active: Vec<usize> = run.trajectory.iter().map(|p| p.active_segment).collect();
    assert!(active.windows(2).all(|w| w[0] <= w[1]));
    let switches = active.windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(switches, 2);
    let end = env.position();
    assert!(norm(&end.iter().zip(&goals()[2]).map(|(a, b)| a - b).collect::<Vec<_>>()) <= DEFAULT_DELTA);
}

#[test]
fn single_segment_run_attains_its_subgoal() {
    let g = vec![0.1, -0.2, 0.3];
    let mut c = CascadeController::new(vec![model(&g, 4)], vec![g.clone()], vec![Gripper::Open]).unwrap();
    let mut env = Kinematic { x: vec![0.4, 0.0, 0.0] };
    let run = run_to_completion(&mut c, &mut env, 5000).unwrap();
    assert!(run.outcomes[0].attained);
    assert!(run.total_success);
}

#[test]
fn control_period_uses_the_flow_command() {
    let mut c = cascade();
    assert_eq!(c.control_period(), None);
    for bad in [0.0, -0.01, f64::NAN, f64::INFINITY] {
        assert!(c.set_control_period(Some(bad)).is_err());
    }
    let x = [0.6, -0.4, 0.5];
    let m = model(&goals()[0], 0);
    assert_eq!(c.step(&x, 0.0).unwrap().velocity, m.command(&x).unwrap());
    c.set_control_period(Some(0.01)).unwrap();
    assert_eq!(c.step(&x, 0.0).unwrap().velocity, m.command_for_period(&x, 0.01).unwrap());
    let mut env = Kinematic { x: x.to_vec() };
    run_to_completion(&mut c, &mut env, 5000).unwrap();
    assert_eq!(c.control_period(), Some(0.01));
}

#[test]
fn zero_horizon_fails_immediately() {
    let mut c = cascade();
    let mut env = Kinematic { x: vec![0.5, 0.5, 0.5] };
    let run = run_to_completion(&mut c, &mut env, 0).unwrap();
    assert!(!run.outcomes[0].attained);
    assert_eq!(run.outcomes[0].steps, 0);
    assert!(!run.total_success);
}

#[test]
fn completion_after_reset_is_not_a_success() {
    // the first policy heads for the wrong place, so subgoal 0 times out
    let g = goals();
    let models = vec![model(&g[2], 0), model(&g[1], 1), model(&g[2], 2)];
    let mut c = CascadeController::new(models, g.clone(), vec![Gripper::Closed, Gripper::Open, Gripper::Open]).unwrap();
    let mut env = Kinematic { x: vec![0.0, 0.0, 0.0] };
    let task = TaskTargets {
        subgoals: g,
        deltas: vec![DEFAULT_DELTA; 3],
        gripper_actions: vec![Gripper::Closed, Gripper::Open, Gripper::Open],
    };
    let opts = RunOptions {
        horizon_per_subgoal: 2000,
        reset_on_timeout: true,
        expected_steps: vec![100; 3],
        record_trajectory: false,
    };
    let run = run_task(&mut c, &mut env, &task, &opts).unwrap();
    assert_eq!(run.resets, 1);
    assert!(!run.outcomes[0].attained && run.outcomes[0].reset);
    assert!(run.outcomes[1].attained && run.outcomes[2].attained);
    assert!(!run.total_success);
}

#[test]
fn one_policy_is_scored_against_every_task_subgoal() {
    let g = goals();
    let mut c = CascadeController::new(vec![model(&g[2], 9)], vec![g[2].clone()], vec![Gripper::Open]).unwrap();
    let mut env = Kinematic { x: vec![0.0, 0.0, 0.0] };
    let task = TaskTargets {
        subgoals: g.clone(),
        deltas: vec![DEFAULT_DELTA; 3],
        gripper_actions: vec![Gripper::Closed, Gripper::Open, Gripper::Open],
    };
    let opts = RunOptions {
        horizon_per_subgoal: 1000,
        reset_on_timeout: true,
        expected_steps: vec![100; 3],
        record_trajectory: false,
    };
    let run = run_task(&mut c, &mut env, &task, &opts).unwrap();
    assert_eq!(run.outcomes.len(), 3);
    assert!(!run.outcomes[0].attained, "a direct path does not pass the first subgoal");
    assert!(!run.total_success);
}

const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

fn z_rotation(angle: f64) -> Quat {
    [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
}

fn close(a: &Quat, b: &Quat, tol: f64) -> bool {
    let same = a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
    let flipped = a.iter().zip(b).all(|(x, y)| (x + y).abs() <= tol);
    same || flipped
}

#[test]
fn slerp_endpoints_and_midpoint() {
    let q1 = z_rotation(std::f64::consts::FRAC_PI_2);
    assert!(close(&slerp(&IDENTITY, &q1, 0.0).unwrap(), &IDENTITY, 1e-12));
    assert!(close(&slerp(&IDENTITY, &q1, 1.0).unwrap(), &q1, 1e-12));
    let half = slerp(&IDENTITY, &q1, 0.5).unwrap();
    let a = 22.5f64.to_radians();
    let expected = [a.cos(), 0.0, 0.0, a.sin()];
    for (x, y) in half.iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12, "{half:?}");
    }
}

#[test]
fn slerp_ignores_the_sign_of_the_target() {
    let q0 = z_rotation(0.3);
    let q1 = [0.5f64.sqrt(), 0.5f64.sqrt(), 0.0, 0.0];
    let neg = q1.map(|c| -c);
    for i in 0..=10 {
        let s = i as f64 / 10.0;
        let a = slerp(&q0, &q1, s).unwrap();
        let b = slerp(&q0, &neg, s).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn slerp_rejects_non_unit_input() {
    let bad = [1.0, 1.0, 0.0, 0.0];
    assert!(matches!(slerp(&bad, &IDENTITY, 0.5), Err(Error::NonUnitQuaternion { .. })));
    assert!(matches!(slerp(&IDENTITY, &bad, 0.5), Err(Error::NonUnitQuaternion { .. })));
}

fn unit_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("nonzero", |q| q.iter().map(|c| c * c).sum::<f64>() > 1e-6)
        .prop_map(|q| {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            q.map(|c| c / n)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn slerp_stays_on_the_unit_sphere(q0 in unit_quat(), q1 in unit_quat(), s in 0.0f64..=1.0) {
        let q = slerp(&q0, &q1, s).unwrap();
        prop_assert!((norm(&q) - 1.0).abs() <= 1e-9);
    }
}
