//! Policy that is globally stable at the origin of its goal frame by
//! construction.
//!
//! A nominal network `N` proposes the velocity `f(x) = N(x) - N(0)`, so the
//! proposal already vanishes at the goal. A Lyapunov candidate
//!
//! ```text
//! u(x) = h(x) - h(0) - grad h(0) . x
//! v(x) = cap * tanh(sigma(u(x)) / cap) + eps * |x|^2
//! ```
//!
//! is built from an input-convex network `h` and a smoothed ReLU `sigma`.
//! Subtracting the tangent plane of `h` at the origin makes `u >= 0` with its
//! minimum at the goal, so `v` is positive definite and has no flat region
//! around the goal. Since `grad u . x >= 0`, `grad v . x >= 2 eps |x|^2` and
//! the goal is the only stationary point. The cap keeps the learned part
//! bounded, so far from the goal the sublevel sets of `v` are nearly round
//! and a small disturbance cannot carry the state up a steep learned wall.
//! Whenever `f` would not decrease `v` at rate `alpha`, the offending
//! component along `grad v` is removed:
//!
//! ```text
//! pi(x) = f(x) - grad v(x) * relu(grad v . f + alpha v) / |grad v|^2
//! ```
//!
//! so `grad v . pi <= -alpha v` holds everywhere except the origin, where
//! the output is exactly zero.

use rand::Rng;

use super::network::{Icnn, Mlp};
use super::{Bound, DifferentiablePolicy};
use crate::autodiff::{smooth_relu, smooth_relu_grad, Tape, Tensor, Var};
use crate::data::GoalFrame;
use crate::error::Result;

/// Inputs closer than this to the goal get an exactly zero velocity.
pub const ORIGIN_RADIUS: f64 = 1e-9;

/// Knee width of the smoothed ReLU applied to `h(x) - h(0)`.
pub const LYAPUNOV_KNEE: f64 = 0.1;
/// Ceiling of the learned part of `v`.
pub const LYAPUNOV_CAP: f64 = 3.0;

/// At this rate `eps |x|^2` alone certifies any field contracting at least
/// as fast as `-x`, so the learned part of `v` can stay small.
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_EPSILON: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCandidate {
    pub icnn: Icnn,
    pub epsilon: f64,
}

impl LyapunovCandidate {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).0
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.value_and_grad(x).1
    }

    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let at = self.icnn.eval(x);
        let origin = self.icnn.eval(&vec![0.0; x.len()]);
        // convexity keeps this nonnegative; the clamp absorbs rounding
        let u = (at.h - origin.h - dot(&origin.grad, x)).max(0.0);
        let t = (smooth_relu(u, LYAPUNOV_KNEE) / LYAPUNOV_CAP).tanh();
        let s = (1.0 - t * t) * smooth_relu_grad(u, LYAPUNOV_KNEE);
        let v = LYAPUNOV_CAP * t + self.epsilon * dot(x, x);
        let grad = at
            .grad
            .iter()
            .zip(&origin.grad)
            .zip(x)
            .map(|((g, g0), xi)| s * (g - g0) + 2.0 * self.epsilon * xi)
            .collect();
        (v, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StablePolicy {
    pub nominal: Mlp,
    pub lyapunov: LyapunovCandidate,
    pub alpha: f64,
    pub frame: GoalFrame,
}

/// Intermediate quantities of one evaluation, all in the goal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StableEval {
    pub nominal: Vec<f64>,
    pub velocity: Vec<f64>,
    pub v: f64,
    pub grad_v: Vec<f64>,
    pub projected: bool,
}

impl StablePolicy {
    pub fn init(
        rng: &mut impl Rng,
        dim: usize,
        hidden: usize,
        alpha: f64,
        epsilon: f64,
        frame: GoalFrame,
    ) -> Self {
        StablePolicy {
            nominal: Mlp::init(rng, dim, hidden),
            lyapunov: LyapunovCandidate {
                icnn: Icnn::init(rng, dim, hidden),
                epsilon,
            },
            alpha,
            frame,
        }
    }

    pub fn dim(&self) -> usize {
        self.nominal.dim()
    }

    /// Nominal proposal `N(x) - N(0)`.
    pub fn nominal_velocity(&self, x: &[f64]) -> Vec<f64> {
        let n0 = self.nominal.forward(&vec![0.0; x.len()]);
        let mut f = self.nominal.forward(x);
        f.iter_mut().zip(n0).for_each(|(f, c)| *f -= c);
        f
    }

    pub fn evaluate(&self, x: &[f64]) -> StableEval {
        let nominal = self.nominal_velocity(x);
        let (v, grad_v) = self.lyapunov.value_and_grad(x);
        let near_origin = x.iter().map(|c| c * c).sum::<f64>().sqrt() <= ORIGIN_RADIUS;
        if near_origin {
            return StableEval {
                velocity: vec![0.0; x.len()],
                nominal,
                v,
                grad_v,
                projected: false,
            };
        }
        let s = dot(&grad_v, &nominal) + self.alpha * v;
        let (velocity, projected) = if s > 0.0 {
            let g2 = dot(&grad_v, &grad_v);
            let k = s / g2;
            (
                nominal.iter().zip(&grad_v).map(|(f, g)| f - k * g).collect(),
                true,
            )
        } else {
            (nominal.clone(), false)
        };
        StableEval {
            nominal,
            velocity,
            v,
            grad_v,
            projected,
        }
    }

    /// Velocity at a goal-frame position.
    pub fn velocity(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x).velocity
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.nominal.params();
        p.extend(self.lyapunov.icnn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.nominal.params_mut();
        p.extend(self.lyapunov.icnn.params_mut());
        p
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

impl DifferentiablePolicy for StablePolicy {
    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.variable(p.clone()))
            .collect();
        let zero = tape.variable(Tensor::zeros(1, self.dim()));
        let h0 = self.lyapunov.icnn.forward_taped(tape, &params[6..], zero)?;
        let g0 = tape.grad(h0, &[zero])?[0];
        let n0 = self.nominal.forward_taped(tape, &params[..6], zero)?;
        Ok(Bound {
            params,
            aux: vec![h0, g0, n0],
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let [rows, dim] = tape.shape(x);
        let (mlp_vars, icnn_vars) = bound.params.split_at(6);
        let [h0, g0, n0] = bound.aux[..] else {
            unreachable!("stable policy binds three derived values")
        };

        let raw = self.nominal.forward_taped(tape, mlp_vars, x)?;
        let neg_n0 = tape.neg(n0);
        let f = tape.add_row(raw, neg_n0)?;

        let h = self.lyapunov.icnn.forward_taped(tape, icnn_vars, x)?;
        let tangent = tape.matmul_t(x, false, g0, true)?;
        let u = tape.sub(h, tangent)?;
        let neg_h0 = tape.neg(h0);
        let u = tape.add_row(u, neg_h0)?;
        let sig = tape.smooth_relu(u, LYAPUNOV_KNEE);
        let sig = tape.scalar_mul(sig, 1.0 / LYAPUNOV_CAP);
        let sig = tape.tanh(sig);
        let sig = tape.scalar_mul(sig, LYAPUNOV_CAP);
        let x2 = tape.square(x);
        let r2 = tape.row_sum(x2);
        let quad = tape.scalar_mul(r2, self.lyapunov.epsilon);
        let v = tape.add(sig, quad)?;

        let total = tape.sum(v);
        let g = tape.grad(total, &[x])?[0];

        let gf = tape.mul(g, f)?;
        let gf = tape.row_sum(gf);
        let av = tape.scalar_mul(v, self.alpha);
        let s = tape.add(gf, av)?;

        // rows at the origin are zeroed; give them a unit denominator
        let xs = tape.value(x);
        let at_origin: Vec<bool> = (0..rows)
            .map(|r| xs.row_slice(r).iter().map(|c| c * c).sum::<f64>().sqrt() <= ORIGIN_RADIUS)
            .collect();
        let any_origin = at_origin.iter().any(|&b| b);

        let g2 = tape.square(g);
        let mut g2 = tape.row_sum(g2);
        if any_origin {
            let pad = tape.constant(Tensor::column(
                &at_origin.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>(),
            ));
            g2 = tape.add(g2, pad)?;
        }
        let active = tape.relu(s);
        let coef = tape.div(active, g2)?;
        let correction = tape.mul_col(g, coef)?;
        let mut pi = tape.sub(f, correction)?;
        if any_origin {
            let keep = tape.constant(Tensor::column(
                &at_origin.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect::<Vec<_>>(),
            ));
            pi = tape.mul_col(pi, keep)?;
        }
        debug_assert_eq!(tape.shape(pi), [rows, dim]);
        Ok(pi)
    }
}
