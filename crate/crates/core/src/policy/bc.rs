use rand::Rng;

use super::network::Mlp;
use super::{Bound, DifferentiablePolicy};
use crate::autodiff::{Tape, Var};
use crate::data::GoalFrame;
use crate::error::Result;

/// Plain regression baseline: the MLP output is the velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct BcPolicy {
    pub net: Mlp,
    pub frame: GoalFrame,
}

impl BcPolicy {
    pub fn init(rng: &mut impl Rng, dim: usize, hidden: usize, frame: GoalFrame) -> Self {
        BcPolicy {
            net: Mlp::init(rng, dim, hidden),
            frame,
        }
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }
}

pub fn bc_forward(policy: &BcPolicy, x: &[f64]) -> Vec<f64> {
    policy.net.forward(x)
}

impl DifferentiablePolicy for BcPolicy {
    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        Ok(Bound {
            params: self
                .net
                .params()
                .into_iter()
                .map(|p| tape.variable(p.clone()))
                .collect(),
            aux: vec![],
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.net.forward_taped(tape, &bound.params, x)
    }
}
