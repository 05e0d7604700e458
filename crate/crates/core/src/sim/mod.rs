//! Kinematic point-mass simulator and Monte-Carlo evaluation of cascades.

mod env;
mod eval;
mod synthetic;

pub use env::{env_step, observe, random_kick, Perturbation, PointMass, SimConfig};
pub use eval::{
    evaluate, rollout_seed, simulate, table_csv, Condition, EvalReport, Rate, RunLog, SeedModels,
    TaskSpec,
};
pub use synthetic::{
    make_synthetic_task, synthetic_task, PathSegment, SyntheticKind, SyntheticOptions,
    SyntheticTask, DEMO_DT,
};
