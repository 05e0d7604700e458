#![allow(dead_code)]

use rand::Rng;
use subgoal_ds::autodiff::{Tape, Tensor, Var};
use subgoal_ds::Result;

pub const FD_STEP: f64 = 1e-5;

/// Largest entrywise gap between `a` and `b`, relative to the larger of the
/// two infinity norms.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Reverse-mode gradients of the scalar built by `f` with respect to each
/// input, next to their central-difference estimates.
pub fn gradients_vs_fd<F>(inputs: &[Tensor], f: F) -> Vec<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };

    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let analytic = grads.get_or_zeros(vars[i], t.shape()).into_data();
            let numeric = (0..t.len())
                .map(|k| {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[k] += FD_STEP;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[k] -= FD_STEP;
                    (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
                })
                .collect();
            (analytic, numeric)
        })
        .collect()
}

/// Worst relative error over all inputs of `f`.
pub fn fd_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradients_vs_fd(inputs, f)
        .iter()
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Reduces a node of any shape to a scalar through fixed random weights, so
/// every output entry contributes a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let [r, c] = tape.shape(v);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, r, c, -1.0, 1.0));
    tape.dot(v, w)
}

/// Moves entries away from the points where a piecewise op has a kink.
pub fn avoid_kinks(t: &Tensor, kinks: &[f64], margin: f64) -> Tensor {
    t.map(|x| {
        let mut x = x;
        for &k in kinks {
            if (x - k).abs() < margin {
                x = k + margin.copysign(x - k);
            }
        }
        x
    })
}
