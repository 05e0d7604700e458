//! Desk-scale single demonstrations with two gripper events.
//!
//! Each task is approach, transport and retreat: three cubic Bezier paths
//! traversed with minimum-jerk timing. The gripper closes on arrival at the
//! grasp point and opens at the release point. Arrivals and departures at
//! both points are vertical.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::Quat;
use crate::data::{Demonstration, Gripper, PartialSample};
use crate::error::{Error, Result};

/// Sample spacing of the generated recordings, seconds.
pub const DEMO_DT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyntheticKind {
    #[serde(rename = "pick-place-3seg")]
    PickPlace,
    #[serde(rename = "s-curve")]
    SCurve,
    #[serde(rename = "square-nut-like")]
    SquareNut,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [
        SyntheticKind::PickPlace,
        SyntheticKind::SCurve,
        SyntheticKind::SquareNut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::PickPlace => "pick-place-3seg",
            SyntheticKind::SCurve => "s-curve",
            SyntheticKind::SquareNut => "square-nut-like",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub seed: u64,
    /// Half-width of the uniform jitter applied to the key points, meters.
    pub jitter: f64,
    /// Std of Gaussian noise added to recorded positions. Velocities are then
    /// re-estimated from the noisy positions.
    pub recording_noise: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            seed: 0,
            jitter: 0.01,
            recording_noise: 0.0,
        }
    }
}

type P3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    pub control: [P3; 4],
    pub duration: f64,
}

impl PathSegment {
    fn intervals(&self) -> usize {
        (self.duration / DEMO_DT).round() as usize
    }

    /// Position and velocity at normalised time `tau` in `[0, 1]`.
    fn eval(&self, tau: f64) -> (P3, P3) {
        let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let ds = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / self.duration;
        let [p0, p1, p2, p3] = self.control;
        let u = 1.0 - s;
        let mut x = [0.0; 3];
        let mut v = [0.0; 3];
        for i in 0..3 {
            x[i] = u * u * u * p0[i] + 3.0 * u * u * s * p1[i] + 3.0 * u * s * s * p2[i]
                + s * s * s * p3[i];
            let dp = 3.0 * u * u * (p1[i] - p0[i])
                + 6.0 * u * s * (p2[i] - p1[i])
                + 3.0 * s * s * (p3[i] - p2[i]);
            v[i] = dp * ds;
        }
        (x, v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: SyntheticKind,
    pub demo: Demonstration,
    pub paths: Vec<PathSegment>,
    /// Grasp, release and final sample indices.
    pub event_indices: Vec<usize>,
    /// Grasp, release and park points.
    pub key_points: Vec<Vec<f64>>,
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn up(a: P3, h: f64) -> P3 {
    add(a, [0.0, 0.0, h])
}

fn yaw(angle: f64) -> Quat {
    [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]
}

fn layout(kind: SyntheticKind, rng: &mut ChaCha8Rng, jitter: f64) -> Vec<PathSegment> {
    let mut j = |p: P3| -> P3 {
        if jitter == 0.0 {
            return p;
        }
        let mut d = [0.0; 3];
        d.iter_mut().for_each(|c| *c = rng.gen_range(-jitter..=jitter));
        add(p, d)
    };
    let home = [0.0, 0.0, 0.30];
    match kind {
        SyntheticKind::PickPlace => {
            let a = j([0.20, 0.10, 0.05]);
            let b = j([-0.10, 0.25, 0.08]);
            let park = j([0.05, -0.10, 0.25]);
            vec![
                PathSegment {
                    control: [home, add(home, [0.10, 0.05, 0.0]), up(a, 0.15), a],
                    duration: 2.5,
                },
                PathSegment {
                    control: [a, up(a, 0.20), up(b, 0.20), b],
                    duration: 3.0,
                },
                PathSegment {
                    control: [b, up(b, 0.15), add(park, [-0.05, 0.0, 0.05]), park],
                    duration: 2.0,
                },
            ]
        }
        SyntheticKind::SCurve => {
            let a = j([0.15, -0.15, 0.05]);
            let b = j([-0.15, 0.20, 0.05]);
            let park = j([0.0, 0.10, 0.28]);
            vec![
                PathSegment {
                    control: [home, add(home, [0.05, -0.10, 0.0]), up(a, 0.12), a],
                    duration: 2.5,
                },
                PathSegment {
                    control: [a, add(a, [0.0, 0.30, 0.18]), add(b, [0.0, -0.30, 0.18]), b],
                    duration: 3.5,
                },
                PathSegment {
                    control: [b, up(b, 0.12), add(park, [0.05, 0.0, 0.0]), park],
                    duration: 2.0,
                },
            ]
        }
        SyntheticKind::SquareNut => {
            let a = j([0.10, 0.20, 0.03]);
            let b = j([-0.15, -0.10, 0.12]);
            let park = j([-0.05, -0.05, 0.35]);
            vec![
                PathSegment {
                    control: [home, add(home, [0.05, 0.10, 0.0]), up(a, 0.15), a],
                    duration: 2.5,
                },
                PathSegment {
                    control: [a, up(a, 0.25), up(b, 0.20), b],
                    duration: 3.5,
                },
                PathSegment {
                    control: [b, up(b, 0.10), add(park, [-0.05, -0.02, -0.02]), park],
                    duration: 1.5,
                },
            ]
        }
    }
}

/// Full description of a generated task, including the analytic event points.
pub fn synthetic_task(kind: SyntheticKind, opts: &SyntheticOptions) -> Result<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let paths = layout(kind, &mut rng, opts.jitter);
    let noisy = opts.recording_noise > 0.0;

    let mut samples = Vec::new();
    let mut event_indices = Vec::new();
    let mut t0 = 0.0;
    for (k, path) in paths.iter().enumerate() {
        let n = path.intervals();
        let first = if k == 0 { 0 } else { 1 };
        for i in first..=n {
            let tau = i as f64 / n as f64;
            let (mut x, v) = path.eval(tau);
            if i == n {
                x = path.control[3];
            }
            // gripper closes on the grasp sample and opens on the release
            // sample; orientation turns a quarter turn during transport
            let index = samples.len();
            let gripper = if k == 1 || (k == 0 && i == n) {
                Gripper::Closed
            } else {
                Gripper::Open
            };
            let gripper = if k == 1 && i == n { Gripper::Open } else { gripper };
            let angle = match k {
                0 => 0.0,
                1 => std::f64::consts::FRAC_PI_2 * tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau),
                _ => std::f64::consts::FRAC_PI_2,
            };
            samples.push(PartialSample {
                t: t0 + i as f64 * DEMO_DT,
                x: x.to_vec(),
                xdot: (!noisy).then(|| v.to_vec()),
                gripper,
                q: Some(yaw(angle)),
            });
            if i == n {
                event_indices.push(index);
            }
        }
        t0 += n as f64 * DEMO_DT;
    }

    if noisy {
        for s in &mut samples {
            for c in &mut s.x {
                let n: f64 = StandardNormal.sample(&mut rng);
                *c += opts.recording_noise * n;
            }
        }
    }
    let key_points = paths.iter().map(|p| p.control[3].to_vec()).collect();
    Ok(SyntheticTask {
        kind,
        demo: Demonstration::from_partial(samples)?,
        paths,
        event_indices,
        key_points,
    })
}

/// One demonstration of the given task with default options and `seed`.
pub fn make_synthetic_task(kind: SyntheticKind, seed: u64) -> Demonstration {
    synthetic_task(
        kind,
        &SyntheticOptions {
            seed,
            ..Default::default()
        },
    )
    .expect("generated demonstrations are valid")
    .demo
}
