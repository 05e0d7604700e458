//! Trajectory data model, goal-centred coordinate frames and file I/O.
//!
//! Positions are in meters and timestamps in seconds. A [`Demonstration`] is
//! validated on construction, so every other module can rely on strictly
//! increasing timestamps, a shared dimension and filled-in velocities.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance on the norm of a stored orientation quaternion.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// Binary gripper channel, stored as `0` (open) or `1` (closed) on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Gripper {
    #[default]
    Open,
    Closed,
}

impl Gripper {
    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Gripper::Open),
            1 => Ok(Gripper::Closed),
            other => Err(Error::Validation(format!(
                "gripper flag must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn flag(self) -> u8 {
        match self {
            Gripper::Open => 0,
            Gripper::Closed => 1,
        }
    }
}

impl Serialize for Gripper {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.flag())
    }
}

impl<'de> Deserialize<'de> for Gripper {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flag = u8::deserialize(d)?;
        Gripper::from_flag(flag).map_err(serde::de::Error::custom)
    }
}

/// Instantaneous robot state: end-effector position, optional orientation and
/// the gripper flag.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub x: Vec<f64>,
    pub q: Option<[f64; 4]>,
    pub gripper: Gripper,
}

/// One recorded sample of a demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Vec<f64>,
    pub gripper: Gripper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
}

impl Sample {
    pub fn state(&self) -> State {
        State {
            x: self.x.clone(),
            q: self.q,
            gripper: self.gripper,
        }
    }
}

/// A timed expert recording. Immutable once validated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Demonstration {
    dim: usize,
    samples: Vec<Sample>,
}

#[derive(Deserialize)]
struct RawSample {
    t: f64,
    x: Vec<f64>,
    #[serde(default)]
    xdot: Option<Vec<f64>>,
    gripper: Gripper,
    #[serde(default)]
    q: Option<[f64; 4]>,
}

#[derive(Deserialize)]
struct RawDemonstration {
    dim: usize,
    samples: Vec<RawSample>,
}

impl<'de> Deserialize<'de> for Demonstration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDemonstration::deserialize(d)?;
        Demonstration::from_raw(raw).map_err(serde::de::Error::custom)
    }
}

/// A sample whose velocity may still be unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Option<Vec<f64>>,
    pub gripper: Gripper,
    pub q: Option<[f64; 4]>,
}

impl Demonstration {
    /// Validates fully specified samples.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let partial = samples
            .into_iter()
            .map(|s| PartialSample {
                t: s.t,
                x: s.x,
                xdot: Some(s.xdot),
                gripper: s.gripper,
                q: s.q,
            })
            .collect();
        Self::from_partial(partial)
    }

    /// Validates samples and fills missing velocities by finite differences
    /// of positions over the recorded timestamps (central in the interior,
    /// one-sided at the ends).
    pub fn from_partial(samples: Vec<PartialSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].x.len();
        if dim == 0 {
            return Err(Error::Validation("position dimension must be >= 1".into()));
        }
        for (n, s) in samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::Validation(format!(
                    "sample {n}: position has dimension {}, expected {dim}",
                    s.x.len()
                )));
            }
            if let Some(v) = &s.xdot {
                if v.len() != dim {
                    return Err(Error::Validation(format!(
                        "sample {n}: velocity has dimension {}, expected {dim}",
                        v.len()
                    )));
                }
            }
            if !s.t.is_finite() || s.x.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!("sample {n}: non-finite value")));
            }
            if n > 0 && s.t <= samples[n - 1].t {
                return Err(Error::Validation(format!(
                    "timestamps must be strictly increasing (sample {n}: {} <= {})",
                    s.t,
                    samples[n - 1].t
                )));
            }
            if let Some(q) = s.q {
                let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > QUAT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "sample {n}: quaternion norm {norm} is not 1"
                    )));
                }
            }
        }

        let n = samples.len();
        let mut filled = Vec::with_capacity(n);
        for i in 0..n {
            let xdot = match &samples[i].xdot {
                Some(v) => v.clone(),
                None => {
                    let (a, b) = match i {
                        0 => (0, 1),
                        _ if i == n - 1 => (n - 2, n - 1),
                        _ => (i - 1, i + 1),
                    };
                    let dt = samples[b].t - samples[a].t;
                    (0..dim)
                        .map(|k| (samples[b].x[k] - samples[a].x[k]) / dt)
                        .collect()
                }
            };
            filled.push(xdot);
        }

        let samples = samples
            .into_iter()
            .zip(filled)
            .map(|(s, xdot)| Sample {
                t: s.t,
                x: s.x,
                xdot,
                gripper: s.gripper,
                q: s.q,
            })
            .collect();
        Ok(Demonstration { dim, samples })
    }

    fn from_raw(raw: RawDemonstration) -> Result<Self> {
        let samples: Vec<PartialSample> = raw
            .samples
            .into_iter()
            .map(|s| PartialSample {
                t: s.t,
                x: s.x,
                xdot: s.xdot,
                gripper: s.gripper,
                q: s.q,
            })
            .collect();
        let demo = Self::from_partial(samples)?;
        if demo.dim != raw.dim {
            return Err(Error::Validation(format!(
                "header declares dim {} but samples have dimension {}",
                raw.dim, demo.dim
            )));
        }
        Ok(demo)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false for a validated demonstration; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, n: usize) -> &Sample {
        &self.samples[n]
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn positions(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(|s| s.x.as_slice())
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn duration(&self) -> f64 {
        self.last().t - self.first().t
    }

    /// Median spacing between consecutive timestamps.
    pub fn median_dt(&self) -> f64 {
        let mut dts: Vec<f64> = self.samples.windows(2).map(|w| w[1].t - w[0].t).collect();
        dts.sort_by(f64::total_cmp);
        let m = dts.len();
        if m % 2 == 1 {
            dts[m / 2]
        } else {
            0.5 * (dts[m / 2 - 1] + dts[m / 2])
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| norm(&s.xdot))
            .fold(0.0, f64::max)
    }

    pub fn path_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| distance(&w[0].x, &w[1].x))
            .sum()
    }

    /// Per-axis `(min, max)` over all positions.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let mut bb = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for s in &self.samples {
            for (b, &c) in bb.iter_mut().zip(&s.x) {
                b.0 = b.0.min(c);
                b.1 = b.1.max(c);
            }
        }
        bb
    }

    /// Largest per-axis extent of the bounding box.
    pub fn max_extent(&self) -> f64 {
        self.bounding_box()
            .iter()
            .map(|(lo, hi)| hi - lo)
            .fold(0.0, f64::max)
    }

    /// Contiguous sub-range `[start, end]` (inclusive) as a new demonstration.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if end <= start || end >= self.samples.len() {
            return Err(Error::Validation(format!(
                "invalid slice [{start}, {end}] of {} samples",
                self.samples.len()
            )));
        }
        Ok(Demonstration {
            dim: self.dim,
            samples: self.samples[start..=end].to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("demonstration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Validation errors surface through serde as custom messages; keep the
        // position information either way.
        serde_json::from_str(text).map_err(Error::from_json)
    }

    /// CSV with header `t,x0..,xdot0..,gripper,qw,qx,qy,qz`. Missing
    /// quaternions are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = csv_header(self.dim);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&csv_row(s));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_header(dim: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..dim).map(|k| format!("x{k}")));
    cols.extend((0..dim).map(|k| format!("xdot{k}")));
    cols.extend(["gripper", "qw", "qx", "qy", "qz"].map(String::from));
    cols.join(",")
}

pub(crate) fn csv_row(s: &Sample) -> String {
    let mut row = String::new();
    write!(row, "{}", s.t).unwrap();
    for c in s.x.iter().chain(&s.xdot) {
        write!(row, ",{c}").unwrap();
    }
    write!(row, ",{}", s.gripper.flag()).unwrap();
    match s.q {
        Some(q) => {
            for c in q {
                write!(row, ",{c}").unwrap();
            }
        }
        None => row.push_str(",,,,"),
    }
    row
}

pub fn load_demonstration(path: impl AsRef<Path>) -> Result<Demonstration> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Demonstration::from_json(&text)
}

pub fn save_demonstration(demo: &Demonstration, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, demo.to_json()).map_err(|e| Error::io(path, e))
}

/// Affine map that sends a segment's subgoal to the origin and rescales
/// isotropically so the segment's bounding box has unit maximum extent.
///
/// Points map as `(p - goal) * scale`; velocities as `v * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFrame {
    pub goal: Vec<f64>,
    pub scale: Vec<f64>,
}

impl GoalFrame {
    pub fn identity(dim: usize) -> Self {
        GoalFrame {
            goal: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn new(goal: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(goal.len(), scale.len())?;
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("goal frame scale must be positive".into()));
        }
        Ok(GoalFrame { goal, scale })
    }

    pub fn dim(&self) -> usize {
        self.goal.len()
    }

    pub fn point_to_frame(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), p.len())?;
        Ok(p.iter()
            .zip(&self.goal)
            .zip(&self.scale)
            .map(|((p, g), s)| (p - g) * s)
            .collect())
    }

    pub fn point_to_world(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), p.len())?;
        Ok(p.iter()
            .zip(&self.goal)
            .zip(&self.scale)
            .map(|((p, g), s)| p / s + g)
            .collect())
    }

    pub fn velocity_to_frame(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.scale).map(|(v, s)| v * s).collect())
    }

    pub fn velocity_to_world(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.scale).map(|(v, s)| v / s).collect())
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Re-expresses a segment in the goal-centred frame of `goal`.
pub fn to_goal_frame(segment: &Demonstration, goal: &[f64]) -> Result<(Demonstration, GoalFrame)> {
    check_dim(segment.dim(), goal.len())?;
    let extent = segment.max_extent();
    if !(extent > 0.0) {
        return Err(Error::DegenerateSegment(format!(
            "all {} positions coincide",
            segment.len()
        )));
    }
    let frame = GoalFrame::new(goal.to_vec(), vec![1.0 / extent; goal.len()])?;
    let samples = segment
        .samples()
        .iter()
        .map(|s| {
            Ok(Sample {
                t: s.t,
                x: frame.point_to_frame(&s.x)?,
                xdot: frame.velocity_to_frame(&s.xdot)?,
                gripper: s.gripper,
                q: s.q,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Demonstration {
            dim: segment.dim(),
            samples,
        },
        frame,
    ))
}

/// Maps a goal-frame point back to world coordinates.
pub fn from_goal_frame(point: &[f64], frame: &GoalFrame) -> Result<Vec<f64>> {
    frame.point_to_world(point)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn partial(t: f64, x: Vec<f64>, gripper: u8) -> PartialSample {
        PartialSample {
            t,
            x,
            xdot: None,
            gripper: Gripper::from_flag(gripper).unwrap(),
            q: None,
        }
    }

    #[test]
    fn two_sample_velocity_is_two_point_difference() {
        let d = Demonstration::from_partial(vec![
            partial(0.0, vec![0.0, 1.0], 0),
            partial(0.5, vec![1.0, 0.0], 0),
        ])
        .unwrap();
        for s in d.samples() {
            assert_eq!(s.xdot, vec![2.0, -2.0]);
        }
    }

    #[test]
    fn sine_velocities_match_analytic_derivative() {
        // endpoints at zero curvature so one-sided differences stay accurate
        let dt = std::f64::consts::TAU / 99.0;
        let samples = (0..100)
            .map(|n| {
                let t = n as f64 * dt;
                partial(t, vec![t.sin(), (2.0 * t).sin()], 0)
            })
            .collect();
        let d = Demonstration::from_partial(samples).unwrap();
        for s in d.samples() {
            let exact = [s.t.cos(), 2.0 * (2.0 * s.t).cos()];
            for k in 0..2 {
                assert!((s.xdot[k] - exact[k]).abs() < 1e-2, "t={} k={k}", s.t);
            }
        }
    }

    #[test]
    fn rejects_non_monotone_time() {
        let err = Demonstration::from_partial(vec![
            partial(0.0, vec![0.0], 0),
            partial(0.0, vec![1.0], 0),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let err = Demonstration::from_partial(vec![
            partial(0.0, vec![0.0], 0),
            partial(1.0, vec![1.0, 2.0], 0),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\n \"dim\": 1,\n \"samples\": [ oops ]\n}";
        match Demonstration::from_json(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn header_dim_must_match() {
        let text = r#"{"dim": 2, "samples": [
            {"t": 0, "x": [0], "gripper": 0},
            {"t": 1, "x": [1], "gripper": 0}]}"#;
        assert!(Demonstration::from_json(text).is_err());
    }

    #[test]
    fn goal_maps_to_origin_and_extent_is_one() {
        let d = Demonstration::from_partial(vec![
            partial(0.0, vec![0.0, 0.0], 0),
            partial(1.0, vec![1.0, 0.3], 0),
            partial(2.0, vec![2.0, 0.5], 0),
        ])
        .unwrap();
        let goal = d.last().x.clone();
        let (f, frame) = to_goal_frame(&d, &goal).unwrap();
        assert_eq!(f.last().x, vec![0.0, 0.0]);
        let bb = f.bounding_box();
        assert!((bb[0].1 - bb[0].0 - 1.0).abs() < 1e-15);
        assert_eq!(from_goal_frame(&[0.0, 0.0], &frame).unwrap(), goal);
    }

    #[test]
    fn degenerate_segment_is_rejected() {
        let d = Demonstration::from_partial(vec![
            partial(0.0, vec![1.0, 1.0], 0),
            partial(1.0, vec![1.0, 1.0], 0),
        ])
        .unwrap();
        assert!(matches!(
            to_goal_frame(&d, &[1.0, 1.0]),
            Err(Error::DegenerateSegment(_))
        ));
    }

    #[test]
    fn frame_round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = GoalFrame::new(vec![0.3, -0.2, 0.05], vec![2.7; 3]).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let back = frame
                .point_to_world(&frame.point_to_frame(&p).unwrap())
                .unwrap();
            let v = frame
                .velocity_to_world(&frame.velocity_to_frame(&p).unwrap())
                .unwrap();
            worst = worst.max(distance(&p, &back)).max(distance(&p, &v));
        }
        assert!(worst <= 1e-12, "worst round trip {worst}");
    }

    #[test]
    fn identity_frame_is_identity() {
        let frame = GoalFrame::identity(3);
        let p = [0.1, 0.2, 0.3];
        assert_eq!(frame.point_to_world(&p).unwrap(), p.to_vec());
        assert_eq!(frame.point_to_frame(&p).unwrap(), p.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let frame = GoalFrame::identity(3);
        assert!(matches!(
            from_goal_frame(&[0.0, 0.0], &frame),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn csv_has_expected_header() {
        let d = Demonstration::from_partial(vec![
            partial(0.0, vec![0.0, 0.0], 0),
            partial(1.0, vec![1.0, 1.0], 1),
        ])
        .unwrap();
        let csv = d.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x0,x1,xdot0,xdot1,gripper,qw,qx,qy,qz"
        );
        assert_eq!(lines.next().unwrap(), "0,0,0,1,1,0,,,,");
    }
}
