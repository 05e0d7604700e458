//! Minimal waypoint selection within a segment.
//!
//! A waypoint set is feasible when the piecewise-linear, time-parameterised
//! reconstruction through it stays within `eta` (maximum Euclidean deviation)
//! of every recorded sample. [`select_waypoints_dp`] returns a feasible set of
//! minimum cardinality as a shortest path over the DAG of feasible chords.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{distance, Demonstration, Sample};
use crate::error::{Error, Result};
use crate::segment::{SegmentEntry, SegmentsFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointSet {
    /// Sample indices into the segment; first is 0, last is the subgoal.
    pub indices: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub eta: f64,
    pub achieved_error: f64,
}

impl WaypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn lerp_point(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + s * (b - a)).collect()
}

/// Max deviation of samples `i..=j` from the chord `i -> j`, with the chord
/// parameterised by normalised time.
fn chord_error(samples: &[Sample], i: usize, j: usize) -> f64 {
    let (a, b) = (&samples[i], &samples[j]);
    let span = b.t - a.t;
    samples[i + 1..j]
        .iter()
        .map(|s| distance(&s.x, &lerp_point(&a.x, &b.x, (s.t - a.t) / span)))
        .fold(0.0, f64::max)
}

/// Maximum distance between each sample and its time-corresponding point on
/// the interpolation through `indices`.
pub fn reconstruction_error(segment: &Demonstration, indices: &[usize]) -> Result<f64> {
    let last = segment.len() - 1;
    if indices.first() != Some(&0) || indices.last() != Some(&last) {
        return Err(Error::Waypoint(format!(
            "indices must start at 0 and end at {last}"
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Waypoint("indices must be strictly increasing".into()));
    }
    let samples = segment.samples();
    Ok(indices
        .windows(2)
        .map(|w| chord_error(samples, w[0], w[1]))
        .fold(0.0, f64::max))
}

/// Fewest waypoints whose reconstruction error is at most `eta`. Among
/// minimum sets the lexicographically smallest index sequence is returned.
pub fn select_waypoints_dp(segment: &Demonstration, eta: f64) -> Result<WaypointSet> {
    if !(eta > 0.0) {
        return Err(Error::Waypoint(format!("eta must be positive, got {eta}")));
    }
    let samples = segment.samples();
    let n = samples.len();

    // feasible[i][j - i - 1] for j > i
    let feasible: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (i + 1..n)
                .map(|j| chord_error(samples, i, j) <= eta)
                .collect()
        })
        .collect();
    let edge = |i: usize, j: usize| feasible[i][j - i - 1];

    // hops[i]: fewest chords from i to the final sample
    let mut hops = vec![usize::MAX; n];
    hops[n - 1] = 0;
    for i in (0..n - 1).rev() {
        hops[i] = (i + 1..n)
            .filter(|&j| edge(i, j) && hops[j] != usize::MAX)
            .map(|j| hops[j] + 1)
            .min()
            .expect("adjacent samples are always feasible");
    }

    let mut indices = vec![0];
    let mut i = 0;
    while i != n - 1 {
        i = (i + 1..n)
            .find(|&j| edge(i, j) && hops[j] + 1 == hops[i])
            .expect("shortest path exists");
        indices.push(i);
    }

    let achieved_error = reconstruction_error(segment, &indices)?;
    Ok(WaypointSet {
        points: indices.iter().map(|&k| samples[k].x.clone()).collect(),
        times: indices.iter().map(|&k| samples[k].t).collect(),
        indices,
        eta,
        achieved_error,
    })
}

/// Evaluates the waypoint interpolation at `timestamps`. Velocities are the
/// chord slope of the enclosing interval; the gripper flag and orientation
/// come from the nearest sample of `segment`.
pub fn reconstruct(
    waypoints: &WaypointSet,
    segment: &Demonstration,
    timestamps: &[f64],
) -> Result<Demonstration> {
    if waypoints.is_empty() {
        return Err(Error::Waypoint("empty waypoint set".into()));
    }
    let (t0, t1) = (segment.first().t, segment.last().t);
    let times = &waypoints.times;
    let pts = &waypoints.points;
    let mut out = Vec::with_capacity(timestamps.len());
    for &t in timestamps {
        if t < t0 || t > t1 {
            return Err(Error::Waypoint(format!(
                "timestamp {t} outside segment range [{t0}, {t1}]"
            )));
        }
        let (x, xdot) = if pts.len() == 1 {
            (pts[0].clone(), vec![0.0; segment.dim()])
        } else {
            // interval k covers [times[k], times[k+1]); the last one is closed
            let k = times[1..times.len() - 1]
                .partition_point(|&tw| tw <= t)
                .min(times.len() - 2);
            let span = times[k + 1] - times[k];
            let s = (t - times[k]) / span;
            let x = if t == times[k] {
                pts[k].clone()
            } else if t == times[k + 1] {
                pts[k + 1].clone()
            } else {
                lerp_point(&pts[k], &pts[k + 1], s)
            };
            let v = pts[k]
                .iter()
                .zip(&pts[k + 1])
                .map(|(a, b)| (b - a) / span)
                .collect();
            (x, v)
        };
        let nearest = nearest_sample(segment, t);
        out.push(Sample {
            t,
            x,
            xdot,
            gripper: nearest.gripper,
            q: nearest.q,
        });
    }
    Demonstration::new(out)
}

fn nearest_sample(segment: &Demonstration, t: f64) -> &Sample {
    let samples = segment.samples();
    let p = samples.partition_point(|s| s.t < t);
    match p {
        0 => &samples[0],
        _ if p == samples.len() => &samples[p - 1],
        _ if t - samples[p - 1].t <= samples[p].t - t => &samples[p - 1],
        _ => &samples[p],
    }
}

/// The training set for a segment: the waypoint reconstruction sampled at the
/// segment's own timestamps.
pub fn filtered_segment(segment: &Demonstration, waypoints: &WaypointSet) -> Result<Demonstration> {
    reconstruct(waypoints, segment, &segment.timestamps())
}

/// One entry of `waypoints.json`: a segment with its selected waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointEntry {
    #[serde(flatten)]
    pub segment: SegmentEntry,
    #[serde(flatten)]
    pub waypoints: WaypointSet,
}

/// Contents of `waypoints.json`, which doubles as the task description for
/// rollouts and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointsFile {
    pub dim: usize,
    pub eta: f64,
    pub segments: Vec<WaypointEntry>,
}

impl WaypointsFile {
    /// Selects waypoints for every segment at tolerance `eta`.
    pub fn select(segments: SegmentsFile, eta: f64) -> Result<Self> {
        let entries = segments
            .segments
            .into_iter()
            .map(|e| {
                let waypoints = select_waypoints_dp(&e.demo, eta)?;
                Ok(WaypointEntry {
                    segment: e,
                    waypoints,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WaypointsFile {
            dim: segments.dim,
            eta,
            segments: entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WaypointsFile = serde_json::from_str(&text).map_err(Error::from_json)?;
        if file.segments.is_empty() {
            return Err(Error::Waypoint("waypoints file has no segments".into()));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("waypoints serialize")
    }

    pub fn total_waypoints(&self) -> usize {
        self.segments.iter().map(|e| e.waypoints.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Gripper, PartialSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn demo(points: &[Vec<f64>]) -> Demonstration {
        Demonstration::from_partial(
            points
                .iter()
                .enumerate()
                .map(|(n, x)| PartialSample {
                    t: n as f64,
                    x: x.clone(),
                    xdot: None,
                    gripper: Gripper::Open,
                    q: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn straight_line_needs_two_waypoints() {
        let pts: Vec<Vec<f64>> = (0..20).map(|n| vec![n as f64 * 0.1, 0.5 * n as f64]).collect();
        let d = demo(&pts);
        assert!(reconstruction_error(&d, &[0, 19]).unwrap() < 1e-15);
        let w = select_waypoints_dp(&d, 1e-6).unwrap();
        assert_eq!(w.indices, vec![0, 19]);
        assert!(w.achieved_error < 1e-15);
    }

    #[test]
    fn right_angle_apex_error() {
        let d = demo(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]]);
        // chord midpoint is (1, 0); apex is (1, 1)
        assert_eq!(reconstruction_error(&d, &[0, 2]).unwrap(), 1.0);
        assert_eq!(reconstruction_error(&d, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn missing_endpoint_is_error() {
        let d = demo(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert!(reconstruction_error(&d, &[0, 1]).is_err());
        assert!(reconstruction_error(&d, &[1, 2]).is_err());
    }

    #[test]
    fn reconstruct_hits_waypoints_and_midpoints() {
        let d = demo(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0], vec![3.0, 0.0]]);
        let w = select_waypoints_dp(&d, 0.01).unwrap();
        let r = reconstruct(&w, &d, &w.times).unwrap();
        for (s, p) in r.samples().iter().zip(&w.points) {
            assert_eq!(&s.x, p);
        }
        let two = WaypointSet {
            indices: vec![0, 3],
            points: vec![vec![0.0, 0.0], vec![3.0, 0.0]],
            times: vec![0.0, 3.0],
            eta: 1.0,
            achieved_error: 1.0,
        };
        let r = reconstruct(&two, &d, &[1.5, 3.0]).unwrap();
        assert_eq!(r.sample(0).x, vec![1.5, 0.0]);
        assert_eq!(r.sample(0).xdot, vec![1.0, 0.0]);
    }

    #[test]
    fn reconstruct_deviation_equals_achieved_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|n| {
                let t = n as f64 * 0.1;
                vec![t.cos() + rng.gen_range(-0.01..0.01), (2.0 * t).sin()]
            })
            .collect();
        let d = demo(&pts);
        let w = select_waypoints_dp(&d, 0.05).unwrap();
        let r = filtered_segment(&d, &w).unwrap();
        let dev = d
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| distance(&a.x, &b.x))
            .fold(0.0, f64::max);
        assert!((dev - w.achieved_error).abs() < 1e-12);
        assert!(w.achieved_error <= 0.05);
    }

    #[test]
    fn subgoal_is_kept_bit_exact() {
        let pts: Vec<Vec<f64>> = (0..15)
            .map(|n| vec![(n as f64 * 0.37).sin() * 0.1 + 0.123456789, n as f64 * 0.01])
            .collect();
        let d = demo(&pts);
        let w = select_waypoints_dp(&d, 0.02).unwrap();
        assert_eq!(w.points.last().unwrap(), &d.last().x);
        assert_eq!(*w.indices.last().unwrap(), 14);
    }

    #[test]
    fn rejects_nonpositive_eta() {
        let d = demo(&[vec![0.0], vec![1.0]]);
        assert!(select_waypoints_dp(&d, 0.0).is_err());
    }

    #[test]
    fn empty_set_cannot_reconstruct() {
        let d = demo(&[vec![0.0], vec![1.0]]);
        let w = WaypointSet {
            indices: vec![],
            points: vec![],
            times: vec![],
            eta: 0.1,
            achieved_error: 0.0,
        };
        assert!(reconstruct(&w, &d, &[0.0, 0.5]).is_err());
    }
}
