//! Splitting a demonstration into sub-demos at gripper open/close events.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Demonstration, Gripper};
use crate::error::{Error, Result};

/// Transitions closer than this many samples are merged into one event.
pub const DEFAULT_DEBOUNCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    /// Minimum spacing between two distinct events; `1` disables merging.
    pub debounce: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            debounce: DEFAULT_DEBOUNCE,
        }
    }
}

/// K sub-demos, their subgoals and the event indices into the parent.
///
/// Segment `k` spans parent samples `event_indices[k-1] ..= event_indices[k]`
/// (with an implicit `0` before the first), so boundary samples are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedDemo {
    pub segments: Vec<Demonstration>,
    pub subgoals: Vec<Vec<f64>>,
    pub event_indices: Vec<usize>,
    /// Gripper state to command when subgoal `k` is reached.
    pub final_gripper_actions: Vec<Gripper>,
}

impl SegmentedDemo {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.segments[0].dim()
    }

    /// Concatenates the segments back into one sample sequence, dropping the
    /// duplicated boundary samples.
    pub fn reassemble(&self) -> Result<Demonstration> {
        let mut samples = self.segments[0].samples().to_vec();
        for seg in &self.segments[1..] {
            samples.extend_from_slice(&seg.samples()[1..]);
        }
        Demonstration::new(samples)
    }
}

/// Raw gripper transitions: indices `n` with `flags[n] != flags[n - 1]`.
pub fn gripper_transitions(flags: &[Gripper]) -> Vec<usize> {
    (1..flags.len()).filter(|&n| flags[n] != flags[n - 1]).collect()
}

/// Event indices after debouncing. Transitions less than `debounce` samples
/// apart form one cluster represented by its last index; a cluster whose net
/// effect leaves the flag unchanged is dropped as chatter.
pub fn detect_events(flags: &[Gripper], debounce: usize) -> Vec<usize> {
    let transitions = gripper_transitions(flags);
    let mut events = Vec::new();
    let mut i = 0;
    while i < transitions.len() {
        let first = transitions[i];
        let mut last = first;
        let mut j = i + 1;
        while j < transitions.len() && transitions[j] - last < debounce {
            last = transitions[j];
            j += 1;
        }
        if flags[last] != flags[first - 1] {
            events.push(last);
        }
        i = j;
    }
    events
}

pub fn segment_by_gripper(demo: &Demonstration) -> SegmentedDemo {
    segment_with(demo, SegmentOptions::default())
}

pub fn segment_with(demo: &Demonstration, opts: SegmentOptions) -> SegmentedDemo {
    let flags: Vec<Gripper> = demo.samples().iter().map(|s| s.gripper).collect();
    let last = demo.len() - 1;
    let mut boundaries = detect_events(&flags, opts.debounce.max(1));
    if boundaries.last() != Some(&last) {
        boundaries.push(last);
    }

    let mut segments = Vec::with_capacity(boundaries.len());
    let mut start = 0;
    for &end in &boundaries {
        segments.push(demo.slice(start, end).expect("event indices are increasing"));
        start = end;
    }
    SegmentedDemo {
        subgoals: boundaries.iter().map(|&h| demo.sample(h).x.clone()).collect(),
        final_gripper_actions: boundaries.iter().map(|&h| flags[h]).collect(),
        event_indices: boundaries,
        segments,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentWarning {
    TooShort { segment: usize, len: usize },
    ZeroExtent { segment: usize },
}

impl std::fmt::Display for SegmentWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentWarning::TooShort { segment, len } => {
                write!(f, "segment {segment} has only {len} samples")
            }
            SegmentWarning::ZeroExtent { segment } => {
                write!(f, "segment {segment} has zero spatial extent")
            }
        }
    }
}

pub fn validate_segments(seg: &SegmentedDemo, min_len: usize) -> Vec<SegmentWarning> {
    let mut warnings = Vec::new();
    for (k, s) in seg.segments.iter().enumerate() {
        if s.len() < min_len {
            warnings.push(SegmentWarning::TooShort {
                segment: k,
                len: s.len(),
            });
        }
        if s.max_extent() == 0.0 {
            warnings.push(SegmentWarning::ZeroExtent { segment: k });
        }
    }
    warnings
}

/// One entry of `segments.json`: a demonstration plus its subgoal metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    #[serde(flatten)]
    pub demo: Demonstration,
    pub subgoal: Vec<f64>,
    pub event_index: usize,
    pub gripper_action: Gripper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentsFile {
    pub dim: usize,
    pub segments: Vec<SegmentEntry>,
}

impl From<&SegmentedDemo> for SegmentsFile {
    fn from(seg: &SegmentedDemo) -> Self {
        SegmentsFile {
            dim: seg.dim(),
            segments: seg
                .segments
                .iter()
                .enumerate()
                .map(|(k, d)| SegmentEntry {
                    demo: d.clone(),
                    subgoal: seg.subgoals[k].clone(),
                    event_index: seg.event_indices[k],
                    gripper_action: seg.final_gripper_actions[k],
                })
                .collect(),
        }
    }
}

impl SegmentsFile {
    pub fn into_segmented(self) -> Result<SegmentedDemo> {
        if self.segments.is_empty() {
            return Err(Error::Validation("segments file has no segments".into()));
        }
        let mut out = SegmentedDemo {
            segments: vec![],
            subgoals: vec![],
            event_indices: vec![],
            final_gripper_actions: vec![],
        };
        for e in self.segments {
            if e.demo.dim() != self.dim || e.subgoal.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: e.demo.dim(),
                });
            }
            out.segments.push(e.demo);
            out.subgoals.push(e.subgoal);
            out.event_indices.push(e.event_index);
            out.final_gripper_actions.push(e.gripper_action);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(Error::from_json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("segments serialize")
    }
}
