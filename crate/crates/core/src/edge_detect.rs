//! Edge detection and on/off pairing on the pre-processed stream.
//!
//! A transition is a run of consecutive same-sign sample differences; its
//! magnitude is the difference of the moving-average levels over `ma_window`
//! samples just before the run starts and just after it ends, so smoothing
//! ramps do not shave magnitude off the edge. Runs below `edge_threshold`
//! are discarded.

use serde::{Deserialize, Serialize};

use crate::trace_io::PowerSample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rising,
    Falling,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Rising => "rising",
            Direction::Falling => "falling",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    /// Timestamp of the first sample at the new level.
    pub time: i64,
    pub direction: Direction,
    pub magnitude: f64,
    pub pre_level: f64,
    pub post_level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePair {
    pub on_time: i64,
    pub off_time: i64,
    /// Mean of the rising and falling magnitudes.
    pub magnitude: f64,
    pub duration: i64,
}

/// Largest magnitude difference at which a falling edge may close a rising one:
/// `max(min_watts, fraction * larger magnitude)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairTolerance {
    pub min_watts: f64,
    pub fraction: f64,
}

impl PairTolerance {
    pub fn allows(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.min_watts.max(self.fraction * a.max(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeConfig {
    pub ma_window: usize,
    pub edge_threshold: f64,
    pub pair_tolerance: PairTolerance,
    /// Sliding-window length in seconds.
    pub window_length: i64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            ma_window: 5,
            edge_threshold: 30.0,
            pair_tolerance: PairTolerance {
                min_watts: 20.0,
                fraction: 0.1,
            },
            window_length: 86_400,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ma_window == 0 {
            return Err(Error::Config("ma_window must be >= 1".into()));
        }
        if !(self.edge_threshold > 0.0) {
            return Err(Error::Config("edge_threshold must be > 0".into()));
        }
        if !(self.pair_tolerance.min_watts >= 0.0 && self.pair_tolerance.fraction >= 0.0) {
            return Err(Error::Config("pair_tolerance must be non-negative".into()));
        }
        if self.window_length < 3600 {
            return Err(Error::Config("window_length must be >= 3600 s".into()));
        }
        Ok(())
    }

    /// Per-sample difference below which a sample is not part of a transition.
    fn slope_floor(&self) -> f64 {
        0.05 * self.edge_threshold
    }
}

fn mean(xs: &[PowerSample]) -> f64 {
    xs.iter().map(|s| s.power).sum::<f64>() / xs.len() as f64
}

pub fn detect_edges(filtered: &[PowerSample], config: &EdgeConfig) -> Vec<EdgeEvent> {
    let n = filtered.len();
    let w = config.ma_window.max(1);
    let floor = config.slope_floor();
    let diff = |i: usize| filtered[i].power - filtered[i - 1].power;

    let mut edges = Vec::new();
    let mut i = 1;
    while i < n {
        let d = diff(i);
        if d.abs() < floor {
            i += 1;
            continue;
        }
        let sign = d.signum();
        // Samples a..=b carry the transition; a-1 is the last pre sample.
        let (a, mut b) = (i, i);
        while b + 1 < n && diff(b + 1) * sign >= floor {
            b += 1;
        }
        let pre_level = mean(&filtered[a.saturating_sub(w)..a]);
        let post_level = mean(&filtered[b..(b + w).min(n)]);
        let delta = post_level - pre_level;
        if delta.abs() >= config.edge_threshold && delta.signum() == sign {
            edges.push(EdgeEvent {
                time: filtered[b].timestamp,
                direction: if sign > 0.0 { Direction::Rising } else { Direction::Falling },
                magnitude: delta.abs(),
                pre_level,
                post_level,
            });
        }
        i = b + 1;
    }
    edges
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<EdgePair>,
    pub unmatched: Vec<EdgeEvent>,
}

/// Matches each falling edge to the most recent unmatched rising edge of
/// compatible magnitude (a stack search, so nested activations close
/// innermost first). Unmatched edges come back in time order.
pub fn pair_edges(edges: &[EdgeEvent], config: &EdgeConfig) -> Pairing {
    let mut open: Vec<EdgeEvent> = Vec::new();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for edge in edges {
        match edge.direction {
            Direction::Rising => open.push(*edge),
            Direction::Falling => {
                let hit = open
                    .iter()
                    .rposition(|r| r.time < edge.time && config.pair_tolerance.allows(r.magnitude, edge.magnitude));
                match hit {
                    Some(k) => {
                        let rise = open.remove(k);
                        pairs.push(EdgePair {
                            on_time: rise.time,
                            off_time: edge.time,
                            magnitude: 0.5 * (rise.magnitude + edge.magnitude),
                            duration: edge.time - rise.time,
                        });
                    }
                    None => unmatched.push(*edge),
                }
            }
        }
    }
    unmatched.extend(open);
    unmatched.sort_by_key(|e| e.time);
    Pairing { pairs, unmatched }
}

/// Windows of `window_length` seconds advancing by `step`, anchored at the
/// first sample. The final window may be partial and is kept when it spans
/// at least an hour; iteration stops once a window reaches the end.
pub fn sliding_windows(trace: &[PowerSample], window_length: i64, step: i64) -> SlidingWindows<'_> {
    SlidingWindows {
        trace,
        window_length,
        step: step.clamp(1, window_length.max(1)),
        next_start: trace.first().map(|s| s.timestamp),
    }
}

pub const MIN_PARTIAL_WINDOW_S: i64 = 3600;

pub struct SlidingWindows<'a> {
    trace: &'a [PowerSample],
    window_length: i64,
    step: i64,
    next_start: Option<i64>,
}

impl<'a> Iterator for SlidingWindows<'a> {
    type Item = &'a [PowerSample];

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next_start?;
        let last = self.trace.last()?.timestamp;
        let end = start + self.window_length;
        let lo = self.trace.partition_point(|s| s.timestamp < start);
        let hi = self.trace.partition_point(|s| s.timestamp < end);
        if end > last {
            self.next_start = None;
            let covered = last - start + 1;
            return (covered >= MIN_PARTIAL_WINDOW_S || covered >= self.window_length)
                .then(|| &self.trace[lo..hi]);
        }
        self.next_start = Some(start + self.step);
        Some(&self.trace[lo..hi])
    }
}

pub fn write_edges_csv<W: std::io::Write>(edges: &[EdgeEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "direction", "magnitude", "pre_level", "post_level"])?;
    for e in edges {
        w.write_record([
            e.time.to_string(),
            e.direction.to_string(),
            e.magnitude.to_string(),
            e.pre_level.to_string(),
            e.post_level.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_pairs_csv<W: std::io::Write>(pairs: &[EdgePair], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["on_time", "off_time", "magnitude", "duration"])?;
    for p in pairs {
        w.write_record([
            p.on_time.to_string(),
            p.off_time.to_string(),
            p.magnitude.to_string(),
            p.duration.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
