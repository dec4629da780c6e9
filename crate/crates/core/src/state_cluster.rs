//! Histogram of edge-pair magnitudes and its segmentation into power states.

use serde::{Deserialize, Serialize};

use crate::edge_detect::EdgePair;
use crate::{Error, Result};

pub const BIN_WIDTH_W: f64 = 5.0;
pub const HISTOGRAM_RANGE_W: f64 = 3000.0;
pub const NUM_BINS: usize = 600;

/// Counts of pair magnitudes in 5 W bins over `[0, 3000)` W.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateHistogram {
    counts: Vec<u32>,
    overflow: u32,
}

impl Default for StateHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; NUM_BINS],
            overflow: 0,
        }
    }
}

impl StateHistogram {
    /// Bin covering `magnitude`, or `None` past the histogram range.
    pub fn bin_index(magnitude: f64) -> Option<usize> {
        let bin = (magnitude.max(0.0) / BIN_WIDTH_W).floor();
        (bin < NUM_BINS as f64).then_some(bin as usize)
    }

    pub fn bin_center(bin: usize) -> f64 {
        BIN_WIDTH_W * bin as f64 + 0.5 * BIN_WIDTH_W
    }

    pub fn add(&mut self, magnitude: f64) {
        match Self::bin_index(magnitude) {
            Some(bin) => self.counts[bin] += 1,
            None => self.overflow += 1,
        }
    }

    /// Adds another histogram's counts into this one.
    pub fn accumulate(&mut self, other: &StateHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.overflow += other.overflow;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn overflow_count(&self) -> u32 {
        self.overflow
    }

    /// Number of magnitudes accumulated, including overflow.
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum::<u64>() + self.overflow as u64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low_w", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([(BIN_WIDTH_W * i as f64).to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }
}

pub fn build_histogram(pairs: &[EdgePair]) -> StateHistogram {
    let mut hist = StateHistogram::default();
    for p in pairs {
        hist.add(p.magnitude);
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    /// Count-weighted mean of the member bin centers.
    pub nominal_power: f64,
    pub support: u32,
    /// First and last non-empty bin of the cluster, inclusive.
    pub bin_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub min_support: u32,
    /// Consecutive empty bins that end a cluster.
    pub gap_bins: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            min_support: 2,
            gap_bins: 2,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_support == 0 || self.gap_bins == 0 {
            return Err(Error::Config("min_support and gap_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Splits the histogram at every run of `gap_bins` or more empty bins and
/// keeps clusters with at least `min_support` counts, ascending by power.
pub fn segment(hist: &StateHistogram, config: &ClusterConfig) -> Vec<PowerState> {
    let mut states = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let mut empty_run = 0;

    let mut close = |span: (usize, usize)| {
        let bins = &hist.counts[span.0..=span.1];
        let support: u32 = bins.iter().sum();
        if support >= config.min_support {
            let weighted: f64 = bins
                .iter()
                .enumerate()
                .map(|(k, &c)| StateHistogram::bin_center(span.0 + k) * c as f64)
                .sum();
            states.push(PowerState {
                nominal_power: weighted / support as f64,
                support,
                bin_span: span,
            });
        }
    };

    for (bin, &count) in hist.counts.iter().enumerate() {
        if count > 0 {
            current = Some(match current {
                Some((lo, _)) => (lo, bin),
                None => (bin, bin),
            });
            empty_run = 0;
        } else if let Some(span) = current {
            empty_run += 1;
            if empty_run >= config.gap_bins {
                close(span);
                current = None;
            }
        }
    }
    if let Some(span) = current {
        close(span);
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(magnitude: f64) -> EdgePair {
        EdgePair {
            on_time: 0,
            off_time: 1,
            magnitude,
            duration: 1,
        }
    }

    fn hist_with(bins: &[(usize, u32)]) -> StateHistogram {
        let mut h = StateHistogram::default();
        for &(b, c) in bins {
            h.counts[b] = c;
        }
        h
    }

    #[test]
    fn empty_histogram() {
        let h = build_histogram(&[]);
        assert_eq!(h.total(), 0);
        assert!(segment(&h, &ClusterConfig::default()).is_empty());
    }

    #[test]
    fn bin_indices_by_hand() {
        let h = build_histogram(&[pair(198.0), pair(202.0), pair(795.0)]);
        assert_eq!((h.counts[39], h.counts[40], h.counts[159]), (1, 1, 1));
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn overflow() {
        let h = build_histogram(&[pair(3200.0), pair(3000.0)]);
        assert_eq!(h.overflow_count(), 2);
        assert!(h.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn weighted_center() {
        let states = segment(&hist_with(&[(39, 4), (40, 6)]), &ClusterConfig::default());
        assert_eq!(states.len(), 1);
        assert!((states[0].nominal_power - 200.5).abs() < 1e-12);
        assert_eq!(states[0].support, 10);
        assert_eq!(states[0].bin_span, (39, 40));
    }

    #[test]
    fn low_support_cluster_dropped() {
        let states = segment(&hist_with(&[(40, 5), (160, 1)]), &ClusterConfig::default());
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].nominal_power, 202.5);
    }

    #[test]
    fn single_empty_bin_does_not_split() {
        let states = segment(&hist_with(&[(40, 2), (42, 2), (45, 2)]), &ClusterConfig::default());
        let spans: Vec<_> = states.iter().map(|s| s.bin_span).collect();
        assert_eq!(spans, vec![(40, 42), (45, 45)]);
    }

    proptest! {
        #[test]
        fn support_is_conserved(bins in prop::collection::vec((0usize..NUM_BINS, 1u32..5), 0..60), overflow in 0u32..5) {
            let mut h = hist_with(&bins);
            h.overflow = overflow;
            let states = segment(&h, &ClusterConfig::default());
            let kept: u64 = states.iter().map(|s| s.support as u64).sum();
            let all = ClusterConfig { min_support: 1, ..ClusterConfig::default() };
            let everything: u64 = segment(&h, &all).iter().map(|s| s.support as u64).sum();
            prop_assert!(kept <= h.total());
            prop_assert_eq!(everything + overflow as u64, h.total());
            for s in &states {
                let lo = BIN_WIDTH_W * s.bin_span.0 as f64;
                let hi = BIN_WIDTH_W * (s.bin_span.1 + 1) as f64;
                prop_assert!(s.nominal_power >= lo && s.nominal_power < hi);
            }
            prop_assert!(states.windows(2).all(|w| w[0].nominal_power < w[1].nominal_power));
            prop_assert_eq!(segment(&h, &ClusterConfig::default()), states);
        }
    }
}
