//! De-noising ahead of edge detection.
//!
//! Windows shrink symmetrically at the sequence ends instead of padding, so no
//! reading is fabricated. Neither stage can leave the input's value range.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Odd median window in samples; 31 is the odd neighbour of a 30 s window at 1 Hz.
    pub median_window: usize,
    pub smoothing: Smoothing,
    pub smoothing_window: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            median_window: 31,
            smoothing: Smoothing::MovingAverage,
            smoothing_window: 5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        check_median_window(self.median_window)?;
        if self.smoothing_window == 0 {
            return Err(Error::Config("smoothing_window must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_median_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("median window must be odd and >= 3, got {window}")));
    }
    Ok(())
}

/// Centered running median with symmetric shrinking at both ends.
pub fn median_filter(samples: &[f64], window: usize) -> Result<Vec<f64>> {
    check_median_window(window)?;
    if window > samples.len() {
        return Err(Error::Config(format!(
            "median window {window} exceeds input length {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let half = window / 2;
    let mut buf = Vec::with_capacity(window);
    let out = (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&samples[i - h..=i + h]);
            let (_, median, _) = buf.select_nth_unstable_by(h, f64::total_cmp);
            *median
        })
        .collect();
    Ok(out)
}

/// Centered moving average; the window is truncated at the ends.
pub fn moving_average(samples: &[f64], window: usize) -> Vec<f64> {
    let n = samples.len();
    let left = (window.max(1) - 1) / 2;
    let right = window.max(1) - 1 - left;
    (0..n)
        .map(|i| {
            let slice = &samples[i.saturating_sub(left)..(i + right + 1).min(n)];
            let (lo, hi) = slice
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            // Clamp away rounding so the output stays inside the window's range.
            (slice.iter().sum::<f64>() / slice.len() as f64).clamp(lo, hi)
        })
        .collect()
}

/// Median filter followed by the configured smoothing stage.
pub fn smooth(samples: &[f64], config: &FilterConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let filtered = median_filter(samples, config.median_window)?;
    Ok(match config.smoothing {
        Smoothing::None => filtered,
        Smoothing::MovingAverage => moving_average(&filtered, config.smoothing_window),
    })
}
