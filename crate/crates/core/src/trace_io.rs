//! Aggregate power traces: REDD-style channel loading, 1 Hz resampling,
//! synthetic ground truth and CSV export.
//!
//! Channel files hold one `<unix-timestamp> <watts>` reading per line. Each
//! channel is forward-filled onto a 1 s grid; readings further apart than
//! [`MAX_FILL_GAP_S`] leave a hole that is reported as a [`Gap`] and dropped
//! from the trace instead of being invented.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Longest hole between two readings that is bridged by forward fill.
pub const MAX_FILL_GAP_S: i64 = 20;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp: i64,
    pub power: f64,
}

impl PowerSample {
    pub fn new(timestamp: i64, power: f64) -> Self {
        Self { timestamp, power }
    }
}

/// Inclusive range of grid seconds with no usable reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start: i64,
    pub end: i64,
}

impl Gap {
    pub fn len(&self) -> i64 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }
}

/// Aggregate trace plus per-appliance series on the same time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrace {
    pub samples: Vec<PowerSample>,
    /// Appliance label to power series, index-aligned with `samples`.
    pub per_appliance: BTreeMap<String, Vec<f64>>,
    pub gaps: Vec<Gap>,
    /// Stddev of the additive noise in `samples` relative to the appliance sum.
    pub noise_stddev: f64,
    /// Number of negative readings clamped to 0 W while loading.
    pub clamped_negative: usize,
}

impl GroundTruthTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.power).collect()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.timestamp).collect()
    }

    /// Checks the sample invariants: finite non-negative power, 1 s steps
    /// except across declared gaps, and aligned per-appliance series.
    pub fn validate(&self) -> Result<()> {
        validate_samples(&self.samples)?;
        let declared: BTreeSet<(i64, i64)> = self.gaps.iter().map(|g| (g.start, g.end)).collect();
        for w in self.samples.windows(2) {
            let step = w[1].timestamp - w[0].timestamp;
            if step != 1 && !declared.contains(&(w[0].timestamp + 1, w[1].timestamp - 1)) {
                return Err(Error::Input(format!(
                    "undeclared {}s jump after timestamp {}",
                    step, w[0].timestamp
                )));
            }
        }
        for (label, series) in &self.per_appliance {
            if series.len() != self.samples.len() {
                return Err(Error::Input(format!(
                    "appliance '{label}' has {} samples, aggregate has {}",
                    series.len(),
                    self.samples.len()
                )));
            }
            if let Some(p) = series.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(Error::Input(format!("appliance '{label}' has invalid power {p}")));
            }
        }
        Ok(())
    }

    /// Largest `|aggregate - sum of appliances|` over the trace.
    pub fn max_residual(&self) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sum: f64 = self.per_appliance.values().map(|v| v[i]).sum();
                (s.power - sum).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Checks that powers are finite and non-negative and timestamps strictly increase.
pub fn validate_samples(samples: &[PowerSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !s.power.is_finite() || s.power < 0.0 {
            return Err(Error::Input(format!(
                "sample {i} at t={} has invalid power {}",
                s.timestamp, s.power
            )));
        }
        if i > 0 && s.timestamp <= samples[i - 1].timestamp {
            return Err(Error::Input(format!(
                "timestamps not strictly increasing at sample {i} (t={})",
                s.timestamp
            )));
        }
    }
    Ok(())
}

struct Channel {
    label: String,
    readings: Vec<(i64, f64)>,
    clamped: usize,
}

fn parse_channel(path: &Path) -> Result<Channel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut readings = Vec::new();
    let mut clamped = 0;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let mut fields = trimmed.split_whitespace();
        let (Some(ts), Some(watts), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(format!("expected `<timestamp> <watts>`, got `{trimmed}`")));
        };
        let timestamp = match ts.parse::<i64>() {
            Ok(t) => t,
            Err(_) => match ts.parse::<f64>() {
                Ok(t) if t.is_finite() => t.floor() as i64,
                _ => return Err(parse_err(format!("bad timestamp `{ts}`"))),
            },
        };
        let mut power: f64 = watts
            .parse()
            .map_err(|_| parse_err(format!("bad power value `{watts}`")))?;
        if !power.is_finite() {
            return Err(parse_err(format!("non-finite power `{watts}`")));
        }
        if power < 0.0 {
            power = 0.0;
            clamped += 1;
        }
        readings.push((timestamp, power));
    }
    if readings.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "channel file has no readings".into(),
        });
    }
    // Stable sort keeps file order for duplicates; the last one wins.
    readings.sort_by_key(|r| r.0);
    let mut deduped: Vec<(i64, f64)> = Vec::with_capacity(readings.len());
    for r in readings {
        match deduped.last_mut() {
            Some(last) if last.0 == r.0 => *last = r,
            _ => deduped.push(r),
        }
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(Channel {
        label,
        readings: deduped,
        clamped,
    })
}

/// Forward-fills one channel onto `start..=end`; NaN marks unbridged holes.
fn resample_channel(readings: &[(i64, f64)], start: i64, end: i64) -> Vec<f64> {
    let mut out = vec![f64::NAN; (end - start + 1) as usize];
    for (j, &(t, v)) in readings.iter().enumerate() {
        let until = match readings.get(j + 1) {
            Some(&(next, _)) if next - t <= MAX_FILL_GAP_S => next - 1,
            _ => t,
        };
        let lo = t.max(start);
        let hi = until.min(end);
        for ts in lo..=hi {
            out[(ts - start) as usize] = v;
        }
    }
    out
}

/// Loads the selected channel files, resamples each to 1 Hz and sums them
/// into the aggregate. `channel_selection` indexes into `paths`.
pub fn load_channel_files<P: AsRef<Path>>(
    paths: &[P],
    channel_selection: &[usize],
) -> Result<GroundTruthTrace> {
    if channel_selection.is_empty() {
        return Err(Error::Config("channel selection is empty".into()));
    }
    let mut channels = Vec::with_capacity(channel_selection.len());
    for &idx in channel_selection {
        let path = paths.get(idx).ok_or_else(|| {
            Error::Config(format!("channel index {idx} out of range ({} files)", paths.len()))
        })?;
        channels.push(parse_channel(path.as_ref())?);
    }

    let start = channels.iter().map(|c| c.readings[0].0).max().unwrap_or(0);
    let end = channels
        .iter()
        .map(|c| c.readings[c.readings.len() - 1].0)
        .min()
        .unwrap_or(0);
    if start > end {
        return Err(Error::Input("selected channels do not overlap in time".into()));
    }

    let grids: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| resample_channel(&c.readings, start, end))
        .collect();

    let mut labels: Vec<String> = Vec::with_capacity(channels.len());
    for c in &channels {
        let mut label = c.label.clone();
        let mut n = 2;
        while labels.contains(&label) {
            label = format!("{}_{}", c.label, n);
            n += 1;
        }
        labels.push(label);
    }

    let len = (end - start + 1) as usize;
    let mut samples = Vec::with_capacity(len);
    let mut per_appliance: Vec<Vec<f64>> = vec![Vec::with_capacity(len); channels.len()];
    let mut gaps = Vec::new();
    let mut gap_start: Option<i64> = None;
    for i in 0..len {
        let ts = start + i as i64;
        if grids.iter().any(|g| g[i].is_nan()) {
            gap_start.get_or_insert(ts);
            continue;
        }
        if let Some(gs) = gap_start.take() {
            gaps.push(Gap { start: gs, end: ts - 1 });
        }
        let mut sum = 0.0;
        for (c, g) in grids.iter().enumerate() {
            per_appliance[c].push(g[i]);
            sum += g[i];
        }
        samples.push(PowerSample::new(ts, sum));
    }
    // The grid ends on a reading of every channel, so no trailing gap is open.
    debug_assert!(gap_start.is_none());

    Ok(GroundTruthTrace {
        samples,
        per_appliance: labels.into_iter().zip(per_appliance).collect(),
        gaps,
        noise_stddev: 0.0,
        clamped_negative: channels.iter().map(|c| c.clamped).sum(),
    })
}

/// Synthetic appliance description for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceSpec {
    pub label: String,
    pub on_power: f64,
    /// Mean of the exponential on-duration, seconds.
    pub mean_on_duration: f64,
    /// Poisson rate of activations per day.
    pub activations_per_day: f64,
    #[serde(default)]
    pub noise_stddev: f64,
}

impl ApplianceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{}.{field}: {why}", self.label)));
        if self.label.trim().is_empty() {
            return Err(Error::Config("label: must not be empty".into()));
        }
        if !(self.on_power.is_finite() && self.on_power > 0.0) {
            return bad("on_power", "must be > 0");
        }
        if !(self.mean_on_duration.is_finite() && self.mean_on_duration >= 1.0) {
            return bad("mean_on_duration", "must be >= 1 second");
        }
        if !(self.activations_per_day.is_finite() && self.activations_per_day >= 0.0) {
            return bad("activations_per_day", "must be >= 0");
        }
        if !(self.noise_stddev.is_finite() && self.noise_stddev >= 0.0) {
            return bad("noise_stddev", "must be >= 0");
        }
        Ok(())
    }
}

/// Generates a deterministic ground-truth trace starting at timestamp 0.
///
/// Per appliance and day the activation count is Poisson, start times are
/// uniform over the day and durations exponential (at least 1 s); overlapping
/// activations of the same appliance coalesce. The aggregate is the appliance
/// sum plus zero-mean Gaussian noise with stddev `sqrt(sum noise_stddev^2)`,
/// clamped at 0 W.
pub fn generate_synthetic(specs: &[ApplianceSpec], days: u32, seed: u64) -> Result<GroundTruthTrace> {
    if specs.is_empty() {
        return Err(Error::Config("at least one appliance spec is required".into()));
    }
    if days == 0 {
        return Err(Error::Config("days must be >= 1".into()));
    }
    let mut seen = BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !seen.insert(spec.label.as_str()) {
            return Err(Error::Config(format!("duplicate appliance label '{}'", spec.label)));
        }
    }

    let len = days as usize * SECONDS_PER_DAY as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_appliance = BTreeMap::new();
    for spec in specs {
        let mut series = vec![0.0; len];
        let duration = Exp::new(1.0 / spec.mean_on_duration).map_err(|e| Error::Config(e.to_string()))?;
        let count = (spec.activations_per_day > 0.0)
            .then(|| Poisson::new(spec.activations_per_day))
            .transpose()
            .map_err(|e| Error::Config(e.to_string()))?;
        for day in 0..days as usize {
            let n = count.as_ref().map_or(0, |c| c.sample(&mut rng) as usize);
            for _ in 0..n {
                let start = day * SECONDS_PER_DAY as usize + rng.random_range(0..SECONDS_PER_DAY as usize);
                let secs = duration.sample(&mut rng).round().max(1.0) as usize;
                let stop = (start + secs).min(len);
                series[start..stop].fill(spec.on_power);
            }
        }
        per_appliance.insert(spec.label.clone(), series);
    }

    let noise_stddev = specs.iter().map(|s| s.noise_stddev * s.noise_stddev).sum::<f64>().sqrt();
    let noise = Normal::new(0.0, noise_stddev).map_err(|e| Error::Config(e.to_string()))?;
    let samples = (0..len)
        .map(|i| {
            let sum: f64 = per_appliance.values().map(|v: &Vec<f64>| v[i]).sum();
            let eps = if noise_stddev > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            PowerSample::new(i as i64, (sum + eps).max(0.0))
        })
        .collect();

    Ok(GroundTruthTrace {
        samples,
        per_appliance,
        gaps: Vec::new(),
        noise_stddev,
        clamped_negative: 0,
    })
}

/// Number of distinct on-intervals in a power series.
pub fn count_activations(series: &[f64]) -> usize {
    let mut count = 0;
    let mut prev_on = false;
    for &p in series {
        let on = p > 0.0;
        if on && !prev_on {
            count += 1;
        }
        prev_on = on;
    }
    count
}

/// Writes `timestamp,power_w` plus one column per appliance.
pub fn write_trace_csv<W: Write>(trace: &GroundTruthTrace, include_appliances: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string(), "power_w".to_string()];
    if include_appliances {
        header.extend(trace.per_appliance.keys().cloned());
    }
    w.write_record(&header)?;
    let columns: Vec<&Vec<f64>> = trace.per_appliance.values().collect();
    let mut row = Vec::with_capacity(header.len());
    for (i, s) in trace.samples.iter().enumerate() {
        row.clear();
        row.push(s.timestamp.to_string());
        row.push(s.power.to_string());
        if include_appliances {
            row.extend(columns.iter().map(|c| c[i].to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Reads a trace from either a `timestamp,power_w[,label...]` CSV or a
/// single whitespace-separated REDD channel file.
pub fn read_trace(path: impl AsRef<Path>) -> Result<GroundTruthTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if first.trim_start().starts_with("timestamp") {
        read_trace_csv(path)
    } else {
        load_channel_files(&[path], &[0])
    }
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<GroundTruthTrace> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let mut rdr = csv::Reader::from_path(&path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "timestamp" || &header[1] != "power_w" {
        return Err(Error::Parse {
            path,
            line: 1,
            message: "expected header starting with `timestamp,power_w`".into(),
        });
    }
    let labels: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut samples = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |k: usize| -> Result<&str> {
            record.get(k).ok_or_else(|| Error::Parse {
                path: path.clone(),
                line,
                message: format!("missing column {}", k + 1),
            })
        };
        let num = |k: usize| -> Result<f64> {
            let raw = field(k)?;
            raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.clone(),
                line,
                message: format!("bad number `{raw}`"),
            })
        };
        let ts: i64 = field(0)?.trim().parse().map_err(|_| Error::Parse {
            path: path.clone(),
            line,
            message: format!("bad timestamp `{}`", &record[0]),
        })?;
        samples.push(PowerSample::new(ts, num(1)?.max(0.0)));
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(num(c + 2)?.max(0.0));
        }
    }
    validate_samples(&samples)?;
    let gaps = samples
        .windows(2)
        .filter(|w| w[1].timestamp - w[0].timestamp > 1)
        .map(|w| Gap {
            start: w[0].timestamp + 1,
            end: w[1].timestamp - 1,
        })
        .collect();
    Ok(GroundTruthTrace {
        samples,
        per_appliance: labels.into_iter().zip(columns).collect(),
        gaps,
        noise_stddev: 0.0,
        clamped_negative: 0,
    })
}
