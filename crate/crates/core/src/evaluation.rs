//! Scoring disaggregation output against ground truth.
//!
//! Detected powers are mapped to the nearest reference power within a
//! distance threshold (75 W by default); on an exact tie the lower reference
//! wins. Estimated energy from unmapped appliances lands in the `unknown`
//! bucket.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::appliance_db::ApplianceId;
use crate::state_cluster::StateHistogram;
use crate::{watt_seconds_to_kwh, Error, Result};

pub const DEFAULT_DISTANCE_THRESHOLD_W: f64 = 75.0;
pub const UNKNOWN_LABEL: &str = "unknown";

/// Reference power states identified by hand for REDD house 1.
pub const REDD_REFERENCE_STATES_W: [f64; 9] = [100.0, 200.0, 390.0, 800.0, 1100.0, 1500.0, 1650.0, 2600.0, 2720.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    Reference { index: usize, power: f64 },
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMapping {
    /// `(detected power, assignment)` in input order.
    pub assignments: Vec<(f64, Assignment)>,
    pub distance_threshold: f64,
}

impl StateMapping {
    pub fn assignable(&self) -> usize {
        self.assignments
            .iter()
            .filter(|(_, a)| matches!(a, Assignment::Reference { .. }))
            .count()
    }

    pub fn unassignable(&self) -> usize {
        self.assignments.len() - self.assignable()
    }
}

fn nearest_reference(detected: f64, reference: &[f64], threshold: f64) -> Assignment {
    reference
        .iter()
        .enumerate()
        .map(|(i, &r)| ((detected - r).abs(), r, i))
        .filter(|(d, _, _)| *d <= threshold)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map_or(Assignment::Unknown, |(_, power, index)| Assignment::Reference { index, power })
}

pub fn map_states(detected: &[f64], reference: &[f64], threshold: f64) -> Result<StateMapping> {
    if reference.is_empty() {
        return Err(Error::Config("reference state list is empty".into()));
    }
    Ok(StateMapping {
        assignments: detected
            .iter()
            .map(|&d| (d, nearest_reference(d, reference, threshold)))
            .collect(),
        distance_threshold: threshold,
    })
}

pub fn rmse(estimated: &[f64], actual: &[f64]) -> Result<f64> {
    if estimated.len() != actual.len() {
        return Err(Error::Alignment(format!(
            "{} estimated vs {} actual samples",
            estimated.len(),
            actual.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::EmptyReport("RMSE over zero samples".into()));
    }
    let sse: f64 = estimated.iter().zip(actual).map(|(e, a)| (e - a) * (e - a)).sum();
    Ok((sse / estimated.len() as f64).sqrt())
}

/// `|estimated - actual| / actual`.
pub fn energy_error_fraction(estimated_kwh: f64, actual_kwh: f64) -> f64 {
    (estimated_kwh - actual_kwh).abs() / actual_kwh
}

/// Energy per label as fractions of the total; empty when the total is zero.
pub fn shares(energy: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let total: f64 = energy.values().sum();
    if total <= 0.0 {
        return BTreeMap::new();
    }
    energy.iter().map(|(k, v)| (k.clone(), v / total)).collect()
}

/// One disaggregated appliance aligned to the ground-truth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedAppliance {
    pub label: String,
    pub on_power: f64,
    pub powers: Vec<f64>,
}

/// Ground-truth appliances with indistinguishable demand, summed.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualAppliance {
    pub label: String,
    pub members: Vec<String>,
    pub nominal_power: f64,
    pub powers: Vec<f64>,
}

/// Most frequent 5 W bin center among samples above `floor`, or `None` for
/// an appliance that never runs.
pub fn dominant_on_power(series: &[f64], floor: f64) -> Option<f64> {
    let mut hist = StateHistogram::default();
    let mut over = 0u32;
    for &p in series.iter().filter(|&&p| p > floor) {
        hist.add(p);
        over += 1;
    }
    if over == 0 {
        return None;
    }
    let counts = hist.counts();
    let (bin, &c) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("histogram has bins");
    if c < hist.overflow_count() {
        // Mostly above the histogram range: fall back to the mean on-power.
        let on: Vec<f64> = series.iter().copied().filter(|&p| p > floor).collect();
        return Some(on.iter().sum::<f64>() / on.len() as f64);
    }
    Some(StateHistogram::bin_center(bin))
}

/// Groups appliances whose dominant on-powers chain together with gaps
/// below `merge_threshold`, summing each group into one virtual appliance.
pub fn virtual_appliance_grouping(per_appliance: &BTreeMap<String, Vec<f64>>, merge_threshold: f64) -> Vec<VirtualAppliance> {
    let mut ranked: Vec<(f64, &String, &Vec<f64>)> = per_appliance
        .iter()
        .map(|(label, series)| (dominant_on_power(series, 10.0).unwrap_or(0.0), label, series))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));

    let mut groups: Vec<Vec<(f64, &String, &Vec<f64>)>> = Vec::new();
    for item in ranked {
        match groups.last_mut() {
            Some(g) if item.0 - g.last().expect("non-empty group").0 < merge_threshold => g.push(item),
            _ => groups.push(vec![item]),
        }
    }

    groups
        .into_iter()
        .map(|g| {
            let len = g[0].2.len();
            let mut powers = vec![0.0; len];
            let mut weight = 0.0;
            let mut weighted = 0.0;
            for (p, _, series) in &g {
                let on = series.iter().filter(|&&v| v > 10.0).count() as f64;
                weight += on;
                weighted += on * p;
                for (acc, v) in powers.iter_mut().zip(series.iter()) {
                    *acc += v;
                }
            }
            let members: Vec<String> = g.iter().map(|(_, l, _)| (*l).clone()).collect();
            VirtualAppliance {
                label: members.join("+"),
                nominal_power: if weight > 0.0 { weighted / weight } else { g[0].0 },
                members,
                powers,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_appliance_rmse: BTreeMap<String, f64>,
    pub total_energy_estimated: f64,
    pub total_energy_actual: f64,
    pub energy_error_fraction: f64,
    /// Estimated energy share per virtual appliance plus `unknown`.
    pub energy_shares: BTreeMap<String, f64>,
    pub ground_truth_shares: BTreeMap<String, f64>,
    /// Estimated appliance label to the virtual appliance it was assigned to.
    pub assignments: BTreeMap<String, String>,
    pub states_assignable_per_day: BTreeMap<u32, u32>,
    pub states_unassignable_per_day: BTreeMap<u32, u32>,
}

/// Scores estimates against virtual appliances. `mapping` must come from
/// [`map_states`] over the estimates' on-powers (in order) against the
/// virtual appliances' nominal powers (in order).
pub fn energy_report(
    estimates: &[EstimatedAppliance],
    ground_truth: &[VirtualAppliance],
    mapping: &StateMapping,
) -> Result<EvaluationReport> {
    let len = ground_truth
        .first()
        .map(|g| g.powers.len())
        .ok_or_else(|| Error::EmptyReport("no ground-truth appliances".into()))?;
    if len == 0 {
        return Err(Error::EmptyReport("zero-length overlap".into()));
    }
    if mapping.assignments.len() != estimates.len() {
        return Err(Error::Alignment("mapping does not cover every estimate".into()));
    }
    for series in estimates.iter().map(|e| &e.powers).chain(ground_truth.iter().map(|g| &g.powers)) {
        if series.len() != len {
            return Err(Error::Alignment(format!("series of length {} vs {len}", series.len())));
        }
    }

    let mut assigned: Vec<Vec<f64>> = vec![vec![0.0; len]; ground_truth.len()];
    let mut estimated_energy: BTreeMap<String, f64> =
        ground_truth.iter().map(|g| (g.label.clone(), 0.0)).collect();
    estimated_energy.insert(UNKNOWN_LABEL.into(), 0.0);
    let mut assignments = BTreeMap::new();
    for (est, (_, assignment)) in estimates.iter().zip(&mapping.assignments) {
        let energy = watt_seconds_to_kwh(est.powers.iter().sum());
        let label = match *assignment {
            Assignment::Reference { index, .. } => {
                let target = ground_truth
                    .get(index)
                    .ok_or_else(|| Error::Alignment(format!("mapping refers to reference {index}")))?;
                for (acc, p) in assigned[index].iter_mut().zip(&est.powers) {
                    *acc += p;
                }
                target.label.clone()
            }
            Assignment::Unknown => UNKNOWN_LABEL.to_string(),
        };
        *estimated_energy.get_mut(&label).expect("label registered") += energy;
        assignments.insert(est.label.clone(), label);
    }

    let mut per_appliance_rmse = BTreeMap::new();
    let mut actual_energy = BTreeMap::new();
    for (g, est) in ground_truth.iter().zip(&assigned) {
        per_appliance_rmse.insert(g.label.clone(), rmse(est, &g.powers)?);
        actual_energy.insert(g.label.clone(), watt_seconds_to_kwh(g.powers.iter().sum()));
    }

    let total_energy_estimated: f64 = estimated_energy.values().sum();
    let total_energy_actual: f64 = actual_energy.values().sum();
    Ok(EvaluationReport {
        per_appliance_rmse,
        total_energy_estimated,
        total_energy_actual,
        energy_error_fraction: energy_error_fraction(total_energy_estimated, total_energy_actual),
        energy_shares: shares(&estimated_energy),
        ground_truth_shares: shares(&actual_energy),
        assignments,
        ..EvaluationReport::default()
    })
}

/// Builds per-appliance estimated series on a fixed timestamp grid from
/// `(timestamp, appliance, estimated power)` records. Records before the
/// grid start are skipped; any other timestamp off the grid is an error.
#[derive(Debug, Clone)]
pub struct EstimateAccumulator {
    start: i64,
    index: BTreeMap<i64, usize>,
    series: BTreeMap<ApplianceId, Vec<f64>>,
}

impl EstimateAccumulator {
    pub fn new(timestamps: &[i64]) -> Self {
        Self {
            start: timestamps.first().copied().unwrap_or(i64::MAX),
            index: timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect(),
            series: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, timestamp: i64, id: ApplianceId, power: f64) -> Result<()> {
        if timestamp < self.start {
            return Ok(());
        }
        let &i = self
            .index
            .get(&timestamp)
            .ok_or_else(|| Error::Alignment(format!("estimate at {timestamp} has no ground-truth sample")))?;
        let len = self.index.len();
        self.series.entry(id).or_insert_with(|| vec![0.0; len])[i] += power;
        Ok(())
    }

    /// One series per appliance; `on_power` is the mean non-zero estimate.
    pub fn finish(self) -> Vec<EstimatedAppliance> {
        self.series
            .into_iter()
            .map(|(id, powers)| {
                let on: Vec<f64> = powers.iter().copied().filter(|&p| p > 0.0).collect();
                let on_power = if on.is_empty() { 0.0 } else { on.iter().sum::<f64>() / on.len() as f64 };
                EstimatedAppliance {
                    label: id.to_string(),
                    on_power,
                    powers,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub distance_threshold: f64,
    /// Ground-truth appliances closer than this are grouped together.
    pub merge_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            distance_threshold: DEFAULT_DISTANCE_THRESHOLD_W,
            merge_threshold: 50.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold >= 0.0 && self.merge_threshold >= 0.0) {
            return Err(Error::Config("evaluation thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Groups ground truth into virtual appliances, maps estimates onto them by
/// on-power and scores the result.
pub fn evaluate(
    truth: &BTreeMap<String, Vec<f64>>,
    estimates: &[EstimatedAppliance],
    config: &EvalConfig,
) -> Result<(EvaluationReport, Vec<VirtualAppliance>)> {
    let virtuals = virtual_appliance_grouping(truth, config.merge_threshold);
    if virtuals.is_empty() {
        return Err(Error::EmptyReport("no ground-truth appliances".into()));
    }
    let reference: Vec<f64> = virtuals.iter().map(|v| v.nominal_power).collect();
    let detected: Vec<f64> = estimates.iter().map(|e| e.on_power).collect();
    let mapping = map_states(&detected, &reference, config.distance_threshold)?;
    Ok((energy_report(estimates, &virtuals, &mapping)?, virtuals))
}

/// Per-day counts of detected powers that do / do not map to a reference.
pub fn daily_state_counts(
    per_day: &BTreeMap<u32, Vec<f64>>,
    reference: &[f64],
    threshold: f64,
) -> Result<(BTreeMap<u32, u32>, BTreeMap<u32, u32>)> {
    let mut assignable = BTreeMap::new();
    let mut unassignable = BTreeMap::new();
    for (&day, powers) in per_day {
        let m = map_states(powers, reference, threshold)?;
        assignable.insert(day, m.assignable() as u32);
        unassignable.insert(day, m.unassignable() as u32);
    }
    Ok((assignable, unassignable))
}

/// Reads reference states from `power_w` or `label,power_w` CSV (header
/// optional) or one wattage per line.
pub fn read_reference_states(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (label, raw) = match fields.as_slice() {
            [p] => (None, *p),
            [l, p] => (Some(*l), *p),
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: "expected `power_w` or `label,power_w`".into(),
                })
            }
        };
        match raw.parse::<f64>() {
            Ok(p) if p.is_finite() && p >= 0.0 => {
                out.push((label.map_or_else(|| format!("{p}W"), str::to_string), p));
            }
            _ if i == 0 || out.is_empty() && raw.chars().any(char::is_alphabetic) => continue,
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("bad power `{raw}`"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: no reference states", path.display())));
    }
    Ok(out)
}

pub fn write_daily_counts_csv<W: std::io::Write>(report: &EvaluationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["day", "assignable", "unassignable"])?;
    for (day, a) in &report.states_assignable_per_day {
        let u = report.states_unassignable_per_day.get(day).copied().unwrap_or(0);
        w.write_record([day.to_string(), a.to_string(), u.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn write_shares_csv<W: std::io::Write>(report: &EvaluationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "estimated_share", "ground_truth_share"])?;
    let labels: std::collections::BTreeSet<&String> =
        report.energy_shares.keys().chain(report.ground_truth_shares.keys()).collect();
    for label in labels {
        let est = report.energy_shares.get(label).copied().unwrap_or(0.0);
        let gt = report.ground_truth_shares.get(label).copied().unwrap_or(0.0);
        w.write_record([label.clone(), est.to_string(), gt.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

impl EvaluationReport {
    /// Plain-text summary.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "total_energy_estimated_kwh = {:.6}", self.total_energy_estimated);
        let _ = writeln!(s, "total_energy_actual_kwh = {:.6}", self.total_energy_actual);
        let _ = writeln!(s, "energy_error_fraction = {:.6}", self.energy_error_fraction);
        for (label, r) in &self.per_appliance_rmse {
            let _ = writeln!(s, "rmse_w[{label}] = {r:.3}");
        }
        for (label, share) in &self.energy_shares {
            let _ = writeln!(s, "estimated_share[{label}] = {share:.4}");
        }
        for (label, share) in &self.ground_truth_shares {
            let _ = writeln!(s, "ground_truth_share[{label}] = {share:.4}");
        }
        for (est, va) in &self.assignments {
            let _ = writeln!(s, "assignment[{est}] = {va}");
        }
        s
    }
}
