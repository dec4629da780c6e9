//! Window-by-window driver tying the stages together.
//!
//! Every sample is classified by the particle filter against the models known
//! when the sample arrives. Learning runs when a window closes, so models
//! learned from window `k` are used from the first sample of window `k + 1`.
//! Windows are aligned to `first timestamp + k * window_length`; a gap in the
//! timestamps also closes the current window. The day index passed to the
//! database is the aligned window number, so a day split by a gap keeps a
//! single index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::appliance_db::{compose_fhmm, ApplianceDatabase, ApplianceId, DbConfig, UpdateReport};
use crate::disaggregator::{ApplianceState, DisaggregationEstimate, ParticleFilter, PfConfig};
use crate::edge_detect::{detect_edges, pair_edges, Direction, EdgeConfig, EdgeEvent, EdgePair, MIN_PARTIAL_WINDOW_S};
use crate::evaluation::EvalConfig;
use crate::preprocess::{smooth, FilterConfig};
use crate::state_cluster::{build_histogram, segment, ClusterConfig, PowerState, StateHistogram};
use crate::trace_io::{validate_samples, PowerSample};
use crate::{watt_seconds_to_kwh, Error, Result, Stage};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub edges: EdgeConfig,
    pub cluster: ClusterConfig,
    pub db: DbConfig,
    pub pf: PfConfig,
    pub evaluation: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.edges.validate()?;
        self.cluster.validate()?;
        self.db.validate()?;
        self.pf.validate()?;
        self.evaluation.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: u32,
    pub day: u32,
    /// First and last timestamps, inclusive.
    pub start: i64,
    pub end: i64,
    pub samples: usize,
    /// False when the window was too short to learn from.
    pub learned: bool,
    pub edges: usize,
    /// Rising edges carried in from the previous window.
    pub carried_in: usize,
    pub pairs: usize,
    pub states: Vec<PowerState>,
    pub update: Option<UpdateReport>,
}

/// Intermediate results of one learned window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowLearning {
    pub edges: Vec<EdgeEvent>,
    pub pairs: Vec<EdgePair>,
    pub histogram: StateHistogram,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimates: Vec<DisaggregationEstimate>,
    pub database: ApplianceDatabase,
    pub reports: Vec<WindowReport>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Usage {
    on_seconds: u64,
    watt_seconds: f64,
}

/// Incremental pipeline: feed samples with [`OnlinePipeline::push`], then
/// call [`OnlinePipeline::finish`].
#[derive(Debug)]
pub struct OnlinePipeline {
    config: PipelineConfig,
    db: ApplianceDatabase,
    /// `None` in learning-only mode.
    pf: Option<ParticleFilter>,
    keep_learning: bool,
    last_learning: Option<WindowLearning>,
    origin: Option<i64>,
    /// Exclusive end of the current window, on the aligned grid.
    window_end: i64,
    window: Vec<PowerSample>,
    carry: Vec<EdgeEvent>,
    usage: BTreeMap<ApplianceId, Usage>,
    reports: Vec<WindowReport>,
}

impl OnlinePipeline {
    pub fn new(config: PipelineConfig, initial_db: Option<ApplianceDatabase>) -> Result<Self> {
        config.validate()?;
        let db = match initial_db {
            Some(db) => {
                db.validate()?;
                db
            }
            None => ApplianceDatabase::new(config.db.clone())?,
        };
        let pf = ParticleFilter::new(compose_fhmm(&db), config.pf.clone())
            .map_err(|e| e.in_stage(Stage::Disaggregation))?;
        Self::build(config, db, Some(pf))
    }

    fn build(config: PipelineConfig, db: ApplianceDatabase, pf: Option<ParticleFilter>) -> Result<Self> {
        Ok(Self {
            config,
            db,
            pf,
            keep_learning: false,
            last_learning: None,
            origin: None,
            window_end: 0,
            window: Vec::new(),
            carry: Vec::new(),
            usage: BTreeMap::new(),
            reports: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn database(&self) -> &ApplianceDatabase {
        &self.db
    }

    pub fn reports(&self) -> &[WindowReport] {
        &self.reports
    }

    fn window_len(&self) -> i64 {
        self.config.edges.window_length
    }

    fn day_of(&self, t: i64) -> u32 {
        ((t - self.origin.unwrap_or(t)) / self.window_len()) as u32
    }

    /// Classifies one sample, closing the current window first when the
    /// sample falls past its end or after a gap.
    pub fn push(&mut self, sample: PowerSample) -> Result<DisaggregationEstimate> {
        self.admit(sample)?;
        let pf = self.pf.as_mut().expect("push requires a particle filter");
        let estimate = pf
            .step(sample.timestamp, sample.power)
            .map_err(|e| e.in_stage(Stage::Disaggregation))?;
        for a in &estimate.per_appliance {
            if a.state == ApplianceState::On {
                let u = self.usage.entry(a.id).or_default();
                u.on_seconds += 1;
                u.watt_seconds += a.estimated_power;
            }
        }
        Ok(estimate)
    }

    fn admit(&mut self, sample: PowerSample) -> Result<()> {
        if !sample.power.is_finite() || sample.power < 0.0 {
            return Err(Error::Input(format!(
                "sample at {} has invalid power {}",
                sample.timestamp, sample.power
            )));
        }
        let origin = *self.origin.get_or_insert(sample.timestamp);
        if let Some(last) = self.window.last() {
            if sample.timestamp <= last.timestamp {
                return Err(Error::Input(format!(
                    "timestamp {} does not advance past {}",
                    sample.timestamp, last.timestamp
                )));
            }
            let gap = sample.timestamp > last.timestamp + 1;
            if gap || sample.timestamp >= self.window_end {
                self.close_window(gap)?;
            }
        }
        if self.window.is_empty() {
            let k = (sample.timestamp - origin) / self.window_len();
            self.window_end = origin + (k + 1) * self.window_len();
        }
        self.window.push(sample);
        Ok(())
    }

    fn close_window(&mut self, closed_by_gap: bool) -> Result<()> {
        let samples = std::mem::take(&mut self.window);
        let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
            return Ok(());
        };
        let day = self.day_of(first.timestamp);
        for (id, u) in std::mem::take(&mut self.usage) {
            self.db.record_usage(id, day, u.on_seconds, watt_seconds_to_kwh(u.watt_seconds));
        }
        let mut report = WindowReport {
            window: self.reports.len() as u32,
            day,
            start: first.timestamp,
            end: last.timestamp,
            samples: samples.len(),
            learned: false,
            edges: 0,
            carried_in: 0,
            pairs: 0,
            states: Vec::new(),
            update: None,
        };
        let span = last.timestamp - first.timestamp + 1;
        if span < MIN_PARTIAL_WINDOW_S.min(self.window_len()) || samples.len() < self.config.filter.median_window {
            self.carry.clear();
            self.reports.push(report);
            return Ok(());
        }

        let powers: Vec<f64> = samples.iter().map(|s| s.power).collect();
        let filtered = smooth(&powers, &self.config.filter).map_err(|e| e.in_stage(Stage::Preprocess))?;
        let filtered: Vec<PowerSample> = samples
            .iter()
            .zip(filtered)
            .map(|(s, p)| PowerSample::new(s.timestamp, p))
            .collect();
        let fresh = detect_edges(&filtered, &self.config.edges);
        let carried = std::mem::take(&mut self.carry);
        let mut edges = carried.clone();
        edges.extend(fresh.iter().copied());
        let pairing = pair_edges(&edges, &self.config.edges);
        // Rising edges of this window still open may close in the next one;
        // carried edges expire after one extra window.
        if !closed_by_gap {
            self.carry = pairing
                .unmatched
                .iter()
                .filter(|e| e.direction == Direction::Rising && e.time >= first.timestamp)
                .copied()
                .collect();
        }
        let hist = build_histogram(&pairing.pairs);
        let states = segment(&hist, &self.config.cluster);
        let update = self
            .db
            .update(&states, day)
            .map_err(|e| e.in_stage(Stage::DatabaseUpdate))?;
        if let Some(pf) = self.pf.as_mut() {
            pf.replace_models(compose_fhmm(&self.db))
                .map_err(|e| e.in_stage(Stage::Disaggregation))?;
        }

        report.learned = true;
        report.edges = fresh.len();
        report.carried_in = carried.len();
        report.pairs = pairing.pairs.len();
        report.states = states;
        report.update = Some(update);
        self.reports.push(report);
        if self.keep_learning {
            self.last_learning = Some(WindowLearning {
                edges: fresh,
                pairs: pairing.pairs,
                histogram: hist,
            });
        }
        Ok(())
    }

    /// Closes the last window and returns the learned database and reports.
    pub fn finish(mut self) -> Result<(ApplianceDatabase, Vec<WindowReport>)> {
        self.close_window(false)?;
        Ok((self.db, self.reports))
    }
}

/// Runs only the learning stages over a trace, with the same windowing as
/// [`run_online`]. `on_window` sees every learned window's intermediates.
pub fn detect_states(
    trace: &[PowerSample],
    config: &PipelineConfig,
    initial_db: Option<ApplianceDatabase>,
    mut on_window: impl FnMut(&WindowReport, &WindowLearning) -> Result<()>,
) -> Result<(ApplianceDatabase, Vec<WindowReport>)> {
    validate_samples(trace)?;
    config.validate()?;
    let db = match initial_db {
        Some(db) => {
            db.validate()?;
            db
        }
        None => ApplianceDatabase::new(config.db.clone())?,
    };
    let mut p = OnlinePipeline::build(config.clone(), db, None)?;
    p.keep_learning = true;
    let mut seen = 0;
    let mut drain = |p: &mut OnlinePipeline, seen: &mut usize| -> Result<()> {
        while *seen < p.reports.len() {
            let report = &p.reports[*seen];
            if report.learned {
                let learning = p.last_learning.take().expect("learned window keeps its intermediates");
                on_window(report, &learning)?;
            }
            *seen += 1;
        }
        Ok(())
    };
    for &s in trace {
        p.admit(s)?;
        drain(&mut p, &mut seen)?;
    }
    p.close_window(false)?;
    drain(&mut p, &mut seen)?;
    Ok((p.db, p.reports))
}

/// Runs the pipeline over a whole trace, handing each estimate to `sink`.
pub fn run_online_with(
    trace: &[PowerSample],
    config: &PipelineConfig,
    initial_db: Option<ApplianceDatabase>,
    mut sink: impl FnMut(&DisaggregationEstimate) -> Result<()>,
) -> Result<(ApplianceDatabase, Vec<WindowReport>)> {
    validate_samples(trace)?;
    let mut pipeline = OnlinePipeline::new(config.clone(), initial_db)?;
    for &s in trace {
        sink(&pipeline.push(s)?)?;
    }
    pipeline.finish()
}

pub fn run_online(trace: &[PowerSample], config: &PipelineConfig, initial_db: Option<ApplianceDatabase>) -> Result<RunOutput> {
    let mut estimates = Vec::with_capacity(trace.len());
    let (database, reports) = run_online_with(trace, config, initial_db, |e| {
        estimates.push(e.clone());
        Ok(())
    })?;
    Ok(RunOutput {
        estimates,
        database,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::{generate_synthetic, ApplianceSpec};

    fn fast_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.pf.particle_count = 200;
        c
    }

    #[test]
    fn flat_trace_learns_nothing() {
        let trace: Vec<PowerSample> = (0..2 * 86_400).map(|t| PowerSample::new(t, 0.0)).collect();
        let out = run_online(&trace, &fast_config(), None).unwrap();
        assert!(out.database.is_empty());
        assert_eq!(out.reports.len(), 2);
        assert!(out.estimates.iter().all(|e| e.total_estimated_power == 0.0));
        assert_eq!(out.estimates.len(), trace.len());
    }

    #[test]
    fn two_appliances_learned_on_day_one() {
        let specs = vec![
            ApplianceSpec {
                label: "fridge".into(),
                on_power: 200.0,
                mean_on_duration: 900.0,
                activations_per_day: 12.0,
                noise_stddev: 3.0,
            },
            ApplianceSpec {
                label: "kettle".into(),
                on_power: 1500.0,
                mean_on_duration: 240.0,
                activations_per_day: 6.0,
                noise_stddev: 3.0,
            },
        ];
        let trace = generate_synthetic(&specs, 3, 11).unwrap();
        let out = run_online(&trace.samples, &fast_config(), None).unwrap();
        assert_eq!(out.reports.len(), 3);
        let day1 = out.reports[0].update.as_ref().unwrap();
        assert_eq!(day1.created.len(), 2, "{:?}", day1);
        // Day-1 estimates come from an empty database.
        assert!(out.estimates[..86_400].iter().all(|e| e.per_appliance.is_empty()));
        assert!(out.estimates[86_400].per_appliance.len() == 2);
        let powers: Vec<f64> = out.database.models().iter().map(|m| m.on_power).collect();
        assert!((powers[0] - 200.0).abs() < 25.0 && (powers[1] - 1500.0).abs() < 25.0, "{powers:?}");
        let tracked = trace.samples[86_400..]
            .iter()
            .zip(&out.estimates[86_400..])
            .filter(|(s, e)| (s.power - e.total_estimated_power).abs() < 100.0)
            .count();
        assert!(tracked as f64 > 0.95 * (2.0 * 86_400.0), "{tracked}");
    }

    #[test]
    fn push_matches_batch_and_is_causal() {
        let specs = vec![ApplianceSpec {
            label: "a".into(),
            on_power: 600.0,
            mean_on_duration: 600.0,
            activations_per_day: 30.0,
            noise_stddev: 2.0,
        }];
        let mut cfg = fast_config();
        cfg.edges.window_length = 7200;
        let trace = generate_synthetic(&specs, 1, 5).unwrap();
        let samples = &trace.samples[..5 * 3600];
        let batch = run_online(samples, &cfg, None).unwrap();

        let mut p = OnlinePipeline::new(cfg.clone(), None).unwrap();
        for (i, &s) in samples.iter().enumerate() {
            let e = p.push(s).unwrap();
            assert_eq!(e, batch.estimates[i]);
            // Models visible at sample i were learned from windows ending before it.
            let learned_until = p.reports().last().map_or(i64::MIN, |r| r.end);
            assert!(learned_until < s.timestamp);
        }
        let (db, reports) = p.finish().unwrap();
        assert_eq!(db, batch.database);
        assert_eq!(reports, batch.reports);
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[2].samples, 3600);
    }

    #[test]
    fn learning_only_matches_full_run() {
        let specs = vec![ApplianceSpec {
            label: "a".into(),
            on_power: 900.0,
            mean_on_duration: 300.0,
            activations_per_day: 40.0,
            noise_stddev: 2.0,
        }];
        let mut cfg = fast_config();
        cfg.edges.window_length = 4 * 3600;
        let trace = generate_synthetic(&specs, 1, 9).unwrap();
        let full = run_online(&trace.samples, &cfg, None).unwrap();
        let mut windows = 0;
        let (db, reports) = detect_states(&trace.samples, &cfg, None, |r, l| {
            assert_eq!(r.edges, l.edges.len());
            assert_eq!(u64::from(r.pairs as u32), l.histogram.total());
            windows += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(windows, 6);
        assert_eq!(reports, full.reports);
        assert_eq!(db.models().len(), full.database.models().len());
    }

    #[test]
    fn gaps_close_windows() {
        let mut trace: Vec<PowerSample> = (0..5000).map(|t| PowerSample::new(t, 0.0)).collect();
        trace.extend((6000..20_000).map(|t| PowerSample::new(t, 0.0)));
        let mut cfg = fast_config();
        cfg.edges.window_length = 10_000;
        let out = run_online(&trace, &cfg, None).unwrap();
        let spans: Vec<(i64, i64, u32)> = out.reports.iter().map(|r| (r.start, r.end, r.day)).collect();
        assert_eq!(spans, vec![(0, 4999, 0), (6000, 9999, 0), (10_000, 19_999, 1)]);
    }

    #[test]
    fn errors_carry_stage_and_order() {
        let mut p = OnlinePipeline::new(fast_config(), None).unwrap();
        p.push(PowerSample::new(10, 1.0)).unwrap();
        assert!(matches!(p.push(PowerSample::new(10, 1.0)), Err(Error::Input(_))));
        assert!(matches!(p.push(PowerSample::new(11, f64::NAN)), Err(Error::Input(_))));
        let bad = PipelineConfig {
            pf: PfConfig { particle_count: 0, ..PfConfig::default() },
            ..PipelineConfig::default()
        };
        assert!(matches!(OnlinePipeline::new(bad, None), Err(Error::Config(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
        assert!(PipelineConfig::from_toml("[pf]\nparticles = 3\n").is_err());
        let c = PipelineConfig::from_toml("[pf]\nparticle_count = 10\n").unwrap();
        assert_eq!(c.pf.particle_count, 10);
    }
}
