//! The evolving appliance database.
//!
//! Every appliance is a two-state HMM: OFF observes 0 W, ON observes the
//! learned `on_power`, and every chain starts OFF. After each window the
//! detected power states are merged into existing models (nearest model
//! closer than `merge_threshold`) or become new models. Models left too close
//! by the EMA update are merged pairwise, nearest first, and rarely seen
//! stale models are pruned.
//!
//! # Persistence format
//!
//! A JSON document:
//!
//! ```text
//! {
//!   "format": "nilm-appliance-db",
//!   "version": 1,
//!   "current_day": 4,
//!   "next_id": 7,
//!   "config": { "merge_threshold": 50.0, ... },
//!   "models": [
//!     { "id": 1, "on_power": 201.3,
//!       "transition": [[0.99, 0.01], [0.01, 0.99]],
//!       "initial": [1.0, 0.0],
//!       "metadata": { "first_seen_day": 0, "last_seen_day": 3,
//!                     "appearances_per_day": { "0": 6, "3": 4 },
//!                     "energy_estimate_per_day": { "1": 1.2 },
//!                     "operational_seconds_per_day": { "1": 21480 } } }
//!   ]
//! }
//! ```
//!
//! Loading re-checks every model invariant and the pairwise separation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::state_cluster::PowerState;
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "nilm-appliance-db";
pub const FORMAT_VERSION: u32 = 1;

const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApplianceId(pub u64);

impl std::fmt::Display for ApplianceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplianceMetadata {
    pub first_seen_day: u32,
    pub last_seen_day: u32,
    pub appearances_per_day: BTreeMap<u32, u32>,
    pub energy_estimate_per_day: BTreeMap<u32, f64>,
    pub operational_seconds_per_day: BTreeMap<u32, u64>,
}

impl ApplianceMetadata {
    fn first_seen(day: u32, appearances: u32) -> Self {
        Self {
            first_seen_day: day,
            last_seen_day: day,
            appearances_per_day: BTreeMap::from([(day, appearances)]),
            ..Self::default()
        }
    }

    pub fn total_appearances(&self) -> u64 {
        self.appearances_per_day.values().map(|&c| c as u64).sum()
    }

    fn record_appearance(&mut self, day: u32, count: u32) {
        *self.appearances_per_day.entry(day).or_default() += count;
        self.first_seen_day = self.first_seen_day.min(day);
        self.last_seen_day = self.last_seen_day.max(day);
    }

    fn absorb(&mut self, other: &ApplianceMetadata) {
        self.first_seen_day = self.first_seen_day.min(other.first_seen_day);
        self.last_seen_day = self.last_seen_day.max(other.last_seen_day);
        for (&d, &c) in &other.appearances_per_day {
            *self.appearances_per_day.entry(d).or_default() += c;
        }
        for (&d, &e) in &other.energy_estimate_per_day {
            *self.energy_estimate_per_day.entry(d).or_default() += e;
        }
        for (&d, &s) in &other.operational_seconds_per_day {
            *self.operational_seconds_per_day.entry(d).or_default() += s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceModel {
    pub id: ApplianceId,
    pub on_power: f64,
    /// Row-stochastic, indexed `[from][to]` with 0 = OFF, 1 = ON.
    pub transition: [[f64; 2]; 2],
    pub initial: [f64; 2],
    pub metadata: ApplianceMetadata,
}

impl ApplianceModel {
    /// Observation (watts) of the OFF and ON state.
    pub fn observations(&self) -> [f64; 2] {
        [0.0, self.on_power]
    }

    pub fn stay_probability(&self) -> f64 {
        self.transition[0][0]
    }

    fn check(&self) -> Result<()> {
        let fail = |what: String| Err(Error::Integrity(format!("model {}: {what}", self.id)));
        if !(self.on_power.is_finite() && self.on_power > 0.0) {
            return fail(format!("on_power must be > 0, got {}", self.on_power));
        }
        for (r, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return fail(format!("transition row {r} has entries outside [0, 1]"));
            }
            if (row[0] + row[1] - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return fail(format!("transition row {r} does not sum to 1"));
            }
        }
        if self.initial != [1.0, 0.0] {
            return fail("initial state must be OFF with probability 1".into());
        }
        let md = &self.metadata;
        if md.last_seen_day < md.first_seen_day {
            return fail("last_seen_day precedes first_seen_day".into());
        }
        if md.energy_estimate_per_day.values().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return fail("negative or non-finite energy estimate".into());
        }
        Ok(())
    }
}

fn check_stay_probability(stay: f64) -> Result<()> {
    if !(stay > 0.0 && stay < 1.0) {
        return Err(Error::Config(format!(
            "stay probability must lie in (0, 1), got {stay}"
        )));
    }
    Ok(())
}

/// Builds the symmetric two-state HMM for a detected power state.
pub fn make_hmm(id: ApplianceId, state: &PowerState, stay_prob: f64, day: u32) -> Result<ApplianceModel> {
    if !(state.nominal_power.is_finite() && state.nominal_power > 0.0) {
        return Err(Error::InvalidState(format!(
            "nominal power must be > 0, got {}",
            state.nominal_power
        )));
    }
    check_stay_probability(stay_prob)?;
    let flip = 1.0 - stay_prob;
    Ok(ApplianceModel {
        id,
        on_power: state.nominal_power,
        transition: [[stay_prob, flip], [flip, stay_prob]],
        initial: [1.0, 0.0],
        metadata: ApplianceMetadata::first_seen(day, state.support),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbConfig {
    pub merge_threshold: f64,
    pub prune_min_total_appearances: u64,
    pub prune_stale_days: u32,
    pub ema_weight: f64,
    pub stay_prob: f64,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self {
            merge_threshold: 50.0,
            prune_min_total_appearances: 3,
            prune_stale_days: 7,
            ema_weight: 0.3,
            stay_prob: 0.99,
        }
    }
}

impl DbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.merge_threshold > 0.0) {
            return Err(Error::Config("merge_threshold must be > 0".into()));
        }
        if !(self.ema_weight > 0.0 && self.ema_weight <= 1.0) {
            return Err(Error::Config("ema_weight must lie in (0, 1]".into()));
        }
        check_stay_probability(self.stay_prob)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub day: u32,
    pub created: Vec<ApplianceId>,
    pub merged: Vec<ApplianceId>,
    /// `(absorbed, survivor)` for models merged after drifting too close.
    pub absorbed: Vec<(ApplianceId, ApplianceId)>,
    pub pruned: Vec<ApplianceId>,
    /// Database content after the update, ascending by power.
    pub models: Vec<(ApplianceId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplianceDatabase {
    models: Vec<ApplianceModel>,
    current_day: u32,
    next_id: u64,
    config: DbConfig,
}

#[derive(Serialize, Deserialize)]
struct DbFile {
    format: String,
    version: u32,
    current_day: u32,
    next_id: u64,
    config: DbConfig,
    models: Vec<ApplianceModel>,
}

impl ApplianceDatabase {
    pub fn new(config: DbConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            models: Vec::new(),
            current_day: 0,
            next_id: 1,
            config,
        })
    }

    /// Models ascending by `(on_power, id)`.
    pub fn models(&self) -> &[ApplianceModel] {
        &self.models
    }

    pub fn model(&self, id: ApplianceId) -> Option<&ApplianceModel> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn current_day(&self) -> u32 {
        self.current_day
    }

    pub fn config(&self) -> &DbConfig {
        &self.config
    }

    fn sort(&mut self) {
        self.models
            .sort_by(|a, b| a.on_power.total_cmp(&b.on_power).then(a.id.cmp(&b.id)));
    }

    fn allocate_id(&mut self) -> ApplianceId {
        let id = ApplianceId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Inserts a pre-built model, e.g. for fixtures or migrations.
    pub fn insert(&mut self, mut model: ApplianceModel) -> Result<ApplianceId> {
        model.check()?;
        if self.models.iter().any(|m| m.id == model.id) {
            return Err(Error::Integrity(format!("duplicate id {}", model.id)));
        }
        if let Some(m) = self
            .models
            .iter()
            .find(|m| (m.on_power - model.on_power).abs() < self.config.merge_threshold)
        {
            return Err(Error::Integrity(format!(
                "model at {} W is within {} W of model {}",
                model.on_power, self.config.merge_threshold, m.id
            )));
        }
        if model.id.0 == 0 {
            model.id = self.allocate_id();
        }
        self.next_id = self.next_id.max(model.id.0 + 1);
        let id = model.id;
        self.models.push(model);
        self.sort();
        Ok(id)
    }

    /// Adds disaggregator-derived usage for one day.
    pub fn record_usage(&mut self, id: ApplianceId, day: u32, on_seconds: u64, energy_kwh: f64) {
        if let Some(m) = self.models.iter_mut().find(|m| m.id == id) {
            let md = &mut m.metadata;
            *md.operational_seconds_per_day.entry(day).or_default() += on_seconds;
            *md.energy_estimate_per_day.entry(day).or_default() += energy_kwh;
        }
    }

    /// Folds one window's power states into the database.
    pub fn update(&mut self, states: &[PowerState], day: u32) -> Result<UpdateReport> {
        if day < self.current_day {
            return Err(Error::Ordering {
                day,
                current: self.current_day,
            });
        }
        self.current_day = day;
        let mut report = UpdateReport {
            day,
            ..UpdateReport::default()
        };
        let threshold = self.config.merge_threshold;
        let alpha = self.config.ema_weight;

        // Canonical batch order makes the result independent of input order.
        let mut batch: Vec<&PowerState> = states.iter().filter(|s| s.nominal_power > 0.0).collect();
        batch.sort_by(|a, b| {
            a.nominal_power
                .total_cmp(&b.nominal_power)
                .then(a.support.cmp(&b.support))
                .then(a.bin_span.cmp(&b.bin_span))
        });

        for state in batch {
            let nearest = self
                .models
                .iter_mut()
                .map(|m| ((m.on_power - state.nominal_power).abs(), m))
                .filter(|(d, _)| *d < threshold)
                .min_by(|(da, a), (db, b)| da.total_cmp(db).then(a.on_power.total_cmp(&b.on_power)));
            match nearest {
                Some((_, model)) => {
                    model.on_power = (1.0 - alpha) * model.on_power + alpha * state.nominal_power;
                    model.metadata.record_appearance(day, state.support);
                    if !report.merged.contains(&model.id) {
                        report.merged.push(model.id);
                    }
                }
                None => {
                    let id = self.allocate_id();
                    self.models.push(make_hmm(id, state, self.config.stay_prob, day)?);
                    report.created.push(id);
                }
            }
            self.sort();
        }

        report.absorbed = self.resolve_conflicts();

        let stale = self.config.prune_stale_days as i64;
        let min_total = self.config.prune_min_total_appearances;
        self.models.retain(|m| {
            let keep = (m.metadata.last_seen_day as i64) >= day as i64 - stale
                || m.metadata.total_appearances() >= min_total;
            if !keep {
                report.pruned.push(m.id);
            }
            keep
        });

        report.models = self.models.iter().map(|m| (m.id, m.on_power)).collect();
        Ok(report)
    }

    /// Merges the closest pair below the threshold until none is left. The
    /// lower id survives; power is the appearance-weighted mean.
    fn resolve_conflicts(&mut self) -> Vec<(ApplianceId, ApplianceId)> {
        let mut absorbed = Vec::new();
        loop {
            // Sorted by power, so the closest pair is adjacent.
            let closest = self
                .models
                .windows(2)
                .enumerate()
                .map(|(i, w)| (w[1].on_power - w[0].on_power, i))
                .filter(|(d, _)| *d < self.config.merge_threshold)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let Some((_, i)) = closest else { break };
            let (lo, hi) = (self.models[i].clone(), self.models[i + 1].clone());
            let (mut survivor, gone) = if lo.id < hi.id { (lo, hi) } else { (hi, lo) };
            let ws = survivor.metadata.total_appearances().max(1) as f64;
            let wg = gone.metadata.total_appearances().max(1) as f64;
            survivor.on_power = (ws * survivor.on_power + wg * gone.on_power) / (ws + wg);
            survivor.metadata.absorb(&gone.metadata);
            absorbed.push((gone.id, survivor.id));
            self.models.splice(i..=i + 1, [survivor]);
            self.sort();
        }
        absorbed
    }

    /// Checks ids, per-model invariants and pairwise separation.
    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        let mut ids: Vec<ApplianceId> = self.models.iter().map(|m| m.id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Integrity("appliance ids are not unique".into()));
        }
        if ids.last().is_some_and(|id| id.0 >= self.next_id) {
            return Err(Error::Integrity("next_id is not above every model id".into()));
        }
        for m in &self.models {
            m.check()?;
        }
        let mut powers: Vec<f64> = self.models.iter().map(|m| m.on_power).collect();
        powers.sort_by(f64::total_cmp);
        if let Some(w) = powers.windows(2).find(|w| w[1] - w[0] < self.config.merge_threshold) {
            return Err(Error::Integrity(format!(
                "models at {} W and {} W violate the {} W separation",
                w[0], w[1], self.config.merge_threshold
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DbFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            current_day: self.current_day,
            next_id: self.next_id,
            config: self.config.clone(),
            models: self.models.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    /// Parses and validates a database document. A blank document is the
    /// empty database with default configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Self::new(DbConfig::default());
        }
        let doc: DbFile =
            serde_json::from_str(text).map_err(|e| Error::Integrity(format!("malformed database: {e}")))?;
        if doc.format != FORMAT_NAME {
            return Err(Error::Integrity(format!("unexpected format '{}'", doc.format)));
        }
        if doc.version != FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported version {}", doc.version)));
        }
        let mut db = Self {
            models: doc.models,
            current_day: doc.current_day,
            next_id: doc.next_id,
            config: doc.config,
        };
        db.validate()?;
        db.sort();
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Ordered set of appliance chains whose observations add up.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fhmm {
    models: Vec<ApplianceModel>,
}

impl Fhmm {
    pub fn new(mut models: Vec<ApplianceModel>) -> Self {
        models.sort_by(|a, b| a.on_power.total_cmp(&b.on_power).then(a.id.cmp(&b.id)));
        Self { models }
    }

    pub fn models(&self) -> &[ApplianceModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn joint_state_count(&self) -> usize {
        1usize << self.models.len()
    }

    /// Aggregate observation of a joint state given as an ON bitmask.
    pub fn joint_power(&self, mask: u64) -> f64 {
        self.models
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, m)| m.on_power)
            .sum()
    }

    /// Aggregate observation of every joint state, indexed by bitmask.
    pub fn joint_observations(&self) -> Vec<f64> {
        (0..self.joint_state_count() as u64).map(|x| self.joint_power(x)).collect()
    }
}

pub fn compose_fhmm(db: &ApplianceDatabase) -> Fhmm {
    Fhmm::new(db.models.clone())
}
