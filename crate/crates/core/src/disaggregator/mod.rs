//! Per-sample appliance state estimation over the factorial HMM.
//!
//! Both filters share one model: each chain flips according to its own
//! transition matrix, and the aggregate observation is Gaussian around the
//! sum of ON powers with stddev `observation_noise_stddev`. Only the current
//! sample is used; there is no smoothing or lookahead.

mod exact;
mod particle;

pub use exact::{ExactFilter, DEFAULT_EXACT_LIMIT};
pub use particle::{Particle, ParticleFilter};

use serde::{Deserialize, Serialize};

use crate::appliance_db::ApplianceId;
use crate::{Error, Result};

/// Joint ON/OFF assignment in FHMM order; bit `i` set means appliance `i` is ON.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JointState(pub u64);

impl JointState {
    pub const ALL_OFF: JointState = JointState(0);

    pub fn is_on(self, appliance: usize) -> bool {
        self.0 >> appliance & 1 == 1
    }

    pub fn states(self, appliances: usize) -> Vec<ApplianceState> {
        (0..appliances)
            .map(|i| if self.is_on(i) { ApplianceState::On } else { ApplianceState::Off })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplianceState {
    Off,
    On,
}

impl std::fmt::Display for ApplianceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ApplianceState::Off => "off",
            ApplianceState::On => "on",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfConfig {
    pub particle_count: usize,
    pub observation_noise_stddev: f64,
    /// Resample when the effective sample size drops below this fraction of N.
    pub resample_threshold: f64,
    pub decision_threshold: f64,
    pub rng_seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            particle_count: 1000,
            observation_noise_stddev: 25.0,
            resample_threshold: 0.5,
            decision_threshold: 0.5,
            rng_seed: 0,
        }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count == 0 {
            return Err(Error::Config("particle_count must be >= 1".into()));
        }
        if !(self.observation_noise_stddev > 0.0 && self.observation_noise_stddev.is_finite()) {
            return Err(Error::Config("observation_noise_stddev must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config("resample_threshold must lie in [0, 1]".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config("decision_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceEstimate {
    pub id: ApplianceId,
    pub on_probability: f64,
    pub state: ApplianceState,
    pub estimated_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisaggregationEstimate {
    pub timestamp: i64,
    pub per_appliance: Vec<ApplianceEstimate>,
    pub total_estimated_power: f64,
}

impl DisaggregationEstimate {
    pub(crate) fn from_marginals(
        timestamp: i64,
        fhmm: &crate::appliance_db::Fhmm,
        on_probabilities: &[f64],
        decision_threshold: f64,
    ) -> Self {
        let mut total = 0.0;
        let per_appliance = fhmm
            .models()
            .iter()
            .zip(decide(on_probabilities, decision_threshold))
            .zip(on_probabilities)
            .map(|((model, state), &p)| {
                let estimated_power = if state == ApplianceState::On { model.on_power } else { 0.0 };
                total += estimated_power;
                ApplianceEstimate {
                    id: model.id,
                    on_probability: p,
                    state,
                    estimated_power,
                }
            })
            .collect();
        Self {
            timestamp,
            per_appliance,
            total_estimated_power: total,
        }
    }
}

/// Threshold decision maker: ON iff `P(on) >= threshold`.
pub fn decide(on_probabilities: &[f64], threshold: f64) -> Vec<ApplianceState> {
    on_probabilities
        .iter()
        .map(|&p| if p >= threshold { ApplianceState::On } else { ApplianceState::Off })
        .collect()
}

pub(crate) fn validate_observation(observation: f64) -> Result<()> {
    if !observation.is_finite() || observation < 0.0 {
        return Err(Error::Input(format!(
            "observation must be finite and non-negative, got {observation}"
        )));
    }
    Ok(())
}
