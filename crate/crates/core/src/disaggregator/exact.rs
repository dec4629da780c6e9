use super::{validate_observation, DisaggregationEstimate, JointState};
use crate::appliance_db::Fhmm;
use crate::{Error, Result};

pub const DEFAULT_EXACT_LIMIT: usize = 12;

/// Exact forward filter over all `2^N` joint states.
///
/// Uses the same chains and Gaussian likelihood as [`super::ParticleFilter`],
/// so it serves as the reference posterior when validating the particle
/// approximation. The prediction step exploits chain independence and costs
/// `O(N 2^N)` per sample.
#[derive(Debug, Clone)]
pub struct ExactFilter {
    fhmm: Fhmm,
    noise_stddev: f64,
    posterior: Vec<f64>,
    joint_powers: Vec<f64>,
    log_lik: Vec<f64>,
}

impl ExactFilter {
    pub fn new(fhmm: Fhmm, noise_stddev: f64, limit: usize) -> Result<Self> {
        if fhmm.len() > limit {
            return Err(Error::Capability {
                limit,
                requested: fhmm.len(),
            });
        }
        if !(noise_stddev > 0.0 && noise_stddev.is_finite()) {
            return Err(Error::Config("observation noise stddev must be > 0".into()));
        }
        let joint_powers = fhmm.joint_observations();
        let mut posterior = vec![0.0; joint_powers.len()];
        posterior[0] = 1.0;
        Ok(Self {
            log_lik: vec![0.0; joint_powers.len()],
            fhmm,
            noise_stddev,
            posterior,
            joint_powers,
        })
    }

    pub fn fhmm(&self) -> &Fhmm {
        &self.fhmm
    }

    /// Filtering posterior indexed by joint-state bitmask.
    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    fn predict(&mut self) {
        for (i, model) in self.fhmm.models().iter().enumerate() {
            let t = model.transition;
            let bit = 1usize << i;
            for x0 in (0..self.posterior.len()).filter(|x| x & bit == 0) {
                let x1 = x0 | bit;
                let (off, on) = (self.posterior[x0], self.posterior[x1]);
                self.posterior[x0] = off * t[0][0] + on * t[1][0];
                self.posterior[x1] = off * t[0][1] + on * t[1][1];
            }
        }
    }

    pub fn step(&mut self, observation: f64) -> Result<&[f64]> {
        validate_observation(observation)?;
        self.predict();
        let inv_two_var = 0.5 / (self.noise_stddev * self.noise_stddev);
        let mut best = f64::NEG_INFINITY;
        for (x, &mu) in self.joint_powers.iter().enumerate() {
            let r = observation - mu;
            self.log_lik[x] = -r * r * inv_two_var;
            if self.posterior[x] > 0.0 {
                best = best.max(self.log_lik[x]);
            }
        }
        let mut total = 0.0;
        for (p, ll) in self.posterior.iter_mut().zip(&self.log_lik) {
            *p *= (ll - best).exp();
            total += *p;
        }
        for p in &mut self.posterior {
            *p /= total;
        }
        Ok(&self.posterior)
    }

    pub fn on_probabilities(&self) -> Vec<f64> {
        (0..self.fhmm.len())
            .map(|i| {
                self.posterior
                    .iter()
                    .enumerate()
                    .filter(|(x, _)| x >> i & 1 == 1)
                    .map(|(_, p)| p)
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Most probable joint state; ties go to the lower mask.
    pub fn map_state(&self) -> JointState {
        let mut best = 0;
        for (x, &p) in self.posterior.iter().enumerate() {
            if p > self.posterior[best] {
                best = x;
            }
        }
        JointState(best as u64)
    }

    pub fn estimate(&self, timestamp: i64, decision_threshold: f64) -> DisaggregationEstimate {
        DisaggregationEstimate::from_marginals(timestamp, &self.fhmm, &self.on_probabilities(), decision_threshold)
    }
}
