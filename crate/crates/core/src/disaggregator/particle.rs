use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{validate_observation, DisaggregationEstimate, JointState, PfConfig};
use crate::appliance_db::{ApplianceId, Fhmm};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub joint_state: JointState,
    pub weight: f64,
}

/// Bootstrap particle filter over the factorial HMM.
///
/// Particles start all-OFF with uniform weight. A step propagates every
/// particle through the per-appliance chains, reweights by the Gaussian
/// observation likelihood in log space, and resamples systematically when
/// the effective sample size falls below `resample_threshold * N`. A single
/// seeded ChaCha stream drives all randomness.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    fhmm: Fhmm,
    config: PfConfig,
    rng: ChaCha8Rng,
    states: Vec<u64>,
    log_weights: Vec<f64>,
    on_powers: Vec<f64>,
    /// Probability of leaving OFF / leaving ON, per appliance.
    leave_off: Vec<f64>,
    leave_on: Vec<f64>,
    resampled: Vec<u64>,
}

impl ParticleFilter {
    pub fn new(fhmm: Fhmm, config: PfConfig) -> Result<Self> {
        config.validate()?;
        if fhmm.len() > 64 {
            return Err(Error::Capability {
                limit: 64,
                requested: fhmm.len(),
            });
        }
        let n = config.particle_count;
        let mut pf = Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            states: vec![0; n],
            log_weights: vec![-(n as f64).ln(); n],
            resampled: Vec::with_capacity(n),
            on_powers: Vec::new(),
            leave_off: Vec::new(),
            leave_on: Vec::new(),
            fhmm: Fhmm::default(),
            config,
        };
        pf.install(fhmm);
        Ok(pf)
    }

    fn install(&mut self, fhmm: Fhmm) {
        self.on_powers = fhmm.models().iter().map(|m| m.on_power).collect();
        self.leave_off = fhmm.models().iter().map(|m| m.transition[0][1]).collect();
        self.leave_on = fhmm.models().iter().map(|m| m.transition[1][0]).collect();
        self.fhmm = fhmm;
    }

    pub fn fhmm(&self) -> &Fhmm {
        &self.fhmm
    }

    pub fn config(&self) -> &PfConfig {
        &self.config
    }

    pub fn particles(&self) -> Vec<Particle> {
        self.states
            .iter()
            .zip(&self.log_weights)
            .map(|(&s, &lw)| Particle {
                joint_state: JointState(s),
                weight: lw.exp(),
            })
            .collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|lw| (2.0 * lw).exp()).sum::<f64>()
    }

    fn joint_power(&self, mask: u64) -> f64 {
        let mut total = 0.0;
        let mut bits = mask;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            total += self.on_powers[i];
            bits &= bits - 1;
        }
        total
    }

    /// Advances the filter by one observation and returns the estimate.
    pub fn step(&mut self, timestamp: i64, observation: f64) -> Result<DisaggregationEstimate> {
        validate_observation(observation)?;
        let apps = self.fhmm.len();
        if apps > 0 {
            let inv_two_var = 0.5 / (self.config.observation_noise_stddev * self.config.observation_noise_stddev);
            for k in 0..self.states.len() {
                let mut s = self.states[k];
                for i in 0..apps {
                    let leave = if s >> i & 1 == 1 { self.leave_on[i] } else { self.leave_off[i] };
                    if self.rng.random::<f64>() < leave {
                        s ^= 1 << i;
                    }
                }
                self.states[k] = s;
                let r = observation - self.joint_power(s);
                self.log_weights[k] -= r * r * inv_two_var;
            }
            self.normalize();
            if self.effective_sample_size() < self.config.resample_threshold * self.states.len() as f64 {
                self.resample();
            }
        }
        Ok(DisaggregationEstimate::from_marginals(
            timestamp,
            &self.fhmm,
            &self.on_probabilities(),
            self.config.decision_threshold,
        ))
    }

    fn normalize(&mut self) {
        let max = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.log_weights.iter().map(|lw| (lw - max).exp()).sum();
        let shift = max + sum.ln();
        for lw in &mut self.log_weights {
            *lw -= shift;
        }
    }

    /// Systematic resampling onto uniform weights.
    fn resample(&mut self) {
        let n = self.states.len();
        let step = 1.0 / n as f64;
        let mut target = self.rng.random::<f64>() * step;
        let mut cumulative = 0.0;
        self.resampled.clear();
        for (k, lw) in self.log_weights.iter().enumerate() {
            cumulative += lw.exp();
            while target < cumulative && self.resampled.len() < n {
                self.resampled.push(self.states[k]);
                target += step;
            }
        }
        // Rounding can leave the cumulative sum a hair below 1.
        while self.resampled.len() < n {
            self.resampled.push(self.states[n - 1]);
        }
        std::mem::swap(&mut self.states, &mut self.resampled);
        self.log_weights.fill(-(n as f64).ln());
    }

    /// Marginal `P(on)` per appliance in FHMM order.
    pub fn on_probabilities(&self) -> Vec<f64> {
        let mut probs = vec![0.0; self.fhmm.len()];
        for (&s, &lw) in self.states.iter().zip(&self.log_weights) {
            let w = lw.exp();
            let mut bits = s;
            while bits != 0 {
                probs[bits.trailing_zeros() as usize] += w;
                bits &= bits - 1;
            }
        }
        for p in &mut probs {
            *p = p.clamp(0.0, 1.0);
        }
        probs
    }

    /// Particle approximation of the joint posterior.
    pub fn joint_posterior(&self) -> BTreeMap<JointState, f64> {
        let mut post = BTreeMap::new();
        for (&s, &lw) in self.states.iter().zip(&self.log_weights) {
            *post.entry(JointState(s)).or_insert(0.0) += lw.exp();
        }
        post
    }

    /// Joint state with the largest posterior mass; ties go to the lower mask.
    pub fn map_state(&self) -> JointState {
        self.joint_posterior()
            .into_iter()
            .fold((JointState::ALL_OFF, f64::NEG_INFINITY), |best, (s, w)| if w > best.1 { (s, w) } else { best })
            .0
    }

    /// Swaps in a new model set. Appliances that persist (by id) keep their
    /// per-particle state; new ones start OFF; weights are unchanged.
    pub fn replace_models(&mut self, fhmm: Fhmm) -> Result<()> {
        if fhmm.len() > 64 {
            return Err(Error::Capability {
                limit: 64,
                requested: fhmm.len(),
            });
        }
        let new_index: BTreeMap<ApplianceId, usize> =
            fhmm.models().iter().enumerate().map(|(i, m)| (m.id, i)).collect();
        let remap: Vec<Option<usize>> = self
            .fhmm
            .models()
            .iter()
            .map(|m| new_index.get(&m.id).copied())
            .collect();
        for s in &mut self.states {
            let mut out = 0u64;
            for (old, target) in remap.iter().enumerate() {
                if let Some(new) = target {
                    if *s >> old & 1 == 1 {
                        out |= 1 << new;
                    }
                }
            }
            *s = out;
        }
        self.install(fhmm);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appliance_db::{make_hmm, ApplianceModel};
    use crate::disaggregator::{ApplianceState, ExactFilter};
    use crate::state_cluster::PowerState;

    fn model(id: u64, p: f64, stay: f64) -> ApplianceModel {
        let state = PowerState {
            nominal_power: p,
            support: 2,
            bin_span: (0, 0),
        };
        make_hmm(ApplianceId(id), &state, stay, 0).unwrap()
    }

    fn two_appliances() -> Fhmm {
        Fhmm::new(vec![model(1, 200.0, 0.99), model(2, 800.0, 0.99)])
    }

    #[test]
    fn init_all_off_uniform() {
        let pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        let ps = pf.particles();
        assert_eq!(ps.len(), 1000);
        assert!(ps.iter().all(|p| p.joint_state == JointState::ALL_OFF));
        assert!(ps.iter().all(|p| (p.weight - 1e-3).abs() < 1e-15));
    }

    #[test]
    fn empty_fhmm_estimates_zero() {
        let mut pf = ParticleFilter::new(Fhmm::default(), PfConfig::default()).unwrap();
        for t in 0..10 {
            let est = pf.step(t, 500.0).unwrap();
            assert!(est.per_appliance.is_empty());
            assert_eq!(est.total_estimated_power, 0.0);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let obs: Vec<f64> = (0..500).map(|t| if (t / 50) % 2 == 0 { 0.0 } else { 1000.0 }).collect();
        let run = || {
            let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
            obs.iter().enumerate().map(|(t, &y)| pf.step(t as i64, y).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sustained_zero_keeps_everything_off() {
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        let mut exact = ExactFilter::new(two_appliances(), 25.0, 12).unwrap();
        for t in 0..300 {
            let est = pf.step(t, 0.0).unwrap();
            exact.step(0.0).unwrap();
            assert!(est.per_appliance.iter().all(|a| a.on_probability < 0.05));
        }
        assert!(exact.on_probabilities().iter().all(|&p| p < 0.05));
    }

    #[test]
    fn sustained_sum_turns_both_on() {
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        let mut exact = ExactFilter::new(two_appliances(), 25.0, 12).unwrap();
        let mut last = None;
        for t in 0..300 {
            last = Some(pf.step(t, 1000.0).unwrap());
            exact.step(1000.0).unwrap();
        }
        let est = last.unwrap();
        assert!(est.per_appliance.iter().all(|a| a.state == ApplianceState::On));
        assert_eq!(est.total_estimated_power, 1000.0);
        assert_eq!(pf.map_state(), JointState(0b11));
        assert_eq!(exact.map_state(), JointState(0b11));
    }

    #[test]
    fn equidistant_observation_splits_posterior() {
        let mut exact = ExactFilter::new(two_appliances(), 25.0, 12).unwrap();
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        let mut est = None;
        for t in 0..200 {
            exact.step(500.0).unwrap();
            est = Some(pf.step(t, 500.0).unwrap());
        }
        // Symmetric chains from all-OFF: the exact marginals tie.
        let p = exact.on_probabilities();
        assert!((p[0] - p[1]).abs() < 1e-9, "{p:?}");
        assert!((p[0] - 0.5).abs() < 1e-6, "{p:?}");
        let est = est.unwrap();
        for a in &est.per_appliance {
            assert!(a.on_probability > 0.2 && a.on_probability < 0.8);
            let expected = if a.on_probability >= 0.5 { ApplianceState::On } else { ApplianceState::Off };
            assert_eq!(a.state, expected);
        }
    }

    #[test]
    fn weights_stay_normalized() {
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        for t in 0..400 {
            let y = [0.0, 200.0, 1000.0, 800.0, 3000.0][(t / 80) as usize];
            pf.step(t, y).unwrap();
            let ps = pf.particles();
            let sum: f64 = ps.iter().map(|p| p.weight).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(ps.iter().all(|p| p.weight.is_finite() && p.weight >= 0.0));
        }
    }

    #[test]
    fn rejects_bad_observation() {
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        assert!(pf.step(0, f64::NAN).is_err());
        assert!(pf.step(0, f64::INFINITY).is_err());
        assert!(pf.step(0, -1.0).is_err());
    }

    #[test]
    fn model_swap_carries_persisting_ids() {
        let mut pf = ParticleFilter::new(two_appliances(), PfConfig::default()).unwrap();
        for t in 0..200 {
            pf.step(t, 800.0).unwrap();
        }
        assert!(pf.on_probabilities()[1] > 0.9);
        // Drop appliance 1, keep 2 and add a 500 W appliance between them.
        let swapped = Fhmm::new(vec![model(3, 500.0, 0.99), model(2, 800.0, 0.99)]);
        pf.replace_models(swapped).unwrap();
        let p = pf.on_probabilities();
        assert_eq!(pf.fhmm().models()[0].id, ApplianceId(3));
        assert_eq!(p[0], 0.0);
        assert!(p[1] > 0.9);
    }
}
