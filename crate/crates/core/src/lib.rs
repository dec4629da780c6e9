//! Unsupervised, online non-intrusive load monitoring.
//!
//! The crate learns appliance power states from a 1 Hz aggregate active-power
//! stream without any prior appliance knowledge and disaggregates the stream
//! into per-appliance estimates:
//!
//! 1. [`preprocess`] removes noise with a median filter (plus optional moving
//!    average) so switching events become sharp edges.
//! 2. [`edge_detect`] finds rising/falling edges per window and pairs them
//!    into candidate activations.
//! 3. [`state_cluster`] bins pair magnitudes into a 5 W histogram and
//!    segments it into power states.
//! 4. [`appliance_db`] turns power states into two-state HMMs, merges near
//!    duplicates, prunes rare ones and composes the factorial HMM.
//! 5. [`disaggregator`] tracks the factorial HMM posterior per sample with a
//!    particle filter, next to an exact enumeration filter used as an oracle.
//!
//! [`pipeline`] drives the stages window by window, [`evaluation`] scores the
//! output against ground truth and [`trace_io`] loads or synthesises traces.

pub mod appliance_db;
pub mod disaggregator;
pub mod edge_detect;
mod error;
pub mod evaluation;
pub mod export;
pub mod pipeline;
pub mod preprocess;
pub mod state_cluster;
pub mod trace_io;

pub use appliance_db::{
    compose_fhmm, make_hmm, ApplianceDatabase, ApplianceId, ApplianceMetadata, ApplianceModel,
    DbConfig, Fhmm, UpdateReport,
};
pub use disaggregator::{
    decide, ApplianceEstimate, ApplianceState, DisaggregationEstimate, ExactFilter, JointState,
    ParticleFilter, PfConfig,
};
pub use edge_detect::{detect_edges, pair_edges, sliding_windows, EdgeConfig, EdgeEvent, EdgePair};
pub use error::{Error, Result, Stage};
pub use evaluation::{map_states, rmse, EvaluationReport, StateMapping};
pub use pipeline::{run_online, OnlinePipeline, PipelineConfig, RunOutput, WindowReport};
pub use preprocess::{median_filter, smooth, FilterConfig, Smoothing};
pub use state_cluster::{build_histogram, segment, ClusterConfig, PowerState, StateHistogram};
pub use trace_io::{generate_synthetic, load_channel_files, ApplianceSpec, GroundTruthTrace, PowerSample};

/// Seconds per sample at the normalised 1 Hz rate.
pub const SAMPLE_PERIOD_S: f64 = 1.0;

/// Converts a sum of 1 Hz watt samples into kilowatt-hours.
pub fn watt_seconds_to_kwh(watt_seconds: f64) -> f64 {
    watt_seconds / 3.6e6
}
