//! Python bindings: `import nilm`.
//!
//! Structured results (estimates, reports, models) cross the boundary as
//! plain dicts and lists built from their JSON form.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use nilm_core::evaluation::{self, Assignment};
use nilm_core::{
    appliance_db, compose_fhmm, trace_io, ApplianceDatabase as CoreDb, ApplianceSpec, EdgeConfig, Error,
    ExactFilter as CoreExact, FilterConfig, OnlinePipeline as CorePipeline, ParticleFilter as CorePf, PipelineConfig,
    PowerSample, PowerState,
};

create_exception!(nilm, NilmError, PyException, "Raised for any error reported by nilm-core.");

fn err(e: Error) -> PyErr {
    NilmError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn config_from(toml: Option<&str>) -> PyResult<PipelineConfig> {
    toml.map_or_else(|| Ok(PipelineConfig::default()), |t| PipelineConfig::from_toml(t).map_err(err))
}

fn samples(timestamps: Vec<i64>, powers: Vec<f64>) -> PyResult<Vec<PowerSample>> {
    if timestamps.len() != powers.len() {
        return Err(err(Error::Alignment(format!(
            "{} timestamps vs {} powers",
            timestamps.len(),
            powers.len()
        ))));
    }
    Ok(timestamps.into_iter().zip(powers).map(|(t, p)| PowerSample::new(t, p)).collect())
}

/// Default pipeline configuration as a TOML document.
#[pyfunction]
fn default_config() -> PyResult<String> {
    PipelineConfig::default().to_toml().map_err(err)
}

/// Centered running median with symmetric shrinking at the ends.
#[pyfunction]
fn median_filter(samples: Vec<f64>, window: usize) -> PyResult<Vec<f64>> {
    nilm_core::median_filter(&samples, window).map_err(err)
}

/// Median filter followed by the configured smoothing.
#[pyfunction]
#[pyo3(signature = (samples, config_toml=None))]
fn smooth(samples: Vec<f64>, config_toml: Option<&str>) -> PyResult<Vec<f64>> {
    let cfg: FilterConfig = config_from(config_toml)?.filter;
    nilm_core::smooth(&samples, &cfg).map_err(err)
}

/// Synthetic trace from a list of appliance dicts
/// (`label`, `on_power`, `mean_on_duration`, `activations_per_day`, `noise_stddev`).
///
/// Returns a dict with `timestamps`, `power` and `appliances` (label to series).
#[pyfunction]
fn generate_synthetic(py: Python<'_>, specs: &Bound<'_, PyAny>, days: u32, seed: u64) -> PyResult<Py<PyAny>> {
    let specs: Vec<ApplianceSpec> = from_py(py, specs)?;
    let trace = nilm_core::generate_synthetic(&specs, days, seed).map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        timestamps: Vec<i64>,
        power: Vec<f64>,
        appliances: &'a std::collections::BTreeMap<String, Vec<f64>>,
    }
    to_py(
        py,
        &Out {
            timestamps: trace.timestamps(),
            power: trace.powers(),
            appliances: &trace.per_appliance,
        },
    )
}

/// Loads a trace CSV or a single channel file.
#[pyfunction]
fn read_trace(py: Python<'_>, path: std::path::PathBuf) -> PyResult<(Vec<i64>, Vec<f64>, Py<PyAny>)> {
    let trace = trace_io::read_trace(path).map_err(err)?;
    Ok((trace.timestamps(), trace.powers(), to_py(py, &trace.per_appliance)?))
}

/// Edge events of an already filtered series.
#[pyfunction]
#[pyo3(signature = (timestamps, powers, config_toml=None))]
fn detect_edges(py: Python<'_>, timestamps: Vec<i64>, powers: Vec<f64>, config_toml: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg: EdgeConfig = config_from(config_toml)?.edges;
    to_py(py, &nilm_core::detect_edges(&samples(timestamps, powers)?, &cfg))
}

/// Pairs edge dicts as returned by [`detect_edges`]; returns `(pairs, unmatched)`.
#[pyfunction]
#[pyo3(signature = (edges, config_toml=None))]
fn pair_edges(py: Python<'_>, edges: &Bound<'_, PyAny>, config_toml: Option<&str>) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let edges: Vec<nilm_core::EdgeEvent> = from_py(py, edges)?;
    let cfg = config_from(config_toml)?.edges;
    let p = nilm_core::pair_edges(&edges, &cfg);
    Ok((to_py(py, &p.pairs)?, to_py(py, &p.unmatched)?))
}

/// Power states segmented from the 5 W histogram of pair magnitudes.
#[pyfunction]
#[pyo3(signature = (magnitudes, config_toml=None))]
fn segment_magnitudes(py: Python<'_>, magnitudes: Vec<f64>, config_toml: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = config_from(config_toml)?.cluster;
    let mut hist = nilm_core::StateHistogram::default();
    for m in magnitudes {
        hist.add(m);
    }
    to_py(py, &nilm_core::segment(&hist, &cfg))
}

/// Nearest reference power within `threshold` for each detected power, or `None`.
#[pyfunction]
#[pyo3(signature = (detected, reference, threshold=evaluation::DEFAULT_DISTANCE_THRESHOLD_W))]
fn map_states(detected: Vec<f64>, reference: Vec<f64>, threshold: f64) -> PyResult<Vec<Option<f64>>> {
    let m = nilm_core::map_states(&detected, &reference, threshold).map_err(err)?;
    Ok(m.assignments
        .iter()
        .map(|(_, a)| match a {
            Assignment::Reference { power, .. } => Some(*power),
            Assignment::Unknown => None,
        })
        .collect())
}

#[pyfunction]
fn rmse(estimated: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    nilm_core::rmse(&estimated, &actual).map_err(err)
}

#[pyfunction]
fn energy_error_fraction(estimated_kwh: f64, actual_kwh: f64) -> f64 {
    evaluation::energy_error_fraction(estimated_kwh, actual_kwh)
}

/// Appliance model store with the merge and prune rules.
#[pyclass(module = "nilm")]
struct ApplianceDatabase {
    inner: CoreDb,
}

#[pymethods]
impl ApplianceDatabase {
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDb::new(config_from(config_toml)?.db).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDb::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Folds `(nominal_power, support)` states observed on `day`; returns the update report.
    fn update(&mut self, py: Python<'_>, states: Vec<(f64, u32)>, day: u32) -> PyResult<Py<PyAny>> {
        let states: Vec<PowerState> = states
            .into_iter()
            .map(|(p, support)| {
                let bin = nilm_core::StateHistogram::bin_index(p).unwrap_or(nilm_core::state_cluster::NUM_BINS);
                PowerState {
                    nominal_power: p,
                    support,
                    bin_span: (bin, bin),
                }
            })
            .collect();
        to_py(py, &self.inner.update(&states, day).map_err(err)?)
    }

    fn models(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.models())
    }

    fn on_powers(&self) -> Vec<f64> {
        self.inner.models().iter().map(|m| m.on_power).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ApplianceDatabase(models={}, day={})", self.inner.len(), self.inner.current_day())
    }
}

fn fhmm_from(powers: Vec<f64>, stay_prob: f64) -> PyResult<appliance_db::Fhmm> {
    let models = powers
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let state = PowerState {
                nominal_power: p,
                support: 1,
                bin_span: (0, 0),
            };
            nilm_core::make_hmm(nilm_core::ApplianceId(i as u64 + 1), &state, stay_prob, 0).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(appliance_db::Fhmm::new(models))
}

/// Particle filter over the FHMM of a database, or of bare on-powers
/// (ids 1..N in the given order, sorted by power internally).
#[pyclass(module = "nilm")]
struct ParticleFilter {
    inner: CorePf,
}

#[pymethods]
impl ParticleFilter {
    #[new]
    #[pyo3(signature = (on_powers, stay_prob=0.99, config_toml=None))]
    fn new(on_powers: Vec<f64>, stay_prob: f64, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config_toml)?.pf;
        Ok(Self {
            inner: CorePf::new(fhmm_from(on_powers, stay_prob)?, cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (db, config_toml=None))]
    fn from_database(db: &ApplianceDatabase, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config_from(config_toml)?.pf;
        Ok(Self {
            inner: CorePf::new(compose_fhmm(&db.inner), cfg).map_err(err)?,
        })
    }

    /// Processes one observation; returns the estimate dict.
    fn step(&mut self, py: Python<'_>, timestamp: i64, observation: f64) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.step(timestamp, observation).map_err(err)?)
    }

    fn on_probabilities(&self) -> Vec<f64> {
        self.inner.on_probabilities()
    }

    /// Most probable joint state as a bitmask over appliances in power order.
    fn map_state(&self) -> u64 {
        self.inner.map_state().0
    }

    fn effective_sample_size(&self) -> f64 {
        self.inner.effective_sample_size()
    }
}

/// Exact enumeration filter over all joint states.
#[pyclass(module = "nilm")]
struct ExactFilter {
    inner: CoreExact,
}

#[pymethods]
impl ExactFilter {
    #[new]
    #[pyo3(signature = (on_powers, stay_prob=0.99, noise_stddev=25.0))]
    fn new(on_powers: Vec<f64>, stay_prob: f64, noise_stddev: f64) -> PyResult<Self> {
        let fhmm = fhmm_from(on_powers, stay_prob)?;
        Ok(Self {
            inner: CoreExact::new(fhmm, noise_stddev, nilm_core::disaggregator::DEFAULT_EXACT_LIMIT).map_err(err)?,
        })
    }

    /// Processes one observation; returns the joint posterior.
    fn step(&mut self, observation: f64) -> PyResult<Vec<f64>> {
        self.inner.step(observation).map(<[f64]>::to_vec).map_err(err)
    }

    fn on_probabilities(&self) -> Vec<f64> {
        self.inner.on_probabilities()
    }

    fn map_state(&self) -> u64 {
        self.inner.map_state().0
    }
}

/// Incremental pipeline; `finish()` returns `(database, reports)`.
#[pyclass(module = "nilm")]
struct OnlinePipeline {
    inner: Option<CorePipeline>,
}

impl OnlinePipeline {
    fn live(&mut self) -> PyResult<&mut CorePipeline> {
        self.inner
            .as_mut()
            .ok_or_else(|| NilmError::new_err("pipeline already finished"))
    }
}

#[pymethods]
impl OnlinePipeline {
    #[new]
    #[pyo3(signature = (config_toml=None, initial_db=None))]
    fn new(config_toml: Option<&str>, initial_db: Option<&ApplianceDatabase>) -> PyResult<Self> {
        let cfg = config_from(config_toml)?;
        Ok(Self {
            inner: Some(CorePipeline::new(cfg, initial_db.map(|d| d.inner.clone())).map_err(err)?),
        })
    }

    fn push(&mut self, py: Python<'_>, timestamp: i64, power: f64) -> PyResult<Py<PyAny>> {
        let e = self.live()?.push(PowerSample::new(timestamp, power)).map_err(err)?;
        to_py(py, &e)
    }

    fn model_count(&mut self) -> PyResult<usize> {
        Ok(self.live()?.database().len())
    }

    fn finish(&mut self, py: Python<'_>) -> PyResult<(ApplianceDatabase, Py<PyAny>)> {
        let p = self
            .inner
            .take()
            .ok_or_else(|| NilmError::new_err("pipeline already finished"))?;
        let (db, reports) = p.finish().map_err(err)?;
        Ok((ApplianceDatabase { inner: db }, to_py(py, &reports)?))
    }
}

/// Runs the whole pipeline; returns `(total_estimated_power, database, reports)`.
#[pyfunction]
#[pyo3(signature = (timestamps, powers, config_toml=None, initial_db=None))]
fn run_online(
    py: Python<'_>,
    timestamps: Vec<i64>,
    powers: Vec<f64>,
    config_toml: Option<&str>,
    initial_db: Option<&ApplianceDatabase>,
) -> PyResult<(Vec<f64>, ApplianceDatabase, Py<PyAny>)> {
    let trace = samples(timestamps, powers)?;
    let cfg = config_from(config_toml)?;
    let mut totals = Vec::with_capacity(trace.len());
    let (db, reports) = nilm_core::pipeline::run_online_with(&trace, &cfg, initial_db.map(|d| d.inner.clone()), |e| {
        totals.push(e.total_estimated_power);
        Ok(())
    })
    .map_err(err)?;
    Ok((totals, ApplianceDatabase { inner: db }, to_py(py, &reports)?))
}

#[pymodule]
fn nilm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NilmError", m.py().get_type::<NilmError>())?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(read_trace, m)?)?;
    m.add_function(wrap_pyfunction!(detect_edges, m)?)?;
    m.add_function(wrap_pyfunction!(pair_edges, m)?)?;
    m.add_function(wrap_pyfunction!(segment_magnitudes, m)?)?;
    m.add_function(wrap_pyfunction!(map_states, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(energy_error_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(run_online, m)?)?;
    m.add_class::<ApplianceDatabase>()?;
    m.add_class::<ParticleFilter>()?;
    m.add_class::<ExactFilter>()?;
    m.add_class::<OnlinePipeline>()?;
    Ok(())
}
