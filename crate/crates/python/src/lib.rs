//! Python bindings for the oscmac simulator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use oscmac::energy;
use oscmac::engine::channel;
use oscmac::mac::ModeSetting;
use oscmac::selection::{self, CandidateRecord, CtRequest};
use oscmac::{NodeId, Position, SimError};

#[pyclass(name = "RadioParams", module = "oscmac_py", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyRadioParams {
    inner: energy::RadioEnergyParams,
}

#[pymethods]
impl PyRadioParams {
    #[new]
    #[pyo3(signature = (e_elec=50e-9, e_rx=50e-9, e_fs=10e-12, e_mp=0.0013e-12, p_rx=1e-3, p_sleep=1e-8))]
    fn new(
        e_elec: f64,
        e_rx: f64,
        e_fs: f64,
        e_mp: f64,
        p_rx: f64,
        p_sleep: f64,
    ) -> PyResult<Self> {
        let inner = energy::RadioEnergyParams {
            e_elec,
            e_rx,
            e_fs,
            e_mp,
            p_rx,
            p_sleep,
        };
        inner
            .validate()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn e_elec(&self) -> f64 {
        self.inner.e_elec
    }

    #[getter]
    fn e_rx(&self) -> f64 {
        self.inner.e_rx
    }

    #[getter]
    fn e_fs(&self) -> f64 {
        self.inner.e_fs
    }

    #[getter]
    fn e_mp(&self) -> f64 {
        self.inner.e_mp
    }

    #[getter]
    fn p_rx(&self) -> f64 {
        self.inner.p_rx
    }

    #[getter]
    fn p_sleep(&self) -> f64 {
        self.inner.p_sleep
    }

    fn crossover_distance(&self) -> f64 {
        energy::crossover_distance(&self.inner)
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "RadioParams(e_elec={:e}, e_rx={:e}, e_fs={:e}, e_mp={:e}, p_rx={:e}, p_sleep={:e})",
            p.e_elec, p.e_rx, p.e_fs, p.e_mp, p.p_rx, p.p_sleep
        )
    }
}

fn params_or_default(params: Option<PyRef<'_, PyRadioParams>>) -> energy::RadioEnergyParams {
    params.map(|p| p.inner).unwrap_or_default()
}

/// Energy (J) to send `bits` over `distance` metres.
#[pyfunction]
#[pyo3(signature = (bits, distance, params=None))]
fn tx_energy(bits: u64, distance: f64, params: Option<PyRef<'_, PyRadioParams>>) -> PyResult<f64> {
    if !(distance >= 0.0 && distance.is_finite()) {
        return Err(PyValueError::new_err(format!(
            "distance must be finite and >= 0, got {distance}"
        )));
    }
    Ok(energy::tx_energy(
        bits,
        distance,
        &params_or_default(params),
    ))
}

/// Energy (J) to receive `bits`.
#[pyfunction]
#[pyo3(signature = (bits, params=None))]
fn rx_energy(bits: u64, params: Option<PyRef<'_, PyRadioParams>>) -> f64 {
    energy::rx_energy(bits, &params_or_default(params))
}

#[pyclass(name = "Candidate", module = "oscmac_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCandidate {
    #[pyo3(get)]
    node: u32,
    #[pyo3(get)]
    energy: f64,
    #[pyo3(get)]
    per_packet_tx_energy: f64,
    #[pyo3(get)]
    distance_to_requester: f64,
}

#[pymethods]
impl PyCandidate {
    #[new]
    #[pyo3(signature = (node, energy, per_packet_tx_energy, distance_to_requester=0.0))]
    fn new(node: u32, energy: f64, per_packet_tx_energy: f64, distance_to_requester: f64) -> Self {
        Self {
            node,
            energy,
            per_packet_tx_energy,
            distance_to_requester,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Candidate(node={}, energy={:e}, per_packet_tx_energy={:e})",
            self.node, self.energy, self.per_packet_tx_energy
        )
    }
}

impl PyCandidate {
    fn record(&self) -> CandidateRecord {
        CandidateRecord {
            node: NodeId(self.node),
            energy: self.energy,
            per_packet_tx_energy: self.per_packet_tx_energy,
            distance_to_requester: self.distance_to_requester,
        }
    }

    fn from_record(c: &CandidateRecord) -> Self {
        Self {
            node: c.node.0,
            energy: c.energy,
            per_packet_tx_energy: c.per_packet_tx_energy,
            distance_to_requester: c.distance_to_requester,
        }
    }
}

fn records(cands: &[PyRef<'_, PyCandidate>]) -> Vec<CandidateRecord> {
    cands.iter().map(|c| c.record()).collect()
}

fn selection_err(e: oscmac::SelectionError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Neighbours with enough energy to join; input sorted by descending energy.
#[pyfunction]
#[pyo3(signature = (candidates, packet_size_bytes, packet_count, next_hop_distance, params=None))]
fn filter_candidates(
    candidates: Vec<PyRef<'_, PyCandidate>>,
    packet_size_bytes: u32,
    packet_count: u32,
    next_hop_distance: f64,
    params: Option<PyRef<'_, PyRadioParams>>,
) -> PyResult<Vec<PyCandidate>> {
    let request = CtRequest {
        requester: NodeId(0),
        packet_size_bytes,
        packet_count,
        next_hop_distance,
        neighbor_ids: candidates.iter().map(|c| NodeId(c.node)).collect(),
    };
    let kept =
        selection::filter_candidates(&records(&candidates), &request, &params_or_default(params))
            .map_err(selection_err)?;
    Ok(kept.iter().map(PyCandidate::from_record).collect())
}

/// Returns `(helpers, leader)`; `leader` is None when nobody qualifies.
#[pyfunction]
fn elect_helpers(
    candidates: Vec<PyRef<'_, PyCandidate>>,
    packet_count: u32,
) -> PyResult<(Vec<u32>, Option<u32>)> {
    let list =
        selection::elect_helpers(&records(&candidates), packet_count).map_err(selection_err)?;
    Ok((
        list.helpers.iter().map(|n| n.0).collect(),
        list.leader.map(|n| n.0),
    ))
}

#[pyfunction]
fn leader_helper(candidates: Vec<PyRef<'_, PyCandidate>>) -> PyResult<u32> {
    selection::leader_helper(&records(&candidates))
        .map(|n| n.0)
        .map_err(selection_err)
}

fn point((x, y): (f64, f64)) -> Position {
    Position::new(x, y)
}

#[pyfunction]
fn in_reach(sender: (f64, f64), receiver: (f64, f64), base_range: f64) -> bool {
    channel::in_reach(point(sender), point(receiver), base_range)
}

/// Whether the senders together reach the receiver. `alpha` defaults to
/// the exponent implied by the farthest sender.
#[pyfunction]
#[pyo3(signature = (senders, receiver, base_range, alpha=None, params=None))]
fn ct_reach(
    senders: Vec<(f64, f64)>,
    receiver: (f64, f64),
    base_range: f64,
    alpha: Option<i32>,
    params: Option<PyRef<'_, PyRadioParams>>,
) -> bool {
    let senders: Vec<Position> = senders.into_iter().map(point).collect();
    let receiver = point(receiver);
    match alpha {
        Some(a) => channel::ct_reach(&senders, receiver, base_range, a),
        None => {
            let d0 = energy::crossover_distance(&params_or_default(params));
            channel::group_reach(&senders, receiver, base_range, d0)
        }
    }
}

/// Runs a scenario given as JSON text. Returns `(metrics_json, trace_csv)`.
#[pyfunction]
#[pyo3(signature = (config_json, seed=0, mode=None))]
fn run(
    py: Python<'_>,
    config_json: &str,
    seed: u64,
    mode: Option<&str>,
) -> PyResult<(String, String)> {
    let mut config =
        oscmac::parse_config(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(m) = mode {
        config.mac.mode = m.parse::<ModeSetting>().map_err(PyValueError::new_err)?;
    }
    let result = py.detach(|| oscmac::run_in_memory(&config, seed));
    match result {
        Ok((metrics, trace)) => {
            let json = serde_json::to_string(&metrics)
                .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            Ok((json, trace))
        }
        Err(SimError::Config(e)) => Err(PyValueError::new_err(e.to_string())),
        Err(e) => Err(PyRuntimeError::new_err(e.to_string())),
    }
}

#[pymodule]
fn oscmac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRadioParams>()?;
    m.add_class::<PyCandidate>()?;
    m.add_function(wrap_pyfunction!(tx_energy, m)?)?;
    m.add_function(wrap_pyfunction!(rx_energy, m)?)?;
    m.add_function(wrap_pyfunction!(filter_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(elect_helpers, m)?)?;
    m.add_function(wrap_pyfunction!(leader_helper, m)?)?;
    m.add_function(wrap_pyfunction!(in_reach, m)?)?;
    m.add_function(wrap_pyfunction!(ct_reach, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
