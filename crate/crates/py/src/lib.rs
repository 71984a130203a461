//! Python bindings: scenarios, traces and the protocol helpers.

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tap_core::btca::{best_clock, clk_addr as core_clk_addr, format_addr, parse_cidr, ClockDataset, Tolerances};
use tap_core::clock::allan_variance as core_allan;
use tap_core::signaling::{decode_sib9 as core_decode, encode_sib9 as core_encode, BitString, Sib9Message, SrsPair};
use tap_core::sim::{self, summarize, write_outputs, Scenario, SimError, Trace};
use tap_core::ue::calibrate_t0 as core_calibrate;
use tap_core::{Duration, TimePoint};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::Io(e) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

#[pyclass(name = "Scenario", module = "tapsync", frozen)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_json(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyScenario { inner: Scenario::parse(text, &overrides).map_err(sim_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyScenario { inner: Scenario::load(path, &overrides).map_err(sim_err)? })
    }

    /// Copy with `path=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyScenario { inner: self.inner.with_overrides(&overrides).map_err(sim_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(value_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration.as_secs_f64()
    }

    #[pyo3(signature = (seed = None))]
    fn run(&self, py: Python<'_>, seed: Option<u64>) -> PyResult<PyTrace> {
        let mut sc = self.inner.clone();
        if let Some(s) = seed {
            sc.seed = s;
        }
        let trace = py.detach(|| sim::run(&sc)).map_err(sim_err)?;
        Ok(PyTrace { inner: trace })
    }

    fn run_batch(&self, py: Python<'_>, seeds: Vec<u64>) -> PyResult<Vec<PyTrace>> {
        let results = py.detach(|| sim::run_batch(&self.inner, &seeds));
        results.into_iter().map(|r| r.map(|inner| PyTrace { inner }).map_err(sim_err)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, duration_s={})", self.inner.name, self.inner.seed, self.inner.duration.as_secs_f64())
    }
}

#[pyclass(name = "Trace", module = "tapsync", frozen)]
struct PyTrace {
    inner: Trace,
}

impl PyTrace {
    fn ue(&self, index: usize) -> PyResult<&sim::UeTrace> {
        self.inner.ues.get(index).ok_or_else(|| PyIndexError::new_err(format!("no UE {index}")))
    }
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn rntis(&self) -> Vec<u16> {
        self.inner.ues.iter().map(|u| u.rnti).collect()
    }

    /// Summary statistics as a JSON string.
    fn summary_json(&self) -> PyResult<String> {
        serde_json::to_string(&summarize(&self.inner)).map_err(value_err)
    }

    /// `(t_s, error_ns)` for every observation of one UE.
    #[pyo3(signature = (ue = 0))]
    fn errors_ns(&self, ue: usize) -> PyResult<Vec<(f64, f64)>> {
        Ok(self.ue(ue)?.records.iter().map(|r| (r.obs.t_master.as_secs_f64(), r.error.as_ns_f64())).collect())
    }

    /// Raw `(t_s, t_offset_ns, accepted, reject_reason)` tuples.
    #[pyo3(signature = (ue = 0))]
    fn offsets(&self, ue: usize) -> PyResult<Vec<(f64, f64, bool, &'static str)>> {
        Ok(self
            .ue(ue)?
            .records
            .iter()
            .map(|r| (r.obs.t_master.as_secs_f64(), r.obs.t_offset.as_ns_f64(), r.obs.accepted, r.obs.reject_reason.as_str()))
            .collect())
    }

    /// Error budget rows in ns: e_src, e_node, e_gr, e_ingr, e_air, t0_residual, e_total.
    #[pyo3(signature = (ue = 0))]
    fn budget_ns(&self, ue: usize) -> PyResult<Vec<[f64; 7]>> {
        Ok(self
            .ue(ue)?
            .records
            .iter()
            .filter_map(|r| r.budget)
            .map(|b| {
                [b.e_src, b.e_node, b.e_gr, b.e_ingr, b.e_air, b.t0_residual, b.e_total].map(|d| d.as_ns_f64())
            })
            .collect())
    }

    fn write_outputs(&self, dir: &str) -> PyResult<()> {
        write_outputs(dir, &self.inner, &summarize(&self.inner)).map_err(sim_err)
    }

    fn __len__(&self) -> usize {
        self.inner.ues.len()
    }
}

/// Encode a SIB9 message; returns the bit string as hex.
#[pyfunction]
#[pyo3(signature = (time_info_utc, ref_sfn, sched_pre_ms, t_c_ns, pairs = Vec::new()))]
fn encode_sib9(time_info_utc: u64, ref_sfn: u16, sched_pre_ms: i64, t_c_ns: i64, pairs: Vec<(u16, u16)>) -> PyResult<String> {
    let msg = Sib9Message {
        time_info_utc,
        ref_sfn,
        sched_pre: Duration::from_ms(sched_pre_ms),
        t_c: Duration::from_ns(t_c_ns),
        ext_pairs: pairs.into_iter().map(|(rnti, srs_delay)| SrsPair { rnti, srs_delay }).collect(),
    };
    Ok(core_encode(&msg).map_err(value_err)?.to_hex())
}

#[pyfunction]
fn decode_sib9<'py>(py: Python<'py>, hex: &str) -> PyResult<Bound<'py, PyDict>> {
    let d = core_decode(&BitString::from_hex(hex).map_err(value_err)?).map_err(value_err)?;
    let m = &d.message;
    let out = PyDict::new(py);
    out.set_item("time_info_utc", m.time_info_utc)?;
    out.set_item("ref_sfn", m.ref_sfn)?;
    out.set_item("sched_pre_ms", m.sched_pre.as_ps() / Duration::from_ms(1).as_ps())?;
    out.set_item("t_c_ns", m.t_c.as_ps() / 1000)?;
    out.set_item("pairs", m.ext_pairs.iter().map(|p| (p.rnti, p.srs_delay)).collect::<Vec<_>>())?;
    out.set_item("crc", d.crc)?;
    out.set_item("crc_ok", d.crc_ok)?;
    Ok(out)
}

/// Clock interface address for a UE id inside `cidr`, dotted quad.
#[pyfunction]
fn clk_addr(ue_id: &[u8], cidr: &str) -> PyResult<String> {
    let (seg, mask) = parse_cidr(cidr).map_err(value_err)?;
    Ok(format_addr(core_clk_addr(ue_id, seg, mask).map_err(value_err)?))
}

/// Best master selection over a JSON list of clock datasets; returns JSON.
#[pyfunction]
fn select_clock(datasets_json: &str) -> PyResult<String> {
    let sets: Vec<ClockDataset> = serde_json::from_str(datasets_json).map_err(value_err)?;
    let result = best_clock(&sets, &Tolerances::default()).map_err(value_err)?;
    serde_json::to_string(&result).map_err(value_err)
}

/// Allan variance of a uniformly spaced offset series in ps; returns `(variance, terms)`.
#[pyfunction]
fn allan_variance(offsets_ps: Vec<i64>, spacing_s: f64, tau_s: f64) -> PyResult<(f64, usize)> {
    let spacing = Duration::from_secs_f64(spacing_s);
    let series: Vec<(TimePoint, Duration)> = offsets_ps
        .iter()
        .enumerate()
        .map(|(i, &x)| (TimePoint::EPOCH + spacing * i as i64, Duration::from_ps(x)))
        .collect();
    let p = core_allan(&series, Duration::from_secs_f64(tau_s)).map_err(value_err)?;
    Ok((p.variance, p.sample_count))
}

/// Median t0 estimate from error samples in ns.
#[pyfunction]
fn calibrate_t0(errors_ns: Vec<f64>) -> PyResult<f64> {
    let errs: Vec<Duration> = errors_ns.into_iter().map(Duration::from_ns_f64).collect();
    Ok(core_calibrate(&errs).map_err(value_err)?.as_ns_f64())
}

#[pymodule]
fn tapsync(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(encode_sib9, m)?)?;
    m.add_function(wrap_pyfunction!(decode_sib9, m)?)?;
    m.add_function(wrap_pyfunction!(clk_addr, m)?)?;
    m.add_function(wrap_pyfunction!(select_clock, m)?)?;
    m.add_function(wrap_pyfunction!(allan_variance, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_t0, m)?)?;
    Ok(())
}
