//! Python bindings. Structured results cross the boundary as JSON strings.

use genaibench::config::{parse_config, validate_spec, Mode, Policy};
use genaibench::engine::Engine;
use genaibench::metrics::{build_report, evaluate_slo};
use genaibench::orchestrator::PolicyContext;
use genaibench::simgpu::{read_kernel_trace, simulate, SimDevice};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_policy(name: &str) -> PyResult<Policy> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| value_err(format!("unknown policy {name:?}")))
}

/// Violations of a YAML config, empty when it is valid.
#[pyfunction]
fn validate(config: &str) -> PyResult<Vec<String>> {
    let spec = parse_config(config).map_err(value_err)?;
    Ok(validate_spec(&spec).iter().map(ToString::to_string).collect())
}

/// Run a config under the simulated engine and return the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, seed=None, policy=None))]
fn run_simulated(py: Python<'_>, config: &str, seed: Option<u64>, policy: Option<&str>) -> PyResult<String> {
    let mut spec = parse_config(config).map_err(value_err)?;
    spec.options.mode = Mode::Simulated;
    if let Some(s) = seed {
        spec.options.seed = s;
    }
    if let Some(p) = policy {
        spec.options.policy = parse_policy(p)?;
    }
    let trace = py
        .detach(|| Engine::new().run(&spec))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&build_report(&trace)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Replay a JSON-lines kernel trace on the simulated GPU; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (kernels, policy="greedy", sm_count=72))]
fn simulate_kernels(kernels: &str, policy: &str, sm_count: u32) -> PyResult<String> {
    let ks = read_kernel_trace(kernels).map_err(value_err)?;
    let policy = parse_policy(policy)?;
    let device = match policy {
        Policy::Greedy => SimDevice::new(sm_count),
        Policy::StaticPartition => {
            let mut apps: Vec<String> = ks.iter().map(|k| k.app.clone()).collect();
            apps.sort();
            apps.dedup();
            let ctx = PolicyContext::new(policy, &apps).map_err(value_err)?;
            ctx.sim_device(sm_count).map_err(value_err)?
        }
    };
    let result = simulate(&device, &ks, policy).map_err(value_err)?;
    serde_json::to_string(&result).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// SLO attainment of JSON request records against a JSON SLO.
#[pyfunction]
fn slo_attainment(records: &str, slo: &str) -> PyResult<Option<f64>> {
    let records = serde_json::from_str::<Vec<_>>(records).map_err(value_err)?;
    let slo = serde_json::from_str(slo).map_err(value_err)?;
    Ok(evaluate_slo(&records, &slo).map_err(value_err)?.attainment)
}

#[pymodule]
fn genaibench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulated, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_kernels, m)?)?;
    m.add_function(wrap_pyfunction!(slo_attainment, m)?)?;
    Ok(())
}
