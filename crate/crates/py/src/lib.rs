//! Python bindings: each function takes a dict of configuration overrides
//! (`{"eps0": 300, "feel.rounds": 10}`) and returns plain Python objects.

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use otafeel::channel::draw_channels;
use otafeel::fedlearn::{gap_bound_check, train as train_run};
use otafeel::harness::config::RunConfig;
use otafeel::harness::experiment::{build_federation, render_csv, run_trials, summarize, ExperimentSpec};
use otafeel::harness::selftest::run_selftest;
use otafeel::numerics::RngStream;
use otafeel::scheduler::{schedule as schedule_devices, Policy};
use otafeel::sensing::sense as sense_target;
use otafeel::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(v) => PyValueError::new_err(v.join("; ")),
        Error::Parse { .. } | Error::InfeasibleSnrFloor { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Override values arrive as Python objects; `str()` gives the config-file text.
fn config_from(overrides: Option<&Bound<'_, PyDict>>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(d) = overrides {
        let mut errs = Vec::new();
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) => b.to_string(),
                Err(_) => v.str()?.to_string(),
            };
            if let Err(e) = cfg.apply_override(&format!("{key}={value}")) {
                errs.push(format!("{key}: {e}"));
            }
        }
        if !errs.is_empty() {
            return Err(PyValueError::new_err(errs.join("; ")));
        }
    }
    if let Some(s) = seed {
        cfg.system.seed = s;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Default configuration in file format.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().render()
}

/// One scheduling solve on the seed's channel draw.
#[pyfunction]
#[pyo3(signature = (overrides=None, policy="mp", seed=None))]
fn schedule<'py>(py: Python<'py>, overrides: Option<&Bound<'py, PyDict>>, policy: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(overrides, seed)?;
    let policy = Policy::parse(policy).map_err(to_py)?;
    let sys = &cfg.system;
    let real = draw_channels(sys, &mut RngStream::derive(sys.seed, &[0, 0])).map_err(to_py)?;
    let base = vec![1.0; sys.n_devices];
    let out = schedule_devices(&real, sys, policy, &base, Some(&mut RngStream::derive(sys.seed, &[0, 1, policy as u64])))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("policy", policy.name())?;
    d.set_item("feasible", out.feasible)?;
    d.set_item("set", out.set.clone())?;
    d.set_item("crb", out.crb_value)?;
    d.set_item("agg_error", out.agg_error)?;
    d.set_item("duality_gap", out.duality_gap)?;
    d.set_item("removed", out.trace.iter().map(|t| t.removed).collect::<Vec<_>>())?;
    d.set_item("log", out.log_lines())?;
    Ok(d)
}

/// Scheduling followed by `blocks` sensing blocks.
#[pyfunction]
#[pyo3(signature = (overrides=None, blocks=100, seed=None))]
fn sense<'py>(py: Python<'py>, overrides: Option<&Bound<'py, PyDict>>, blocks: usize, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(overrides, seed)?;
    let sys = &cfg.system;
    let real = draw_channels(sys, &mut RngStream::derive(sys.seed, &[0, 0])).map_err(to_py)?;
    let base = vec![1.0; sys.n_devices];
    let policy = Policy::MatchingPursuit;
    let out = schedule_devices(&real, sys, policy, &base, Some(&mut RngStream::derive(sys.seed, &[0, 1, policy as u64])))
        .map_err(to_py)?;
    let est = sense_target(sys, &real, &out.w, &out.scaling, true, blocks, &mut RngStream::derive(sys.seed, &[0, 2]))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("crb", est.crb)?;
    d.set_item("empirical_mse", est.empirical_mse)?;
    d.set_item("relative_mse", est.relative_mse)?;
    d.set_item("selected", out.set.len())?;
    Ok(d)
}

/// Full federated training run; returns per-round histories.
#[pyfunction]
#[pyo3(signature = (overrides=None, seed=None))]
fn train<'py>(py: Python<'py>, overrides: Option<&Bound<'py, PyDict>>, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from(overrides, seed)?;
    let sys = &cfg.system;
    let fed = build_federation(sys, &cfg.feel, &cfg.dataset, sys.seed).map_err(to_py)?;
    let state = py.detach(|| train_run(sys, &fed, sys.seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("loss", state.loss_history.clone())?;
    d.set_item("accuracy", state.acc_history.clone())?;
    d.set_item("gap", state.gap_history.clone())?;
    d.set_item("selected", state.selected_history.clone())?;
    d.set_item("agg_error", state.agg_error_history.clone())?;
    d.set_item("fallback_rounds", state.fallback_rounds.clone())?;
    if cfg.feel.track_gap {
        let report = gap_bound_check(&state.gap_history, cfg.feel.reg, fed.l_lip, &state.noise_budget_history);
        d.set_item("gap_fraction_holding", report.fraction_holding)?;
    }
    Ok(d)
}

/// Runs the configured sweep and returns the summary CSV text.
#[pyfunction]
#[pyo3(signature = (overrides=None, seed=None))]
fn sweep(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config_from(overrides, seed)?;
    let spec = ExperimentSpec::from_config(&cfg, cfg.sweep.out.clone().unwrap_or_default()).map_err(to_py)?;
    let rows = py
        .detach(|| run_trials(&spec).map(|records| summarize(&spec, &records)))
        .map_err(to_py)?;
    Ok(render_csv(&rows))
}

/// Oracle checks as `{name: (passed, detail)}`.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn selftest(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<HashMap<String, (bool, String)>> {
    let cfg = config_from(overrides, None)?;
    let results = run_selftest(&cfg.system).map_err(to_py)?;
    Ok(results.into_iter().map(|r| (r.name.to_string(), (r.passed, r.detail))).collect())
}

#[pymodule]
fn pyotafeel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(sense, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
