//! Python bindings. Structured values cross the boundary as JSON text and
//! checkpoints as bytes, so the Python side needs no schema of its own.

use eqlinker::evalsuite::{
    equivariance_audit, evaluate as evaluate_records, record_from_json, record_to_json,
    sample_generations, training_linker_keys, AuditSettings, SampleSettings,
};
use eqlinker::molgraph::io::{sample_from_json, sample_to_json};
use eqlinker::molgraph::LinkerSample;
use eqlinker::synthdata::{gen_dataset, GenSpec};
use eqlinker::training::{train as train_model, TrainConfig, TrainOptions};
use eqlinker::vaemodel::{checkpoint_bytes, model_from_bytes, Model};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Empty or absent text selects the defaults.
fn settings<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) if !s.trim().is_empty() => serde_json::from_str(s).map_err(err),
        _ => Ok(T::default()),
    }
}

fn samples(lines: Vec<String>) -> PyResult<Vec<LinkerSample>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| sample_from_json(l, i + 1).map_err(err))
        .collect()
}

fn model(ckpt: &[u8]) -> PyResult<Model> {
    model_from_bytes(ckpt, None).map(|(m, _)| m).map_err(err)
}

/// Generates `n` samples; returns one JSON line per sample.
#[pyfunction]
#[pyo3(signature = (n, spec_json=None))]
fn gen_data(n: usize, spec_json: Option<&str>) -> PyResult<Vec<String>> {
    let spec: GenSpec = settings(spec_json)?;
    let (data, _) = gen_dataset(n, &spec).map_err(err)?;
    Ok(data.iter().map(sample_to_json).collect())
}

/// Trains on dataset lines; returns (checkpoint bytes, report JSON).
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None))]
fn train(
    py: Python<'_>,
    dataset: Vec<String>,
    config_json: Option<&str>,
) -> PyResult<(Vec<u8>, String)> {
    let cfg: TrainConfig = settings(config_json)?;
    let data = samples(dataset)?;
    let (m, report) = py
        .detach(|| train_model(&data, &cfg, TrainOptions::default()))
        .map_err(err)?;
    let report = serde_json::to_value(&report).map_err(err)?;
    Ok((checkpoint_bytes(&m, &report), report.to_string()))
}

/// Samples linkers for every pair; returns one JSON line per generation.
#[pyfunction]
#[pyo3(signature = (checkpoint, fragments, settings_json=None))]
fn sample(
    py: Python<'_>,
    checkpoint: &[u8],
    fragments: Vec<String>,
    settings_json: Option<&str>,
) -> PyResult<Vec<String>> {
    let s: SampleSettings = settings(settings_json)?;
    let (m, data) = (model(checkpoint)?, samples(fragments)?);
    let generated = py
        .detach(|| sample_generations(&m, &data, &s))
        .map_err(err)?;
    Ok(generated.iter().map(record_to_json).collect())
}

/// Scores generations against ground truth; returns the report JSON.
#[pyfunction]
fn evaluate(
    checkpoint: &[u8],
    generated: Vec<String>,
    truth: Vec<String>,
    train_set: Vec<String>,
) -> PyResult<String> {
    let m = model(checkpoint)?;
    let records = generated
        .iter()
        .enumerate()
        .map(|(i, l)| record_from_json(l, i + 1).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    let (truth, train_set) = (samples(truth)?, samples(train_set)?);
    let report = evaluate_records(
        &records,
        &truth,
        &training_linker_keys(&train_set),
        &m.cfg.valence_table(),
    )
    .map_err(err)?;
    Ok(report.to_json())
}

/// Runs the E(3) audit; returns the report JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, settings_json=None))]
fn audit(
    py: Python<'_>,
    checkpoint: &[u8],
    dataset: Vec<String>,
    settings_json: Option<&str>,
) -> PyResult<String> {
    let s: AuditSettings = settings(settings_json)?;
    let (m, data) = (model(checkpoint)?, samples(dataset)?);
    let report = py
        .detach(|| equivariance_audit(&m, &data, &s))
        .map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
fn eqlinker_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    Ok(())
}
