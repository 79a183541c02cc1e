//! Python bindings; built as an extension module under the `python` feature.

#[cfg(feature = "python")]
mod ext {
    use std::sync::Arc;

    use pyo3::exceptions::PyValueError;
    use pyo3::prelude::*;
    use pyo3::types::{PyDict, PyList};
    use pyo3::IntoPyObjectExt;
    use serde_json::Value;

    use fedsim_core::config::{summarize, ExperimentConfig};
    use fedsim_core::engine::SCHEMA_VERSION;
    use fedsim_core::param::{LayerLayout, ParamVector};
    use fedsim_core::{registry, run_gradcheck, FedError};

    fn to_py_err(e: FedError) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    fn json_to_py(py: Python<'_>, v: &Value) -> PyResult<PyObject> {
        Ok(match v {
            Value::Null => py.None(),
            Value::Bool(b) => b.into_py_any(py)?,
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    i.into_py_any(py)?
                } else if let Some(u) = n.as_u64() {
                    u.into_py_any(py)?
                } else {
                    n.as_f64().unwrap_or(f64::NAN).into_py_any(py)?
                }
            }
            Value::String(s) => s.into_py_any(py)?,
            Value::Array(items) => {
                let list = PyList::empty(py);
                for item in items {
                    list.append(json_to_py(py, item)?)?;
                }
                list.into_py_any(py)?
            }
            Value::Object(map) => {
                let dict = PyDict::new(py);
                for (k, val) in map {
                    dict.set_item(k, json_to_py(py, val)?)?;
                }
                dict.into_py_any(py)?
            }
        })
    }

    fn flat(values: Vec<f64>) -> PyResult<ParamVector> {
        let layout = Arc::new(LayerLayout::new(&[("w", values.len())]));
        ParamVector::new(values, layout).map_err(to_py_err)
    }

    /// Run an experiment from a JSON config string. Returns a dict with
    /// "summary" (final-round aggregates) and "records" (one dict per round,
    /// the same objects the CLI writes to metrics.jsonl).
    #[pyfunction]
    #[pyo3(signature = (config_json, workers = 0))]
    fn run_json(py: Python<'_>, config_json: &str, workers: usize) -> PyResult<PyObject> {
        let cfg = ExperimentConfig::from_json(config_json).map_err(to_py_err)?;
        let out = py
            .allow_threads(|| cfg.run(workers))
            .map_err(to_py_err)?;
        let summary = summarize(&cfg.strategy.name, &out, cfg.engine.target_loss);
        let doc = serde_json::json!({ "summary": summary, "records": out.records });
        json_to_py(py, &doc)
    }

    /// All registered strategies as dicts: name, category, and
    /// hyperparameter triples (key, default, meaning).
    #[pyfunction]
    fn list_strategies(py: Python<'_>) -> PyResult<PyObject> {
        let rows: Vec<Value> = registry()
            .iter()
            .map(|info| {
                serde_json::json!({
                    "name": info.name,
                    "category": info.category,
                    "hypers": info.hypers.iter()
                        .map(|(k, d, m)| serde_json::json!([k, d, m]))
                        .collect::<Vec<Value>>(),
                })
            })
            .collect();
        json_to_py(py, &Value::Array(rows))
    }

    /// Finite-difference verification of the model calculus. Returns one
    /// dict per (operation, family) pair; inspect the "pass" flags.
    #[pyfunction]
    #[pyo3(signature = (family = None, trials = 25, seed = 0, corrupt = false))]
    fn gradcheck(
        py: Python<'_>,
        family: Option<&str>,
        trials: usize,
        seed: u64,
        corrupt: bool,
    ) -> PyResult<PyObject> {
        let reports = run_gradcheck(family, trials, seed, corrupt).map_err(to_py_err)?;
        let rows: Vec<Value> = reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "op": r.op,
                    "trials": r.trials,
                    "max_rel_err": r.max_rel_err,
                    "tolerance": r.tolerance,
                    "pass": r.pass,
                })
            })
            .collect();
        json_to_py(py, &Value::Array(rows))
    }

    /// Weighted average of equally shaped flat vectors.
    #[pyfunction]
    fn weighted_average(vectors: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
        let params: Vec<ParamVector> = vectors
            .into_iter()
            .map(flat)
            .collect::<PyResult<_>>()?;
        let refs: Vec<&ParamVector> = params.iter().collect();
        let avg = fedsim_core::weighted_average(&refs, &weights).map_err(to_py_err)?;
        Ok(avg.values)
    }

    /// Cosine similarity between two flat vectors.
    #[pyfunction]
    fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        fedsim_core::cosine_similarity(&flat(a)?, &flat(b)?).map_err(to_py_err)
    }

    #[pymodule]
    fn fedsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
        m.add("SCHEMA_VERSION", SCHEMA_VERSION)?;
        m.add_function(wrap_pyfunction!(run_json, m)?)?;
        m.add_function(wrap_pyfunction!(list_strategies, m)?)?;
        m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
        m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
        m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
        Ok(())
    }
}
