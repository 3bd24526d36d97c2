// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings for `valsteer`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use valsteer::backend::PositionPolicy;
use valsteer::directions::ProbeConfig;
use valsteer::pluralism::ChoiceDistribution;
use valsteer::relevance::LexicalScorer;

fn to_py(e: valsteer::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy(name: &str) -> PyResult<PositionPolicy> {
    match name {
        "last_token" => Ok(PositionPolicy::LastToken),
        "mean" | "mean_over_tokens" => Ok(PositionPolicy::MeanOverTokens),
        _ => Err(PyValueError::new_err(format!("unknown position policy {name:?}"))),
    }
}

/// The value taxonomy.
#[pyclass(name = "Taxonomy", module = "pyvalsteer", frozen)]
struct Taxonomy {
    inner: valsteer::ValueTaxonomy,
}

#[pymethods]
impl Taxonomy {
    /// The bundled 31-value manifest.
    #[staticmethod]
    fn default() -> Self {
        Taxonomy { inner: valsteer::ValueTaxonomy::default_manifest() }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = valsteer::load_taxonomy(path).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Taxonomy { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.values.iter().map(|v| v.id.clone()).collect()
    }

    fn description(&self, value_id: &str) -> PyResult<String> {
        self.inner
            .get(value_id)
            .map(|v| v.description.clone())
            .ok_or_else(|| PyKeyError::new_err(value_id.to_string()))
    }

    /// Number of values per category.
    fn counts(&self) -> BTreeMap<String, usize> {
        self.inner
            .count_by_category()
            .into_iter()
            .map(|(c, n)| (c.as_str().to_string(), n))
            .collect()
    }
}

/// Byte-level reference transformer with steering support.
#[pyclass(name = "ReferenceModel", module = "pyvalsteer", frozen)]
struct ReferenceModel {
    inner: valsteer::ReferenceModel,
}

#[pymethods]
impl ReferenceModel {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        ReferenceModel { inner: valsteer::ReferenceModel::with_seed(seed) }
    }

    #[getter]
    fn num_layers(&self) -> usize {
        use valsteer::ModelBackend;
        self.inner.num_layers()
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        use valsteer::ModelBackend;
        self.inner.hidden_size()
    }

    /// Greedy generation, optionally steered by `plan`.
    #[pyo3(signature = (prompt, max_tokens = 32, seed = 0, plan = None))]
    fn generate(&self, prompt: &str, max_tokens: usize, seed: u64, plan: Option<&SteeringPlan>) -> PyResult<String> {
        valsteer::generate_with_hooks(&self.inner, prompt, plan.map(|p| &p.inner), max_tokens, seed).map_err(to_py)
    }

    /// Hidden states of `text` at `layers`.
    #[pyo3(signature = (text, layers, position = "last_token"))]
    fn capture(&self, text: &str, layers: Vec<usize>, position: &str) -> PyResult<BTreeMap<usize, Vec<f64>>> {
        let records = valsteer::capture_activations(&self.inner, &[text], &layers, policy(position)?).map_err(to_py)?;
        Ok(records.into_iter().next().map(|r| r.layers).unwrap_or_default())
    }

    /// Estimates a direction for one value from the bundled corpus and
    /// returns a one-entry bank.
    #[pyo3(signature = (value_id, method = "mean_diff", layers = None, seed = 0, max_pairs = None))]
    fn estimate(
        &self,
        value_id: &str,
        method: &str,
        layers: Option<Vec<usize>>,
        seed: u64,
        max_pairs: Option<usize>,
    ) -> PyResult<DirectionBank> {
        let taxonomy = valsteer::ValueTaxonomy::default_manifest();
        let mut corpus = valsteer::value_pool::sample_corpus(&taxonomy).map_err(to_py)?;
        let mut ds = corpus
            .remove(value_id)
            .ok_or_else(|| PyKeyError::new_err(value_id.to_string()))?;
        if let Some(n) = max_pairs {
            ds.pairs.truncate(n);
        }
        let mut cfg = valsteer::EstimationConfig { seed, ..Default::default() };
        if let Some(l) = layers {
            cfg.layers = l;
        }
        let method: valsteer::Method = method.parse().map_err(to_py)?;
        let dir = valsteer::estimate_directions(&self.inner, &ds, method, &cfg).map_err(to_py)?;
        let mut bank = valsteer::DirectionBank::new();
        bank.insert(dir);
        Ok(DirectionBank { inner: bank })
    }
}

/// Additive edits `coefficient · direction` at given layers.
#[pyclass(name = "SteeringPlan", module = "pyvalsteer", frozen)]
struct SteeringPlan {
    inner: valsteer::SteeringPlan,
}

#[pymethods]
impl SteeringPlan {
    #[staticmethod]
    fn single(layer: usize, direction: Vec<f64>, coefficient: f64) -> Self {
        SteeringPlan { inner: valsteer::SteeringPlan::single(layer, direction, coefficient) }
    }

    /// Plan for `value_id` from `bank` with a fixed coefficient.
    #[staticmethod]
    #[pyo3(signature = (bank, value_id, alpha = 0.5, layers = None))]
    fn fixed(bank: &DirectionBank, value_id: &str, alpha: f64, layers: Option<Vec<usize>>) -> PyResult<Self> {
        let dir = bank.inner.require(value_id).map_err(to_py)?;
        let layers = layers.unwrap_or_else(|| dir.layer_indices());
        let policy = valsteer::MagnitudePolicy::Fixed { alpha };
        let inner = valsteer::build_plan(dir, &policy, &layers, None).map_err(to_py)?;
        Ok(SteeringPlan { inner })
    }

    fn layers(&self) -> Vec<usize> {
        self.inner.layers()
    }

    fn coefficients(&self) -> Vec<f64> {
        self.inner.coefficients()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("plan serializes")
    }
}

/// Per-value steering directions.
#[pyclass(name = "DirectionBank", module = "pyvalsteer", frozen)]
struct DirectionBank {
    inner: valsteer::DirectionBank,
}

#[pymethods]
impl DirectionBank {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(DirectionBank { inner: valsteer::DirectionBank::load(path).map_err(to_py)? })
    }

    /// Writes the bank; `encoding` is "binary" or "text".
    #[pyo3(signature = (path, encoding = "binary"))]
    fn save(&self, path: &str, encoding: &str) -> PyResult<()> {
        let enc = match encoding {
            "binary" => valsteer::BankEncoding::Binary,
            "text" => valsteer::BankEncoding::Text,
            _ => return Err(PyValueError::new_err(format!("unknown encoding {encoding:?}"))),
        };
        self.inner.save(path, enc).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn value_ids(&self) -> Vec<String> {
        self.inner.directions.keys().cloned().collect()
    }

    fn layers(&self, value_id: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.require(value_id).map_err(to_py)?.layer_indices())
    }

    fn direction(&self, value_id: &str, layer: usize) -> PyResult<Vec<f64>> {
        let dir = self.inner.require(value_id).map_err(to_py)?;
        dir.layer(layer)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| PyKeyError::new_err(format!("{value_id} has no layer {layer}")))
    }
}

/// Top-k values for `text` under the lexical scorer, as (id, score) pairs.
#[pyfunction]
#[pyo3(signature = (text, k = 6, taxonomy = None))]
fn gate_top_k(text: &str, k: usize, taxonomy: Option<&Taxonomy>) -> PyResult<Vec<(String, f64)>> {
    let default;
    let t = match taxonomy {
        Some(t) => &t.inner,
        None => {
            default = valsteer::ValueTaxonomy::default_manifest();
            &default
        }
    };
    let gate = valsteer::gate_top_k("input", text, t, &LexicalScorer, k).map_err(to_py)?;
    Ok(gate.ranked.into_iter().map(|r| (r.value_id, r.score)).collect())
}

#[pyfunction]
fn estimate_mean_difference(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    valsteer::estimate_mean_difference(&pos, &neg).map_err(to_py)
}

#[pyfunction]
fn estimate_pca(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    valsteer::estimate_pca(&pos, &neg).map_err(to_py)
}

/// Trains a logistic probe; returns (weights, bias, train accuracy).
#[pyfunction]
#[pyo3(signature = (pos, neg, seed = 0))]
fn train_probe(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<f64>, f64, f64)> {
    let p = valsteer::train_probe(&pos, &neg, seed, &ProbeConfig::default()).map_err(to_py)?;
    Ok((p.weights, p.bias, p.train_accuracy))
}

/// Smallest-|ε| coefficient lifting σ(w·(h+εv)+b) to `p0`.
#[pyfunction]
#[pyo3(signature = (h, v, weights, bias, p0 = 0.9, epsilon_max = 100.0))]
fn calibrated_magnitude(h: Vec<f64>, v: Vec<f64>, weights: Vec<f64>, bias: f64, p0: f64, epsilon_max: f64) -> PyResult<f64> {
    let probe = valsteer::ProbeModel { weights, bias, seed: 0, train_accuracy: 1.0, val_accuracy: None };
    valsteer::calibrated_magnitude(&h, &v, &probe, p0, epsilon_max).map_err(to_py)
}

fn labeled(p: Vec<f64>) -> PyResult<ChoiceDistribution> {
    let options = (0..p.len()).map(|i| format!("o{i}")).collect();
    ChoiceDistribution::new(options, p).map_err(to_py)
}

/// Jensen-Shannon distance (base 2) between two probability vectors.
#[pyfunction]
fn js_distance(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    valsteer::js_distance(&labeled(p)?, &labeled(q)?).map_err(to_py)
}

/// Percentile bootstrap interval of the mean.
#[pyfunction]
#[pyo3(signature = (samples, iterations = 1000, seed = 0, lo_pct = 2.5, hi_pct = 97.5))]
fn bootstrap_ci(samples: Vec<f64>, iterations: usize, seed: u64, lo_pct: f64, hi_pct: f64) -> PyResult<BTreeMap<String, f64>> {
    let ci = valsteer::bootstrap_ci(&samples, iterations, seed, lo_pct, hi_pct).map_err(to_py)?;
    Ok([("point", ci.point), ("lower", ci.lower), ("upper", ci.upper)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect())
}

#[pyfunction]
fn fluency_metrics(texts: Vec<String>) -> PyResult<BTreeMap<String, f64>> {
    let r = valsteer::fluency_metrics(&texts).map_err(to_py)?;
    Ok([
        ("avg_length", r.avg_length),
        ("repetition_pct", r.repetition_pct),
        ("gibberish_pct", r.gibberish_pct),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect())
}

#[pyfunction]
fn extract_choice(text: &str, options: Vec<String>) -> Option<String> {
    valsteer::extract_choice(text, &options)
}

/// Runs a pipeline config file; returns the manifest as JSON.
#[pyfunction]
fn run_pipeline(config_path: &str) -> PyResult<String> {
    let cfg = valsteer::RunConfig::load(config_path).map_err(to_py)?;
    let manifest = valsteer::run_pipeline(&cfg).map_err(to_py)?;
    Ok(serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

/// All violations in a config file; empty when valid.
#[pyfunction]
fn validate_config(config_path: &str) -> PyResult<Vec<String>> {
    let cfg = valsteer::RunConfig::load(config_path).map_err(to_py)?;
    Ok(valsteer::validate_config(&cfg).err().unwrap_or_default())
}

#[pymodule]
pub fn pyvalsteer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Taxonomy>()?;
    m.add_class::<ReferenceModel>()?;
    m.add_class::<SteeringPlan>()?;
    m.add_class::<DirectionBank>()?;
    m.add_function(wrap_pyfunction!(gate_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_mean_difference, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_pca, m)?)?;
    m.add_function(wrap_pyfunction!(train_probe, m)?)?;
    m.add_function(wrap_pyfunction!(calibrated_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(js_distance, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(fluency_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(extract_choice, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    Ok(())
}
