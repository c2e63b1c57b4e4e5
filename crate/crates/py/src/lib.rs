//! Python bindings. Structured values (conversations, results, ground
//! truth) cross the boundary as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString, PyTuple};
use serde_json::Value;

use emocue_core::analytics::{duration, longitudinal, stats, survey, users};
use emocue_core::cascade::{self, CascadeOptions};
use emocue_core::corpus::{self, Conversation, CorpusSchema, Target};
use emocue_core::judge::{Judge, ScriptedBackend};
use emocue_core::simgen::{self, SimSpec};
use emocue_core::taxonomy::{self, PromptTemplate};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        Ok(Value::Null)
    } else if obj.is_instance_of::<PyBool>() {
        Ok(Value::Bool(obj.extract()?))
    } else if obj.is_instance_of::<PyInt>() {
        Ok(Value::from(obj.extract::<i64>()?))
    } else if obj.is_instance_of::<PyFloat>() {
        Ok(Value::from(obj.extract::<f64>()?))
    } else if obj.is_instance_of::<PyString>() {
        Ok(Value::String(obj.extract()?))
    } else if let Ok(d) = obj.cast::<PyDict>() {
        let mut m = serde_json::Map::new();
        for (k, v) in d.iter() {
            m.insert(k.extract::<String>()?, from_py(&v)?);
        }
        Ok(Value::Object(m))
    } else if obj.is_instance_of::<PyList>() || obj.is_instance_of::<PyTuple>() {
        obj.try_iter()?
            .map(|x| from_py(&x?))
            .collect::<PyResult<Vec<_>>>()
            .map(Value::Array)
    } else {
        Err(value_err(format!("cannot convert {} to JSON", obj.get_type().name()?)))
    }
}

fn serialize<T: serde::Serialize>(py: Python<'_>, x: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(x).map_err(value_err)?)
}

fn conversation_from(obj: &Bound<'_, PyAny>) -> PyResult<Conversation> {
    let mut c: Conversation = serde_json::from_value(from_py(obj)?).map_err(value_err)?;
    c.messages.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(c)
}

fn parse_target(s: &str) -> PyResult<Target> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| value_err(format!("unknown target `{s}`")))
}

/// Chance that at least one of `k` units drawn from `n` hits one of `m`
/// positives.
#[pyfunction]
fn adjusted_score(n: usize, m: usize, k: usize) -> PyResult<f64> {
    cascade::adjusted_score(n, m, k).map_err(value_err)
}

/// Active seconds spanned by message timestamps.
#[pyfunction]
fn estimate_duration(timestamps: Vec<f64>) -> f64 {
    duration::estimate_duration(&timestamps)
}

/// `(n, r, p)` or `None` when undefined.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> Option<(usize, f64, f64)> {
    stats::pearson(&x, &y).map(|c| (c.n, c.r, c.p))
}

#[pyfunction]
fn permutation_p(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    stats::permutation_p(&x, &y)
}

#[pyfunction]
fn encode_survey(question_id: &str, label: &str) -> PyResult<i8> {
    survey::encode_survey(question_id, label).map_err(value_err)
}

/// `(slope, intercept, slope_se)` of `(day, fraction)` points.
#[pyfunction]
#[pyo3(signature = (series, min_days = 14))]
fn longitudinal_slope(series: Vec<(f64, f64)>, min_days: usize) -> Option<(f64, f64, Option<f64>)> {
    longitudinal::longitudinal_slope(&series, min_days)
}

#[pyclass(name = "Taxonomy", frozen)]
struct PyTaxonomy {
    inner: taxonomy::Taxonomy,
}

#[pymethods]
impl PyTaxonomy {
    #[staticmethod]
    fn bundled() -> Self {
        PyTaxonomy {
            inner: taxonomy::Taxonomy::bundled_v1(),
        }
    }

    /// Reads TOML or JSON by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = taxonomy::load_taxonomy(&path).map_err(value_err)?;
        Ok(PyTaxonomy { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = taxonomy::Taxonomy::from_toml(text).map_err(value_err)?;
        Ok(PyTaxonomy { inner })
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version.clone()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.classifiers().iter().map(|c| c.id.clone()).collect()
    }

    fn classifier(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        let spec = self.inner.get(id).ok_or_else(|| value_err(format!("unknown classifier `{id}`")))?;
        serialize(py, spec)
    }

    /// Rendered prompts for every unit of `conversation` this classifier
    /// would judge.
    #[pyo3(signature = (conversation, classifier_id, k = 4, template = None))]
    fn render_prompts(
        &self,
        conversation: &Bound<'_, PyAny>,
        classifier_id: &str,
        k: usize,
        template: Option<String>,
    ) -> PyResult<Vec<String>> {
        let spec = self
            .inner
            .get(classifier_id)
            .ok_or_else(|| value_err(format!("unknown classifier `{classifier_id}`")))?;
        let template = template.map(PromptTemplate::new).unwrap_or_default();
        let conv = conversation_from(conversation)?;
        corpus::extract_units(&conv, spec.target, k)
            .iter()
            .map(|u| template.render(spec, u).map_err(value_err))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// `(conversations, errors)`; errors are `(line, message)` pairs.
#[pyfunction]
fn load_corpus(py: Python<'_>, path: PathBuf) -> PyResult<(Vec<Py<PyAny>>, Vec<(usize, String)>)> {
    let loaded = corpus::load_corpus(&path, CorpusSchema::NdjsonV1).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let convs = loaded
        .conversations
        .iter()
        .map(|c| serialize(py, c))
        .collect::<PyResult<_>>()?;
    Ok((convs, loaded.errors.into_iter().map(|e| (e.line, e.message)).collect()))
}

/// Texts of the units a classifier with `target` would judge.
#[pyfunction]
#[pyo3(signature = (conversation, target, k = 4))]
fn extract_units(conversation: &Bound<'_, PyAny>, target: &str, k: usize) -> PyResult<Vec<String>> {
    let conv = conversation_from(conversation)?;
    Ok(corpus::extract_units(&conv, parse_target(target)?, k)
        .iter()
        .map(|u| u.text())
        .collect())
}

/// Runs the cascade over a corpus with a scripted judge.
#[pyfunction]
#[pyo3(signature = (corpus_path, rules_path, taxonomy = None, k = 4, max_concurrency = 4))]
fn classify(
    py: Python<'_>,
    corpus_path: PathBuf,
    rules_path: PathBuf,
    taxonomy: Option<&PyTaxonomy>,
    k: usize,
    max_concurrency: usize,
) -> PyResult<Vec<Py<PyAny>>> {
    let tax = taxonomy.map_or_else(taxonomy::Taxonomy::bundled_v1, |t| t.inner.clone());
    let loaded =
        corpus::load_corpus(&corpus_path, CorpusSchema::NdjsonV1).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let judge = Judge::scripted(ScriptedBackend::load(&rules_path).map_err(value_err)?);
    let options = CascadeOptions {
        k,
        ..Default::default()
    };
    let (results, _) = py
        .detach(|| {
            cascade::classify_all(
                &loaded.conversations,
                &tax,
                &PromptTemplate::default(),
                &judge,
                &options,
                max_concurrency,
            )
        })
        .map_err(value_err)?;
    results.iter().map(|r| serialize(py, r)).collect()
}

/// Per-user activation fractions from result dicts.
#[pyfunction]
fn user_fractions(py: Python<'_>, results: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let results: Vec<cascade::ConversationResult> = serde_json::from_value(from_py(results)?).map_err(value_err)?;
    let stats = users::user_activation_fractions(&results, &BTreeMap::new());
    let fractions: BTreeMap<&String, &BTreeMap<String, f64>> = stats.iter().map(|(u, s)| (u, &s.fractions)).collect();
    serialize(py, &fractions)
}

/// Generates a synthetic corpus from a TOML spec. Writes the files to
/// `out_dir` when given and returns the ground truth.
#[pyfunction]
#[pyo3(signature = (spec_toml, out_dir = None, seed = None))]
fn simulate(py: Python<'_>, spec_toml: &str, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut spec = SimSpec::from_toml(spec_toml).map_err(value_err)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = simgen::generate(&spec, &taxonomy::Taxonomy::bundled_v1()).map_err(value_err)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
        out.write(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    serialize(py, &out.truth)
}

#[pymodule]
fn emocue(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTaxonomy>()?;
    m.add_function(wrap_pyfunction!(adjusted_score, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_duration, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_p, m)?)?;
    m.add_function(wrap_pyfunction!(encode_survey, m)?)?;
    m.add_function(wrap_pyfunction!(longitudinal_slope, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(extract_units, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(user_fractions, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
