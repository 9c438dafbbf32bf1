//! Python bindings. Structured results cross the boundary as plain Python
//! lists and tuples, or as JSON strings for nested records.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use convsearch::corpus::{load_corpus, Index, Passage, Retriever};
use convsearch::dialogue::{generate_synthetic, SyntheticSpec};
use convsearch::policy::{FeatureMatrix, LinearSoftmaxPolicy};
use convsearch::ppo;
use convsearch::reward;
use convsearch::train::eval::evaluate;
use convsearch::train::{run_training, RunConfig, Workspace};
use convsearch::trajectory::{loss_mask as mask_of, ParseOptions, Segment, Trajectory, WordTokenizer};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// SQuAD-normalized tokens.
#[pyfunction]
fn normalize(text: &str) -> Vec<String> {
    reward::normalize(text)
}

/// Word-level F1 between two strings.
#[pyfunction]
fn f1(prediction: &str, gold: &str) -> f64 {
    reward::f1(prediction, gold)
}

#[pyfunction]
#[pyo3(signature = (queries, rewrite=None))]
fn intent_reward(queries: Vec<String>, rewrite: Option<&str>) -> f64 {
    reward::intent_reward(&queries, rewrite)
}

#[pyfunction]
#[pyo3(signature = (values, reward, gamma=1.0, lam=1.0))]
fn compute_gae(values: Vec<f64>, reward: f64, gamma: f64, lam: f64) -> PyResult<Vec<f64>> {
    ppo::compute_gae(&values, reward, gamma, lam).map_err(value_err)
}

fn segment_tuple(s: &Segment) -> (String, String) {
    let (kind, body) = match s {
        Segment::Think(t) => ("think", t.clone()),
        Segment::Search(t) => ("search", t.clone()),
        Segment::Information(ps) => ("information", ps.join("\n")),
        Segment::Answer(t) => ("answer", t.clone()),
        Segment::Notice(t) => ("notice", t.clone()),
        Segment::Text(t) => ("text", t.clone()),
    };
    (kind.to_owned(), body)
}

/// Parse a tagged trajectory into `(kind, content)` pairs.
#[pyfunction]
#[pyo3(signature = (text, max_searches=2, top_k=3))]
fn parse_trajectory(text: &str, max_searches: usize, top_k: usize) -> PyResult<Vec<(String, String)>> {
    let t = Trajectory::parse(text, &ParseOptions { max_searches, top_k }).map_err(value_err)?;
    Ok(t.segments().iter().map(segment_tuple).collect())
}

/// Tokens and loss weights of a tagged trajectory.
#[pyfunction]
fn loss_mask(text: &str) -> PyResult<(Vec<String>, Vec<u8>)> {
    let t = Trajectory::parse(text, &ParseOptions::default()).map_err(value_err)?;
    let m = mask_of(&t, &WordTokenizer);
    Ok((m.tokens, m.weights))
}

/// BM25 index over `(id, title, text)` passages.
#[pyclass(name = "Index")]
struct PyIndex {
    inner: Index,
}

#[pymethods]
impl PyIndex {
    #[new]
    fn new(passages: Vec<(String, String, String)>) -> PyResult<Self> {
        let ps = passages
            .into_iter()
            .map(|(id, title, text)| Passage::new(id, title, text));
        Ok(Self {
            inner: Index::build(ps).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(path: &str) -> PyResult<Self> {
        let ps = load_corpus(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            inner: Index::build(ps).map_err(value_err)?,
        })
    }

    #[pyo3(signature = (query, k=3))]
    fn search(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        self.inner
            .search(query, k)
            .hits
            .into_iter()
            .map(|h| (h.id, h.score))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.doc_count()
    }
}

/// Linear-softmax policy over caller-supplied feature rows.
#[pyclass(name = "LinearSoftmaxPolicy")]
struct PyPolicy {
    inner: LinearSoftmaxPolicy,
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("feature rows must be non-empty and equally long"));
    }
    Ok(FeatureMatrix::from_rows(&rows))
}

#[pymethods]
impl PyPolicy {
    #[new]
    fn new(weights: Vec<f64>) -> Self {
        Self {
            inner: LinearSoftmaxPolicy { weights },
        }
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    fn log_probs(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.log_probs(&matrix(features)?).map_err(value_err)
    }

    fn grad_log_prob(&self, features: Vec<Vec<f64>>, action: usize) -> PyResult<Vec<f64>> {
        self.inner.grad_log_prob(&matrix(features)?, action).map_err(value_err)
    }

    fn greedy(&self, features: Vec<Vec<f64>>) -> PyResult<usize> {
        self.inner.greedy(&matrix(features)?).map_err(value_err)
    }
}

/// Synthetic dataset as a JSON string with `conversations` and `corpus`.
#[pyfunction]
#[pyo3(signature = (conversations=100, seed=7))]
fn synthetic_json(conversations: usize, seed: u64) -> PyResult<String> {
    let spec = SyntheticSpec {
        conversations,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).map_err(value_err)?;
    let v = serde_json::json!({
        "conversations": data.conversations,
        "corpus": data.corpus,
    });
    Ok(v.to_string())
}

/// Train from a TOML config string and evaluate the selected checkpoint.
/// Returns a JSON string with the per-step diagnostics and the EvalReport.
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn train_and_evaluate(py: Python<'_>, config_toml: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(value_err)?;
    py.detach(|| {
        let ws = Workspace::load(&cfg.data).map_err(value_err)?;
        let out = run_training(&cfg, &ws).map_err(value_err)?;
        let report = evaluate(&out.selected, &ws, &ws.conversations, &cfg.env).map_err(value_err)?;
        let v = serde_json::json!({
            "diagnostics": out.diagnostics,
            "selected_step": out.selected.step,
            "collapsed": out.collapsed,
            "report": report,
        });
        Ok(v.to_string())
    })
}

#[pymodule]
fn convsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(intent_reward, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(parse_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(loss_mask, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_json, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_evaluate, m)?)?;
    m.add_class::<PyIndex>()?;
    m.add_class::<PyPolicy>()?;
    Ok(())
}
