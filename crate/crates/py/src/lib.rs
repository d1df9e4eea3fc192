//! Python module `acpc`: alignment primitives, datasets, training,
//! evaluation and the oracle suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use acpc_core::alignment::{self, ScoreMatrix};
use acpc_core::data::{self, RawSequence};
use acpc_core::eval::{eval_subset, evaluate as run_eval, EvalOptions};
use acpc_core::train::{self, BenchConfig, Checkpoint, GenConfig, RunConfig};
use acpc_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn scores(rows: Vec<Vec<f64>>) -> PyResult<ScoreMatrix<f64>> {
    ScoreMatrix::from_rows(&rows).map_err(py_err)
}

fn to_rows(data: &[f64], m: usize) -> Vec<Vec<f64>> {
    data.chunks(m).map(<[f64]>::to_vec).collect()
}

/// Log-sum over all monotone alignments and the per-cell occupancy.
#[pyfunction]
fn expected_path_score(rows: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let s = scores(rows)?;
    let (value, occ) = alignment::expected_path_score(&s);
    Ok((value, to_rows(occ.data(), s.m())))
}

/// Best alignment as a list of prediction indices, one per latent, and its score.
#[pyfunction]
fn best_path(rows: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let (path, score) = alignment::best_path(&scores(rows)?);
    Ok((path.assignment().to_vec(), score))
}

/// CTC emulation: `(score, column_normalizers, blank_mass)`.
#[pyfunction]
fn ctc_blank_trick_score(rows: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>, f64)> {
    let t = alignment::ctc_blank_trick_score(&scores(rows)?);
    Ok((t.score, t.column_normalizers, t.blank_mass))
}

#[pyfunction]
fn enumerate_paths(k: usize, m: usize) -> PyResult<Vec<Vec<usize>>> {
    let paths = alignment::enumerate_paths(k, m).map_err(py_err)?;
    Ok(paths.iter().map(|p| p.assignment().to_vec()).collect())
}

#[pyfunction]
fn count_score_evaluations(k: usize, m: usize, n: usize) -> PyResult<u64> {
    alignment::count_score_evaluations(k, m, n).map_err(py_err)
}

/// A synthetic corpus of labelled sample streams.
#[pyclass(module = "acpc")]
struct Dataset {
    inner: data::Dataset,
}

impl Dataset {
    fn sequence(&self, i: usize) -> PyResult<&RawSequence> {
        self.inner
            .sequences
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sequence {i} out of range ({} sequences)", self.inner.len())))
    }
}

#[pymethods]
impl Dataset {
    /// Generates from `key = value` generator settings (empty for defaults).
    #[staticmethod]
    #[pyo3(signature = (spec = ""))]
    fn generate(spec: &str) -> PyResult<Self> {
        let config = GenConfig::parse(spec).map_err(py_err)?;
        Ok(Self { inner: data::generate(&config.spec, config.seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::read_dataset(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn samples(&self, i: usize) -> PyResult<Vec<f32>> {
        Ok(self.sequence(i)?.samples.clone())
    }

    /// Symbol label of every latent-rate frame.
    fn frame_labels(&self, i: usize) -> PyResult<Vec<u16>> {
        Ok(self.sequence(i)?.frame_labels.clone())
    }

    fn channel(&self, i: usize) -> PyResult<u16> {
        Ok(self.sequence(i)?.channel)
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} sequences, channels {:?})", self.inner.len(), self.inner.channels())
    }
}

/// Trains from a run config text; returns the per-step losses.
#[pyfunction]
fn train_run(py: Python<'_>, config: &str) -> PyResult<Vec<f64>> {
    let config = RunConfig::parse(config).map_err(py_err)?;
    let t = py.detach(|| train::train(&config)).map_err(py_err)?;
    Ok(t.metrics.losses().into_iter().map(|(_, l)| l).collect())
}

/// Evaluation report of a checkpoint as `{(name, split): value}`.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, sequences = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    dataset: &Dataset,
    sequences: Option<usize>,
) -> PyResult<Vec<(String, String, f64)>> {
    let ck = Checkpoint::<f32>::load(checkpoint).map_err(py_err)?;
    let idx = eval_subset(&dataset.inner, sequences.unwrap_or(ck.config.eval_sequences));
    let opts = EvalOptions::for_model(&ck.model.config, ck.config.eval_seed);
    let report = py.detach(|| run_eval(&ck.model, &dataset.inner, &idx, &opts)).map_err(py_err)?;
    Ok(report.rows)
}

/// `(name, passed, max_error)` for every oracle.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_oracles(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let checks = py.detach(|| acpc_core::oracle::run_all(seed)).map_err(py_err)?;
    Ok(checks.into_iter().map(|c| (c.name.to_string(), c.passed, c.max_error)).collect())
}

/// Aligned vs plain loss timing: `(wall_ratio, count_ratio, counts_match)`.
#[pyfunction]
#[pyo3(name = "bench", signature = (config = ""))]
fn bench_losses(py: Python<'_>, config: &str) -> PyResult<(f64, f64, bool)> {
    let config = BenchConfig::parse(config).map_err(py_err)?;
    let r = py.detach(|| train::bench(&config)).map_err(py_err)?;
    Ok((r.wall_ratio(), r.count_ratio(), r.counts_match()))
}

#[pymodule]
#[pyo3(name = "acpc")]
fn acpc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(expected_path_score, m)?)?;
    m.add_function(wrap_pyfunction!(best_path, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_blank_trick_score, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_paths, m)?)?;
    m.add_function(wrap_pyfunction!(count_score_evaluations, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_oracles, m)?)?;
    m.add_function(wrap_pyfunction!(bench_losses, m)?)?;
    m.add_class::<Dataset>()?;
    Ok(())
}
