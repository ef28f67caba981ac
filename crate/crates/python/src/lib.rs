//! Python module `reachped`.
//!
//! Exposes zonotopes, data-driven reachability, HDBSCAN labels, the
//! nearest-neighbour cluster index, the flat run configuration and the
//! pipeline stages. Matrices cross the boundary as lists of rows; zonotope
//! generators are a list of generator vectors.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use rp::ann::{AnnForest, AnnParams, Assignment};
use rp::cluster::{hdbscan, ClusterParams};
use rp::config::{RunConfig, Source};
use rp::pipeline::{self, Run};
use rp::reach::{identify_from_data, reach as reach_sets, Zonotope};
use rp::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension { .. } | Error::Size { .. } | Error::Schema(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Row-major nested lists to a matrix; every row must have `cols` entries.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Generator vectors, each of length `dim`, as matrix columns.
pub fn generators_from_list(dim: usize, gens: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    if gens.iter().any(|g| g.len() != dim) {
        return Err(Error::Dimension {
            op: "generators",
            left: vec![dim],
            right: gens.iter().map(Vec::len).collect(),
        });
    }
    Ok(DMatrix::from_fn(dim, gens.len(), |i, j| gens[j][i]))
}

#[pyclass(name = "Zonotope", module = "reachped", from_py_object)]
#[derive(Clone)]
pub struct PyZonotope {
    inner: Zonotope,
}

#[pymethods]
impl PyZonotope {
    #[new]
    #[pyo3(signature = (center, generators=Vec::new()))]
    fn new(center: Vec<f64>, generators: Vec<Vec<f64>>) -> PyResult<Self> {
        let g = generators_from_list(center.len(), &generators).map_err(to_py)?;
        let inner = Zonotope::new(DVector::from_vec(center), g).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        self.inner.center().iter().copied().collect()
    }

    #[getter]
    fn generators(&self) -> Vec<Vec<f64>> {
        self.inner.generators().column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn order(&self) -> f64 {
        self.inner.order()
    }

    #[pyo3(signature = (dims=(0, 1)))]
    fn area(&self, dims: (usize, usize)) -> PyResult<f64> {
        self.inner.area_2d(dims).map_err(to_py)
    }

    /// Inclusion of `point`, optionally tested in the projection on `dims`.
    #[pyo3(signature = (point, dims=None))]
    fn contains(&self, point: Vec<f64>, dims: Option<(usize, usize)>) -> PyResult<bool> {
        self.inner.contains_point(&point, dims).map_err(to_py)
    }

    fn reduce_order(&self, max_order: usize) -> PyResult<Self> {
        if max_order == 0 {
            return Err(PyValueError::new_err("max_order must be positive"));
        }
        Ok(Self {
            inner: self.inner.reduce_order(max_order),
        })
    }

    fn linear_map(&self, matrix: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = matrix_from_rows(&matrix).map_err(to_py)?;
        Ok(Self {
            inner: self.inner.linear_map(&m).map_err(to_py)?,
        })
    }

    fn minkowski_sum(&self, other: &PyZonotope) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.minkowski_sum(&other.inner).map_err(to_py)?,
        })
    }

    fn support(&self, direction: Vec<f64>) -> PyResult<f64> {
        if direction.len() != self.inner.dim() {
            return Err(PyValueError::new_err("direction has the wrong dimension"));
        }
        Ok(self.inner.support(&DVector::from_vec(direction)))
    }

    /// Counter-clockwise vertices of a 2-D zonotope, or `None` if degenerate.
    fn polygon(&self) -> Option<Vec<(f64, f64)>> {
        self.inner.polygon().map(|v| v.into_iter().map(|[x, y]| (x, y)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Zonotope(dim={}, generators={})", self.inner.dim(), self.inner.n_generators())
    }
}

/// Identifies the model set from `x_minus -> x_plus` (states as rows) and
/// propagates the box around `x0`. Returns `(sets, truncated)`; raises
/// `ValueError` naming the exclusion when identification is impossible.
#[pyfunction]
#[pyo3(signature = (x_minus, x_plus, noise, x0, init_generators, horizon, max_order=5, memory_cap=20000))]
#[allow(clippy::too_many_arguments)]
fn identify_and_reach(
    x_minus: Vec<Vec<f64>>,
    x_plus: Vec<Vec<f64>>,
    noise: Vec<f64>,
    x0: Vec<f64>,
    init_generators: Vec<f64>,
    horizon: usize,
    max_order: usize,
    memory_cap: usize,
) -> PyResult<(Vec<PyZonotope>, bool)> {
    let xm = matrix_from_rows(&x_minus).map_err(to_py)?.transpose();
    let xp = matrix_from_rows(&x_plus).map_err(to_py)?.transpose();
    let model = identify_from_data(&xm, &xp, &noise, memory_cap)
        .map_err(to_py)?
        .map_err(|ex| PyValueError::new_err(format!("excluded: {}", ex.as_str())))?;
    let n = noise.len();
    let w = Zonotope::axis_box(DVector::zeros(n), &noise).map_err(to_py)?;
    let r0 = Zonotope::axis_box(DVector::from_vec(x0), &init_generators).map_err(to_py)?;
    let out = reach_sets(&model, &r0, &w, horizon, max_order).map_err(to_py)?;
    Ok((out.sets.into_iter().map(|inner| PyZonotope { inner }).collect(), out.truncated))
}

/// HDBSCAN labels; `-1` marks noise.
#[pyfunction]
#[pyo3(signature = (points, min_cluster_size=15, min_samples=5))]
fn hdbscan_labels(points: Vec<Vec<f32>>, min_cluster_size: usize, min_samples: usize) -> PyResult<Vec<i32>> {
    let params = ClusterParams {
        min_cluster_size,
        min_samples,
    };
    Ok(hdbscan(&points, &params).map_err(to_py)?.labels)
}

#[pyclass(name = "AnnIndex", module = "reachped")]
pub struct PyAnnIndex {
    inner: AnnForest,
}

#[pymethods]
impl PyAnnIndex {
    /// `tau` holds one distance threshold per label `0..K`.
    #[new]
    #[pyo3(signature = (ids, vectors, labels, tau, n_trees=10, leaf_capacity=32, seed=0))]
    fn new(
        ids: Vec<String>,
        vectors: Vec<Vec<f32>>,
        labels: Vec<i32>,
        tau: Vec<f64>,
        n_trees: usize,
        leaf_capacity: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = AnnParams {
            n_trees,
            leaf_capacity,
            seed,
            ..AnnParams::default()
        };
        Ok(Self {
            inner: AnnForest::build(ids, vectors, labels, tau, params).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AnnForest::load(path).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `k` nearest items as `(id, distance, label)`, nearest first.
    fn query(&self, q: Vec<f32>, k: usize) -> PyResult<Vec<(String, f64, i32)>> {
        let hits = self.inner.query(&q, k).map_err(to_py)?;
        Ok(hits
            .into_iter()
            .map(|n| (self.inner.id(n.index).to_string(), n.distance, n.label))
            .collect())
    }

    /// `(label, distance)` of the assigned cluster, or `None` and the
    /// rejection reason.
    #[pyo3(signature = (q, k=10))]
    fn assign(&self, q: Vec<f32>, k: usize) -> PyResult<(Option<i32>, Option<f64>, Option<String>)> {
        Ok(match self.inner.assign_cluster(&q, k).map_err(to_py)? {
            Assignment::Cluster { label, distance } => (Some(label), Some(distance), None),
            Assignment::Rejected(r) => {
                let reason: rp::reach::Exclusion = r.into();
                (None, None, Some(reason.as_str().to_string()))
            }
        })
    }
}

#[pyclass(name = "Config", module = "reachped")]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, then the optional `key = value` text.
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(t) = text {
            inner.apply_text(t, Source::File).map_err(to_py)?;
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value, Source::Flag).map_err(to_py)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key).map(str::to_string)
    }

    fn echo(&self) -> String {
        self.inner.echo()
    }

    /// Raises `ValueError` if any value fails to parse or validate.
    fn validate(&self) -> PyResult<()> {
        self.inner.resolve().map(drop).map_err(to_py)
    }
}

/// Runs one pipeline stage and returns its JSON summary.
#[pyfunction]
fn run_stage(stage: &str, config: &PyConfig) -> PyResult<String> {
    let run = Run::new(config.inner.clone()).map_err(to_py)?;
    match stage {
        "synth" => json(pipeline::synth(&run)),
        "ingest" => json(pipeline::ingest(&run)),
        "train" => json(pipeline::train(&run)),
        "cluster" => json(pipeline::cluster(&run)),
        "index" => json(pipeline::index(&run)),
        "eval" => json(pipeline::eval(&run)),
        "scenario" => json(pipeline::scenario(&run)),
        other => Err(PyValueError::new_err(format!("unknown stage '{other}'"))),
    }
}

fn json<T: Serialize>(r: rp::Result<T>) -> PyResult<String> {
    let v = r.map_err(to_py)?;
    serde_json::to_string(&v).map_err(|e| to_py(e.into()))
}

#[pymodule]
fn reachped(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyZonotope>()?;
    m.add_class::<PyAnnIndex>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(identify_and_reach, m)?)?;
    m.add_function(wrap_pyfunction!(hdbscan_labels, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_generators_convert() {
        let m = matrix_from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 3.0);
        assert!(matrix_from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());

        let g = generators_from_list(2, &[vec![1.0, 0.5], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(g.shape(), (2, 3));
        assert_eq!(g[(1, 0)], 0.5);
        assert!(generators_from_list(3, &[vec![1.0, 0.5]]).is_err());
    }
}
