//! Python bindings for the mesh reconstruction library.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use meshrecon_core as core;
use core::decoder::TemplateMode;
use core::losses::GtSurface;
use core::mesh::{self, FactorLadder};
use core::metrics;
use core::pipeline::{self, RunConfig};
use core::synth;
use core::tensor;
use core::volume;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        core::Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Indexed triangle mesh.
#[pyclass(name = "TriMesh", from_py_object)]
#[derive(Clone)]
struct PyTriMesh(mesh::TriMesh);

#[pymethods]
impl PyTriMesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> PyResult<Self> {
        mesh::TriMesh::new(vertices, faces).map(Self).map_err(err)
    }

    #[staticmethod]
    fn icosphere(subdivisions: u32) -> Self {
        Self(mesh::icosphere(subdivisions))
    }

    #[staticmethod]
    fn read_obj(path: PathBuf) -> PyResult<Self> {
        mesh::read_obj(&path).map(Self).map_err(err)
    }

    fn write_obj(&self, path: PathBuf) -> PyResult<()> {
        mesh::write_obj(&path, &self.0).map_err(err)
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.0.vertices.clone()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.0.faces.clone()
    }

    fn num_vertices(&self) -> usize {
        self.0.num_vertices()
    }

    fn num_faces(&self) -> usize {
        self.0.num_faces()
    }

    fn euler_characteristic(&self) -> i64 {
        self.0.euler_characteristic()
    }

    fn is_closed_manifold(&self) -> bool {
        self.0.validate_closed_manifold().is_ok()
    }

    fn surface_area(&self) -> f64 {
        self.0.surface_area()
    }

    fn signed_volume(&self) -> f64 {
        self.0.signed_volume()
    }

    fn vertex_normals(&self) -> Vec<[f64; 3]> {
        self.0.vertex_normals().normals
    }

    fn face_normals(&self) -> Vec<[f64; 3]> {
        self.0.face_normals().normals
    }

    fn translated(&self, t: [f64; 3]) -> Self {
        Self(self.0.translated(t))
    }

    fn connected_components(&self) -> Vec<Self> {
        self.0.connected_components().into_iter().map(Self).collect()
    }

    /// Normalized adjacency as `(rows, cols, [(row, col, value)])`.
    fn adjacency(&self) -> (usize, usize, Vec<(usize, usize, f64)>) {
        sparse_parts(&self.0.build_adjacency())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("TriMesh(vertices={}, faces={})", self.0.num_vertices(), self.0.num_faces())
    }
}

fn sparse_parts(m: &tensor::SparseMatrix) -> (usize, usize, Vec<(usize, usize, f64)>) {
    (m.rows(), m.cols(), m.entries().to_vec())
}

/// Scalar volume with intensities in [0, 1].
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume(volume::Volume);

#[pymethods]
impl PyVolume {
    /// `data` is `D*H*W` values with W fastest; the transform maps voxel
    /// centres onto [-1, 1]^3.
    #[new]
    fn new(dims: [usize; 3], data: Vec<f32>) -> PyResult<Self> {
        volume::Volume::new(dims, data, volume::Affine::voxel_centered(dims)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        volume::load_volume(&stem).map(Self).map_err(err)
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        volume::save_volume(&stem, &self.0).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn voxel_diagonal(&self) -> f64 {
        self.0.voxel_diagonal()
    }
}

/// Multi-resolution template hierarchy.
#[pyclass(name = "TemplateBundle", from_py_object)]
#[derive(Clone)]
struct PyTemplateBundle(mesh::TemplateBundle);

#[pymethods]
impl PyTemplateBundle {
    #[staticmethod]
    #[pyo3(signature = (baseline, factors=None))]
    fn build(baseline: &PyTriMesh, factors: Option<[f64; 4]>) -> PyResult<Self> {
        let ladder = factors.map(FactorLadder).unwrap_or_else(|| FactorLadder::for_vertex_count(baseline.0.num_vertices()));
        mesh::build_template_bundle(&baseline.0, ladder).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        mesh::load_template_bundle(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        mesh::save_template_bundle(&dir, &self.0).map_err(err)
    }

    fn level_sizes(&self) -> Vec<usize> {
        self.0.level_sizes()
    }

    fn levels(&self) -> Vec<PyTriMesh> {
        self.0.levels.iter().cloned().map(PyTriMesh).collect()
    }

    /// Up matrix `k` (level `k + 1` to level `k`) as `(rows, cols, triplets)`.
    fn up(&self, k: usize) -> PyResult<(usize, usize, Vec<(usize, usize, f64)>)> {
        self.0.up.get(k).map(sparse_parts).ok_or_else(|| PyValueError::new_err("level out of range"))
    }

    fn down(&self, k: usize) -> PyResult<(usize, usize, Vec<(usize, usize, f64)>)> {
        self.0.down.get(k).map(sparse_parts).ok_or_else(|| PyValueError::new_err("level out of range"))
    }
}

/// Differentiable 64-bit tensor.
#[pyclass(name = "Tensor", unsendable)]
struct PyTensor(tensor::Tensor<f64>);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad=false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            tensor::Tensor::parameter(&shape, data)
        } else {
            tensor::Tensor::new(&shape, data)
        };
        t.map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad_vec()
    }

    fn item(&self) -> f64 {
        self.0.item()
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().map_err(err)
    }

    fn __add__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.add(&o.0).map(Self).map_err(err)
    }

    fn __sub__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.sub(&o.0).map(Self).map_err(err)
    }

    fn __mul__(&self, o: &PyTensor) -> PyResult<Self> {
        self.0.mul(&o.0).map(Self).map_err(err)
    }

    fn sum(&self) -> Self {
        Self(self.0.sum())
    }

    fn mean(&self) -> Self {
        Self(self.0.mean())
    }

    fn square(&self) -> Self {
        Self(self.0.square())
    }

    fn relu(&self) -> Self {
        Self(self.0.relu())
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(&shape).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias=None))]
fn linear(x: &PyTensor, weight: &PyTensor, bias: Option<&PyTensor>) -> PyResult<PyTensor> {
    tensor::linear(&x.0, &weight.0, bias.map(|b| &b.0)).map(PyTensor).map_err(err)
}

#[pyfunction]
fn sparse_matmul(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>, x: &PyTensor) -> PyResult<PyTensor> {
    let m = tensor::SparseMatrix::from_triplets(rows, cols, entries).map_err(err)?;
    tensor::sparse_matmul(&m, &x.0).map(PyTensor).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (input, weight, stride=1, padding=0))]
fn conv3d(input: &PyTensor, weight: &PyTensor, stride: usize, padding: usize) -> PyResult<PyTensor> {
    tensor::conv3d(&input.0, &weight.0, None, stride, padding).map(PyTensor).map_err(err)
}

#[pyfunction]
fn trilinear_sample(feature: &PyTensor, points: &PyTensor) -> PyResult<PyTensor> {
    core::vol2pc::trilinear_sample(&feature.0, &points.0).map(PyTensor).map_err(err)
}

/// Squared Chamfer distance between predicted points `[P, 3]` and a
/// ground-truth point set.
#[pyfunction]
fn chamfer(pred: &PyTensor, gt: Vec<[f64; 3]>) -> PyResult<PyTensor> {
    let n = gt.len();
    let g = GtSurface::new(gt, vec![[0.0, 0.0, 1.0]; n]).map_err(err)?;
    core::losses::chamfer(&pred.0, &g).map(PyTensor).map_err(err)
}

#[pyfunction]
fn marching_cubes(volume: &PyVolume, iso: f64) -> PyTriMesh {
    PyTriMesh(mesh::marching_cubes(&volume.0, iso))
}

/// Returns `(coarse mesh, kept fine-vertex indices)`.
#[pyfunction]
fn decimate(m: &PyTriMesh, target_vertices: usize) -> PyResult<(PyTriMesh, Vec<usize>)> {
    let d = mesh::decimate(&m.0, target_vertices).map_err(err)?;
    Ok((PyTriMesh(d.mesh), d.kept))
}

#[pyfunction]
fn taubin_smooth(m: &PyTriMesh, iterations: usize) -> PyTriMesh {
    PyTriMesh(mesh::taubin_smooth(&m.0, iterations))
}

#[pyfunction]
fn mean_template(meshes: Vec<PyTriMesh>) -> PyResult<PyTriMesh> {
    let ms: Vec<_> = meshes.into_iter().map(|m| m.0).collect();
    mesh::mean_template(&ms).map(PyTriMesh).map_err(err)
}

/// Displacement template `T_s + T_d` (or any other mode) from vertex arrays
/// sharing `baseline`'s faces.
#[pyfunction]
#[pyo3(signature = (mode, baseline, specific=None, displacement=None))]
fn compose_template(
    mode: &str,
    baseline: &PyTriMesh,
    specific: Option<&PyTriMesh>,
    displacement: Option<&PyTriMesh>,
) -> PyResult<PyTriMesh> {
    let mode: TemplateMode = mode.parse().map_err(err)?;
    core::decoder::compose_template_mesh(mode, &baseline.0, specific.map(|m| &m.0), displacement.map(|m| &m.0))
        .map(PyTriMesh)
        .map_err(err)
}

/// `(assd, hd, hd90)` between two meshes.
#[pyfunction]
#[pyo3(signature = (a, b, samples=10_000, seed=0))]
fn surface_distances(a: &PyTriMesh, b: &PyTriMesh, samples: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let d = metrics::surface_distances(&a.0, &b.0, samples, seed).map_err(err)?;
    Ok((d.assd, d.hd, d.hd90))
}

#[pyfunction]
fn generate_shape(seed: u64, bumpiness: f64, mode_count: usize) -> PyResult<PyTriMesh> {
    synth::generate_shape(seed, bumpiness, mode_count).map(|(_, m)| PyTriMesh(m)).map_err(err)
}

/// Voxelize the shape generated from `seed`; returns the volume and labels.
#[pyfunction]
#[pyo3(signature = (seed, bumpiness, mode_count, dims, blur=0.0))]
fn voxelize_shape(seed: u64, bumpiness: f64, mode_count: usize, dims: [usize; 3], blur: f64) -> PyResult<(PyVolume, Vec<u8>)> {
    let (s, _) = synth::generate_shape(seed, bumpiness, mode_count).map_err(err)?;
    let (v, l) = synth::voxelize(&[s], dims, blur).map_err(err)?;
    Ok((PyVolume(v), l.labels))
}

/// Build a synthetic dataset; returns its manifest hash.
#[pyfunction]
#[pyo3(signature = (out, n, seed=0, dims=32, structures=1))]
fn make_dataset(out: PathBuf, n: usize, seed: u64, dims: usize, structures: usize) -> PyResult<String> {
    let cfg = synth::DatasetConfig {
        n,
        seed,
        dims: [dims; 3],
        structures,
        ..synth::DatasetConfig::default()
    };
    synth::build_dataset(&cfg, &out).map(|m| m.hash).map_err(err)
}

/// Train from a TOML config file; returns the training log as JSON.
#[pyfunction]
fn train(config: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::load(&config).map_err(err)?;
    let log = match cfg.dtype {
        pipeline::Dtype::F32 => pipeline::train::<f32>(&cfg).map(|o| o.log),
        pipeline::Dtype::F64 => pipeline::train::<f64>(&cfg).map(|o| o.log),
    }
    .map_err(err)?;
    Ok(serde_json::to_string(&log).expect("log serializes"))
}

/// A trained model loaded from a 32-bit checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel(pipeline::Model<f32>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        pipeline::Model::<f32>::load(&checkpoint).map(|(m, _, _)| Self(m)).map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.0.cfg.mode.name().to_string()
    }

    fn baseline(&self) -> PyTriMesh {
        PyTriMesh(self.0.baseline().clone())
    }

    /// `(initial template, [S1, S2, S3, S4])` for one volume.
    fn reconstruct(&mut self, volume: &PyVolume) -> PyResult<(PyTriMesh, Vec<PyTriMesh>)> {
        let (t, s) = self.0.reconstruct(&volume.0).map_err(err)?;
        Ok((PyTriMesh(t), s.into_iter().map(PyTriMesh).collect()))
    }
}

#[pymodule]
fn meshrecon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTriMesh>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyTemplateBundle>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(linear, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_matmul, m)?)?;
    m.add_function(wrap_pyfunction!(conv3d, m)?)?;
    m.add_function(wrap_pyfunction!(trilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(marching_cubes, m)?)?;
    m.add_function(wrap_pyfunction!(decimate, m)?)?;
    m.add_function(wrap_pyfunction!(taubin_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(mean_template, m)?)?;
    m.add_function(wrap_pyfunction!(compose_template, m)?)?;
    m.add_function(wrap_pyfunction!(surface_distances, m)?)?;
    m.add_function(wrap_pyfunction!(generate_shape, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize_shape, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
