//! Python bindings for the point-cloud diffusion toolkit: geometry helpers,
//! the metric suite, and checkpoint-backed sampling/likelihood.

use ndarray::Array2;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pcdiff::conditioning::image::Image;
use pcdiff::geometry::{self, CameraIntrinsics, Frame, PointCloud};
use pcdiff::harness::checkpoint::load_checkpoint;
use pcdiff::metrics::{self, ChamferNorm, EmdMethod, PairMetric};
use pcdiff::model::{DenoiseModel, NetModel};
use pcdiff::rng::StreamRng;
use pcdiff::samplers::{self, DivergenceMethod, SamplerConfig, SamplerKind};

fn err(e: pcdiff::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Matrix<'py> = Bound<'py, PyArray2<f64>>;
type Vector<'py> = Bound<'py, PyArray1<f64>>;

fn cloud_from(points: PyReadonlyArray2<'_, f64>, frame: Frame) -> PyResult<PointCloud> {
    PointCloud::new(points.as_array().to_owned(), frame).map_err(err)
}

fn camera(cam: (f64, f64, f64, f64, usize, usize)) -> PyResult<CameraIntrinsics> {
    CameraIntrinsics::new(cam.0, cam.1, cam.2, cam.3, cam.4, cam.5).map_err(err)
}

/// Chamfer distance; `norm` is "squared" or "l1".
#[pyfunction]
#[pyo3(signature = (p, q, norm = "squared"))]
fn chamfer(
    p: PyReadonlyArray2<'_, f64>,
    q: PyReadonlyArray2<'_, f64>,
    norm: &str,
) -> PyResult<f64> {
    let mode = match norm {
        "squared" => ChamferNorm::SquaredL2,
        "l1" => ChamferNorm::L1OfL2,
        other => return Err(PyValueError::new_err(format!("unknown norm {other:?}"))),
    };
    metrics::chamfer(
        &cloud_from(p, Frame::Euclidean)?,
        &cloud_from(q, Frame::Euclidean)?,
        mode,
    )
    .map_err(err)
}

/// Earth mover's distance; `method` is "exact" or "auction".
#[pyfunction]
#[pyo3(signature = (p, q, method = "exact"))]
fn emd(
    p: PyReadonlyArray2<'_, f64>,
    q: PyReadonlyArray2<'_, f64>,
    method: &str,
) -> PyResult<f64> {
    let m = match method {
        "exact" => EmdMethod::Exact,
        "auction" => EmdMethod::Auction,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    metrics::emd(
        &cloud_from(p, Frame::Euclidean)?,
        &cloud_from(q, Frame::Euclidean)?,
        m,
    )
    .map_err(err)
}

/// Coverage, MMD, and 1-NNA of generated clouds against references.
/// `metric` is "cd", "cd-l1", or "emd".
#[pyfunction]
#[pyo3(signature = (references, generated, metric = "cd"))]
fn evaluate_sets(
    references: Vec<PyReadonlyArray2<'_, f64>>,
    generated: Vec<PyReadonlyArray2<'_, f64>>,
    metric: &str,
) -> PyResult<(f64, f64, f64)> {
    let metric = PairMetric::parse(metric).map_err(err)?;
    let refs: PyResult<Vec<PointCloud>> = references
        .into_iter()
        .map(|a| cloud_from(a, Frame::Euclidean))
        .collect();
    let gens: PyResult<Vec<PointCloud>> = generated
        .into_iter()
        .map(|a| cloud_from(a, Frame::Euclidean))
        .collect();
    let report = metrics::evaluate_sets(&refs?, &gens?, metric).map_err(err)?;
    Ok((report.coverage, report.mmd, report.one_nna))
}

/// ICP-align source onto target; returns (rotation 3x3, translation 3,
/// scale, aligned source).
#[pyfunction]
#[pyo3(signature = (source, target, estimate_scale = false, max_iters = 50, tol = 1e-9))]
fn icp_align<'py>(
    py: Python<'py>,
    source: PyReadonlyArray2<'py, f64>,
    target: PyReadonlyArray2<'py, f64>,
    estimate_scale: bool,
    max_iters: usize,
    tol: f64,
) -> PyResult<(Matrix<'py>, Vector<'py>, f64, Matrix<'py>)> {
    let res = metrics::icp_align(
        &cloud_from(source, Frame::Euclidean)?,
        &cloud_from(target, Frame::Euclidean)?,
        estimate_scale,
        max_iters,
        tol,
    )
    .map_err(err)?;
    let mut rot = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            rot[[i, j]] = res.transform.rotation[(i, j)];
        }
    }
    let t = ndarray::arr1(&[
        res.transform.translation[0],
        res.transform.translation[1],
        res.transform.translation[2],
    ]);
    Ok((
        rot.into_pyarray(py),
        t.into_pyarray(py),
        res.transform.scale,
        res.aligned.into_points().into_pyarray(py),
    ))
}

/// Project camera-frame points to normalized image coordinates plus depth.
/// `cam` is (fx, fy, cx, cy, height, width).
#[pyfunction]
fn project<'py>(
    py: Python<'py>,
    points: PyReadonlyArray2<'py, f64>,
    cam: (f64, f64, f64, f64, usize, usize),
) -> PyResult<(Matrix<'py>, Vector<'py>)> {
    let proj = geometry::project(&cloud_from(points, Frame::Euclidean)?, &camera(cam)?)
        .map_err(err)?;
    Ok((proj.coords.into_pyarray(py), proj.depth.into_pyarray(py)))
}

/// Camera-frustum reparameterization (x,y,z) -> (u,v,l).
#[pyfunction]
fn to_frustum<'py>(
    py: Python<'py>,
    points: PyReadonlyArray2<'py, f64>,
    cam: (f64, f64, f64, f64, usize, usize),
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let out = geometry::to_frustum(&cloud_from(points, Frame::Euclidean)?, &camera(cam)?)
        .map_err(err)?;
    Ok(out.into_points().into_pyarray(py))
}

/// Inverse frustum reparameterization (u,v,l) -> (x,y,z).
#[pyfunction]
fn from_frustum<'py>(
    py: Python<'py>,
    points: PyReadonlyArray2<'py, f64>,
    cam: (f64, f64, f64, f64, usize, usize),
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let out = geometry::from_frustum(&cloud_from(points, Frame::Frustum)?, &camera(cam)?)
        .map_err(err)?;
    Ok(out.into_points().into_pyarray(py))
}

/// Read a .pcb batch as a list of N x D arrays.
#[pyfunction]
fn read_pcb<'py>(py: Python<'py>, path: &str) -> PyResult<Vec<Bound<'py, PyArray2<f64>>>> {
    let clouds = geometry::io::read_pcb(std::path::Path::new(path)).map_err(err)?;
    Ok(clouds
        .into_iter()
        .map(|c| c.into_points().into_pyarray(py))
        .collect())
}

/// Write equally-shaped clouds as a .pcb batch.
#[pyfunction]
fn write_pcb(path: &str, clouds: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<()> {
    let clouds: PyResult<Vec<PointCloud>> = clouds
        .into_iter()
        .map(|a| cloud_from(a, Frame::Euclidean))
        .collect();
    geometry::io::write_pcb(std::path::Path::new(path), &clouds?).map_err(err)
}

/// A trained model loaded from a checkpoint (EMA weights active).
#[pyclass]
struct Model {
    inner: NetModel,
    train_points: usize,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let mut ck = load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        ck.ema.swap(ck.model.params.tensors_mut()).map_err(err)?;
        Ok(Model {
            inner: ck.model,
            train_points: ck.train_points,
        })
    }

    /// Attach a conditioning image, shaped H x W x C.
    fn set_image(&mut self, image: PyReadonlyArray3<'_, f64>) -> PyResult<()> {
        let a = image.as_array();
        let (h, w, c) = a.dim();
        let mut img = Image::new(h, w, c);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    img.set(r, col, ch, a[[r, col, ch]]);
                }
            }
        }
        self.inner.set_image(&img).map_err(err)
    }

    /// Draw one cloud of `n_points` in world coordinates.
    #[pyo3(signature = (n_points, sampler = "sde", steps = 128, seed = 0))]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        n_points: usize,
        sampler: &str,
        steps: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let scfg = match SamplerKind::parse(sampler).map_err(err)? {
            SamplerKind::Sde => SamplerConfig::sde(steps),
            SamplerKind::Ode => SamplerConfig::ode(steps),
        };
        let mut rng = StreamRng::new(seed);
        let diff = samplers::sample(&self.inner, &scfg, n_points, &mut rng).map_err(err)?;
        let world = self.inner.frame.diffusion_to_world(&diff).map_err(err)?;
        Ok(world.into_points().into_pyarray(py))
    }

    /// Log-likelihood of a world-frame cloud: (total, log_density,
    /// frame_correction). `divergence` is "exact" or "probe".
    #[pyo3(signature = (points, steps = 128, divergence = "exact", probes = 64, seed = 0))]
    fn log_likelihood(
        &self,
        points: PyReadonlyArray2<'_, f64>,
        steps: usize,
        divergence: &str,
        probes: usize,
        seed: u64,
    ) -> PyResult<(f64, f64, f64)> {
        let method = match divergence {
            "exact" => DivergenceMethod::Exact,
            "probe" => DivergenceMethod::StochasticProbe,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown divergence {other:?}"
                )))
            }
        };
        let world = cloud_from(points, Frame::Euclidean)?;
        let diff = self.inner.frame.world_to_diffusion(&world).map_err(err)?;
        let mut rng = StreamRng::new(seed);
        let res = samplers::log_likelihood(&self.inner, &diff, steps, method, probes, &mut rng)
            .map_err(err)?;
        Ok((res.total, res.log_density, res.frame_correction))
    }

    /// Upsample a world-frame context cloud to `target_m` points.
    #[pyo3(signature = (context, target_m, steps = 64, resample_substeps = 4, cached = false, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn upsample<'py>(
        &self,
        py: Python<'py>,
        context: PyReadonlyArray2<'py, f64>,
        target_m: usize,
        steps: usize,
        resample_substeps: usize,
        cached: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let world = cloud_from(context, Frame::Euclidean)?;
        let diff = self.inner.frame.world_to_diffusion(&world).map_err(err)?;
        let scfg = SamplerConfig::ode(steps);
        let mut rng = StreamRng::new(seed);
        let n = diff.nrows();
        let result = if cached {
            if target_m <= n {
                return Err(PyValueError::new_err("target_m must exceed the context"));
            }
            let per_tile = self.train_points.max(1);
            let tiles = (target_m - n).div_ceil(per_tile);
            let full = samplers::upsample_cached(
                &self.inner,
                &diff,
                per_tile,
                tiles,
                &scfg,
                resample_substeps,
                &mut rng,
            )
            .map_err(err)?;
            full.slice(ndarray::s![..target_m, ..]).to_owned()
        } else {
            samplers::upsample_inpaint(
                &self.inner,
                &diff,
                target_m,
                &scfg,
                resample_substeps,
                None,
                Some(self.train_points),
                &mut rng,
            )
            .map_err(err)?
        };
        let out = self.inner.frame.diffusion_to_world(&result).map_err(err)?;
        Ok(out.into_points().into_pyarray(py))
    }

    /// Network evaluations since the model was loaded.
    fn eval_count(&self) -> u64 {
        self.inner.eval_count()
    }

    #[getter]
    fn sigma_max(&self) -> f64 {
        self.inner.diffusion_config().sigma_max
    }

    #[getter]
    fn conditioning(&self) -> &'static str {
        self.inner.mode.name()
    }
}

#[pymodule]
fn pcdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_sets, m)?)?;
    m.add_function(wrap_pyfunction!(icp_align, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(to_frustum, m)?)?;
    m.add_function(wrap_pyfunction!(from_frustum, m)?)?;
    m.add_function(wrap_pyfunction!(read_pcb, m)?)?;
    m.add_function(wrap_pyfunction!(write_pcb, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
