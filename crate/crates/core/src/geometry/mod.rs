//! Point-cloud and camera primitives: pinhole projection, camera-frustum
//! reparameterization, dataset normalization, and subsampling.
//!
//! Coordinate conventions: points live in the camera frame with +z in front
//! of the camera. Normalized image coordinates `(p_h, p_w)` put `p_h` on the
//! vertical axis and `p_w` on the horizontal one, each divided by its own
//! image side length, so in-image points land in `[0,1]^2` with pixel `i`
//! centered at `(i + 0.5) / side`.

pub mod io;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Clamp margin for the inverse sigmoid: `(p_h, p_w)` must lie inside
/// `[FRUSTUM_MARGIN, 1 - FRUSTUM_MARGIN]` to enter frustum coordinates.
pub const FRUSTUM_MARGIN: f64 = 1e-6;

/// Coordinate frame a point cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Plain (x, y, z) coordinates, camera or world frame.
    Euclidean,
    /// Reparameterized (u, v, l) frustum coordinates.
    Frustum,
}

/// An unordered set of N points in D dimensions, stored row-per-point.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Array2<f64>,
    frame: Frame,
}

impl PointCloud {
    /// Wrap an N x D coordinate matrix, validating finiteness and shape.
    pub fn new(points: Array2<f64>, frame: Frame) -> Result<Self> {
        let (n, d) = points.dim();
        if n < 1 || d < 2 {
            return Err(Error::SizeError(format!(
                "point cloud needs N >= 1 and D >= 2, got {n} x {d}"
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        Ok(PointCloud { points, frame })
    }

    pub fn euclidean(points: Array2<f64>) -> Result<Self> {
        Self::new(points, Frame::Euclidean)
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Same coordinates under a different frame tag. The caller asserts the
    /// numbers already mean what the tag says.
    pub fn retag(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (height as f64, width as f64);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(cx > 0.0 && cx < w && cy > 0.0 && cy < h) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside the {w} x {h} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            height,
            width,
        })
    }

    /// Centered pinhole camera over a square image.
    pub fn centered(focal: f64, side: usize) -> Self {
        let c = side as f64 / 2.0;
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            height: side,
            width: side,
        }
    }

    /// Project one camera-frame point to normalized image coordinates plus depth.
    pub fn project_point(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let p_h = (self.fy * (y / z) + self.cy) / self.height as f64;
        let p_w = (self.fx * (x / z) + self.cx) / self.width as f64;
        (p_h, p_w, z)
    }

    /// Invert the projection: normalized image coordinates + depth to a point.
    pub fn unproject_point(&self, p_h: f64, p_w: f64, depth: f64) -> (f64, f64, f64) {
        let y = (p_h * self.height as f64 - self.cy) * depth / self.fy;
        let x = (p_w * self.width as f64 - self.cx) * depth / self.fx;
        (x, y, depth)
    }
}

/// Result of projecting a cloud: per-point normalized coordinates and depth.
#[derive(Debug, Clone)]
pub struct Projection {
    /// N x 2 matrix of (p_h, p_w).
    pub coords: Array2<f64>,
    /// Per-point depth (camera-frame z).
    pub depth: Array1<f64>,
}

impl Projection {
    /// Indices of points at or behind the camera plane (depth <= 0).
    pub fn behind_camera(&self) -> Vec<usize> {
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, d)| **d <= 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Project every point of a euclidean camera-frame cloud onto the image plane.
pub fn project(cloud: &PointCloud, cam: &CameraIntrinsics) -> Result<Projection> {
    if cloud.frame() != Frame::Euclidean {
        return Err(Error::InvalidInput(
            "project expects a euclidean-frame cloud".into(),
        ));
    }
    if cloud.dim() != 3 {
        return Err(Error::SizeError(format!(
            "projection needs 3-d points, got D = {}",
            cloud.dim()
        )));
    }
    let n = cloud.len();
    let mut coords = Array2::zeros((n, 2));
    let mut depth = Array1::zeros(n);
    for (i, row) in cloud.points().rows().into_iter().enumerate() {
        let (p_h, p_w, p_d) = cam.project_point(row[0], row[1], row[2]);
        coords[[i, 0]] = p_h;
        coords[[i, 1]] = p_w;
        depth[i] = p_d;
    }
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(
            "projection produced non-finite coordinates (zero depth?)".into(),
        ));
    }
    Ok(Projection { coords, depth })
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse logistic sigmoid, log(x / (1 - x)).
pub fn inverse_sigmoid(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Map a euclidean camera-frame cloud to frustum coordinates
/// (u, v, l) = (S^-1(p_h), S^-1(p_w), log p_d).
///
/// Every point must sit strictly inside the frustum: positive depth and
/// image coordinates within the [`FRUSTUM_MARGIN`] band. Violations are
/// collected and reported together.
pub fn to_frustum(cloud: &PointCloud, cam: &CameraIntrinsics) -> Result<PointCloud> {
    let proj = project(cloud, cam)?;
    let mut bad = Vec::new();
    for i in 0..cloud.len() {
        let (p_h, p_w) = (proj.coords[[i, 0]], proj.coords[[i, 1]]);
        let in_band = |v: f64| (FRUSTUM_MARGIN..=1.0 - FRUSTUM_MARGIN).contains(&v);
        if proj.depth[i] <= 0.0 || !in_band(p_h) || !in_band(p_w) {
            bad.push(i);
        }
    }
    if !bad.is_empty() {
        return Err(Error::FrustumViolation {
            indices: bad,
            detail: "points behind the camera or outside the image band".into(),
        });
    }
    let n = cloud.len();
    let mut out = Array2::zeros((n, 3));
    for i in 0..n {
        out[[i, 0]] = inverse_sigmoid(proj.coords[[i, 0]]);
        out[[i, 1]] = inverse_sigmoid(proj.coords[[i, 1]]);
        out[[i, 2]] = proj.depth[i].ln();
    }
    PointCloud::new(out, Frame::Frustum)
}

/// Exact inverse of [`to_frustum`]: all of R^3 is valid input.
pub fn from_frustum(cloud: &PointCloud, cam: &CameraIntrinsics) -> Result<PointCloud> {
    if cloud.frame() != Frame::Frustum {
        return Err(Error::InvalidInput(
            "from_frustum expects a frustum-frame cloud".into(),
        ));
    }
    let n = cloud.len();
    let mut out = Array2::zeros((n, 3));
    for i in 0..n {
        let p_h = sigmoid(cloud.points()[[i, 0]]);
        let p_w = sigmoid(cloud.points()[[i, 1]]);
        let depth = cloud.points()[[i, 2]].exp();
        let (x, y, z) = cam.unproject_point(p_h, p_w, depth);
        out[[i, 0]] = x;
        out[[i, 1]] = y;
        out[[i, 2]] = z;
    }
    PointCloud::new(out, Frame::Euclidean)
}

/// How dataset normalization pools statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    /// Per-axis mean and standard deviation pooled over all points of all clouds.
    Global,
    /// Per-cloud mean with a single scalar scale, resolved at apply time.
    PerShape,
    /// Identity.
    None,
}

impl NormalizationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(NormalizationMode::Global),
            "per-shape" => Ok(NormalizationMode::PerShape),
            "none" => Ok(NormalizationMode::None),
            other => Err(Error::InvalidInput(format!(
                "unknown normalization mode {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormalizationMode::Global => "global",
            NormalizationMode::PerShape => "per-shape",
            NormalizationMode::None => "none",
        }
    }
}

/// Affine normalization statistics: x_norm = (x - mean) / scale per axis.
///
/// For [`NormalizationMode::PerShape`] the stats returned by [`fit_normalization`]
/// are a placeholder; call [`NormalizationStats::for_cloud`] to resolve them
/// against a concrete cloud before applying.
#[derive(Debug, Clone)]
pub struct NormalizationStats {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub mode: NormalizationMode,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            mean: Array1::zeros(dim),
            scale: Array1::ones(dim),
            mode: NormalizationMode::None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateData(
                "normalization scale must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Resolve placeholder per-shape stats against one cloud; global and
    /// identity stats pass through unchanged.
    pub fn for_cloud(&self, cloud: &PointCloud) -> Result<NormalizationStats> {
        match self.mode {
            NormalizationMode::PerShape => per_shape_stats(cloud),
            _ => Ok(self.clone()),
        }
    }

    /// (x - mean) / scale, row-wise.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.validate()?;
        let mut pts = cloud.points().clone();
        for mut row in pts.rows_mut() {
            for d in 0..row.len() {
                row[d] = (row[d] - self.mean[d]) / self.scale[d];
            }
        }
        PointCloud::new(pts, cloud.frame())
    }

    /// x * scale + mean, row-wise; exact inverse of [`Self::apply`].
    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.validate()?;
        let mut pts = cloud.points().clone();
        for mut row in pts.rows_mut() {
            for d in 0..row.len() {
                row[d] = row[d] * self.scale[d] + self.mean[d];
            }
        }
        PointCloud::new(pts, cloud.frame())
    }

    /// Log-determinant of the Jacobian of `apply` for a cloud of `n` points:
    /// -n * sum_d log(scale_d).
    pub fn log_det_apply(&self, n: usize) -> f64 {
        -(n as f64) * self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

fn per_shape_stats(cloud: &PointCloud) -> Result<NormalizationStats> {
    let d = cloud.dim();
    let n = cloud.len() as f64;
    let mean = cloud.points().sum_axis(ndarray::Axis(0)) / n;
    let mut pooled = 0.0;
    for row in cloud.points().rows() {
        for k in 0..d {
            let c = row[k] - mean[k];
            pooled += c * c;
        }
    }
    let std = (pooled / (n * d as f64)).sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::DegenerateData(
            "per-shape normalization found zero pooled variance".into(),
        ));
    }
    Ok(NormalizationStats {
        mean,
        scale: Array1::from_elem(d, std),
        mode: NormalizationMode::PerShape,
    })
}

/// Fit normalization statistics over a dataset.
pub fn fit_normalization(
    clouds: &[PointCloud],
    mode: NormalizationMode,
) -> Result<NormalizationStats> {
    if clouds.is_empty() {
        return Err(Error::SizeError("cannot fit normalization on an empty dataset".into()));
    }
    let d = clouds[0].dim();
    match mode {
        NormalizationMode::None => Ok(NormalizationStats::identity(d)),
        NormalizationMode::PerShape => Ok(NormalizationStats {
            mean: Array1::zeros(d),
            scale: Array1::ones(d),
            mode,
        }),
        NormalizationMode::Global => {
            let mut count = 0.0;
            let mut mean = Array1::<f64>::zeros(d);
            for c in clouds {
                if c.dim() != d {
                    return Err(Error::SizeError("mixed dimensionality in dataset".into()));
                }
                mean += &c.points().sum_axis(ndarray::Axis(0));
                count += c.len() as f64;
            }
            mean /= count;
            let mut var = Array1::<f64>::zeros(d);
            for c in clouds {
                for row in c.points().rows() {
                    for k in 0..d {
                        let diff = row[k] - mean[k];
                        var[k] += diff * diff;
                    }
                }
            }
            var /= count;
            if var.iter().any(|v| *v <= 0.0) {
                return Err(Error::DegenerateData(
                    "zero variance on at least one axis".into(),
                ));
            }
            Ok(NormalizationStats {
                mean,
                scale: var.mapv(f64::sqrt),
                mode,
            })
        }
    }
}

/// Sample `n` points by unprojecting depth-map pixels, drawn with probability
/// inversely proportional to their depth (denser sampling of near surfaces).
///
/// `depth` is H x W, strictly positive; `+inf` entries get zero weight.
pub fn unproject_depth(
    depth: &Array2<f64>,
    cam: &CameraIntrinsics,
    n: usize,
    rng: &mut StreamRng,
) -> Result<PointCloud> {
    let (h, w) = depth.dim();
    if h != cam.height || w != cam.width {
        return Err(Error::SizeError(format!(
            "depth map {h} x {w} does not match camera image {} x {}",
            cam.height, cam.width
        )));
    }
    if depth.iter().any(|d| *d <= 0.0 || d.is_nan()) {
        return Err(Error::InvalidDepth(
            "depth map entries must be strictly positive".into(),
        ));
    }
    let mut cumulative = Vec::with_capacity(h * w);
    let mut total = 0.0;
    for d in depth.iter() {
        total += 1.0 / d;
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidDepth("depth map has zero total weight".into()));
    }
    let mut pts = Array2::zeros((n, 3));
    for i in 0..n {
        let target = rng.uniform() * total;
        let idx = cumulative.partition_point(|c| *c <= target).min(h * w - 1);
        let (r, c) = (idx / w, idx % w);
        let p_h = (r as f64 + 0.5) / h as f64;
        let p_w = (c as f64 + 0.5) / w as f64;
        let (x, y, z) = cam.unproject_point(p_h, p_w, depth[[r, c]]);
        pts[[i, 0]] = x;
        pts[[i, 1]] = y;
        pts[[i, 2]] = z;
    }
    PointCloud::euclidean(pts)
}

/// Uniform subsample of `m` points without replacement.
pub fn subsample(cloud: &PointCloud, m: usize, rng: &mut StreamRng) -> Result<PointCloud> {
    if m > cloud.len() {
        return Err(Error::SizeError(format!(
            "cannot subsample {m} points from a cloud of {}",
            cloud.len()
        )));
    }
    if m == 0 {
        return Err(Error::SizeError("subsample count must be >= 1".into()));
    }
    let idx = rng.choose_indices(cloud.len(), m);
    let mut pts = Array2::zeros((m, cloud.dim()));
    for (out_i, &src_i) in idx.iter().enumerate() {
        pts.row_mut(out_i).assign(&cloud.points().row(src_i));
    }
    PointCloud::new(pts, cloud.frame())
}
