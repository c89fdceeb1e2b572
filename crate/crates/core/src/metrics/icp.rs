//! Iterative closest point rigid registration with closed-form orthogonal
//! Procrustes updates (optional scale estimation).

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Similarity transform: x -> scale * R x + t.
#[derive(Debug, Clone)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let mut out = Array2::zeros((cloud.len(), 3));
        for (i, row) in cloud.points().rows().into_iter().enumerate() {
            let p = Vector3::new(row[0], row[1], row[2]);
            let q = self.scale * self.rotation * p + self.translation;
            out[[i, 0]] = q[0];
            out[[i, 1]] = q[1];
            out[[i, 2]] = q[2];
        }
        PointCloud::new(out, cloud.frame())
    }

    /// Compose: (other then self)(x) = self(other(x)).
    fn after(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.scale * self.rotation * other.translation + self.translation,
            scale: self.scale * other.scale,
        }
    }
}

/// Closed-form least-squares similarity fit of paired points
/// (source[i] -> target[i]).
fn procrustes(
    source: &Array2<f64>,
    target: &Array2<f64>,
    estimate_scale: bool,
) -> Result<RigidTransform> {
    let n = source.nrows() as f64;
    let centroid = |m: &Array2<f64>| {
        let s = m.sum_axis(ndarray::Axis(0));
        Vector3::new(s[0] / n, s[1] / n, s[2] / n)
    };
    let mu_s = centroid(source);
    let mu_t = centroid(target);

    let mut h = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s_row, t_row) in source.rows().into_iter().zip(target.rows()) {
        let s = Vector3::new(s_row[0], s_row[1], s_row[2]) - mu_s;
        let t = Vector3::new(t_row[0], t_row[1], t_row[2]) - mu_t;
        h += t * s.transpose();
        var_s += s.norm_squared();
    }
    h /= n;
    var_s /= n;

    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sing = svd.singular_values;
    if sing[1] < 1e-12 * sing[0].max(1e-300) || var_s < 1e-24 {
        return Err(Error::AlignmentFailure(
            "rank-deficient correspondence configuration".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if estimate_scale {
        let trace = sing[0] * d[(0, 0)] + sing[1] * d[(1, 1)] + sing[2] * d[(2, 2)];
        trace / var_s
    } else {
        1.0
    };
    let translation = mu_t - scale * rotation * mu_s;
    Ok(RigidTransform {
        rotation,
        translation,
        scale,
    })
}

/// Centroid/spread pre-alignment: identity rotation, translation from the
/// centroid offset, scale (when estimated) from the RMS radii ratio. Gives
/// the nearest-neighbor step a usable starting correspondence.
fn initial_alignment(
    source: &PointCloud,
    target: &PointCloud,
    estimate_scale: bool,
) -> RigidTransform {
    let stats = |c: &PointCloud| {
        let n = c.len() as f64;
        let s = c.points().sum_axis(ndarray::Axis(0));
        let mu = Vector3::new(s[0] / n, s[1] / n, s[2] / n);
        let mut rms = 0.0;
        for row in c.points().rows() {
            let p = Vector3::new(row[0], row[1], row[2]) - mu;
            rms += p.norm_squared();
        }
        (mu, (rms / n).sqrt())
    };
    let (mu_s, rms_s) = stats(source);
    let (mu_t, rms_t) = stats(target);
    let scale = if estimate_scale && rms_s > 1e-12 && rms_t > 1e-12 {
        rms_t / rms_s
    } else {
        1.0
    };
    RigidTransform {
        rotation: Matrix3::identity(),
        translation: mu_t - scale * mu_s,
        scale,
    }
}

/// Result of an ICP run: the recovered transform, the transformed source,
/// and the per-iteration mean correspondence distance.
pub struct IcpResult {
    pub transform: RigidTransform,
    pub aligned: PointCloud,
    pub objective_trace: Vec<f64>,
}

/// Align `source` onto `target` by alternating nearest-neighbor
/// correspondences and closed-form Procrustes until the mean correspondence
/// distance improves by less than `tol` or `max_iters` is reached.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    estimate_scale: bool,
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::SizeError("icp needs at least 3 points per cloud".into()));
    }
    if source.dim() != 3 || target.dim() != 3 {
        return Err(Error::SizeError("icp operates on 3-d clouds".into()));
    }
    let mut transform = initial_alignment(source, target, estimate_scale);
    let mut current = transform.apply(source)?;
    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;

    for _ in 0..max_iters.max(1) {
        // nearest-neighbor correspondences
        let mut matched = Array2::zeros((current.len(), 3));
        let mut obj = 0.0;
        for (i, s_row) in current.points().rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (j, t_row) in target.points().rows().into_iter().enumerate() {
                let d2: f64 = s_row
                    .iter()
                    .zip(t_row.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            matched.row_mut(i).assign(&target.points().row(best.1));
            obj += best.0.sqrt();
        }
        obj /= current.len() as f64;
        trace.push(obj);
        if prev_obj - obj < tol {
            break;
        }
        prev_obj = obj;

        let delta = procrustes(current.points(), &matched, estimate_scale)?;
        current = delta.apply(&current)?;
        transform = delta.after(&transform);
    }

    Ok(IcpResult {
        transform,
        aligned: current,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn rotation_xyz(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
        let rx = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, ax.cos(), -ax.sin(),
            0.0, ax.sin(), ax.cos(),
        );
        let ry = Matrix3::new(
            ay.cos(), 0.0, ay.sin(),
            0.0, 1.0, 0.0,
            -ay.sin(), 0.0, ay.cos(),
        );
        let rz = Matrix3::new(
            az.cos(), -az.sin(), 0.0,
            az.sin(), az.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        rz * ry * rx
    }

    fn random_cloud(rng: &mut StreamRng, n: usize) -> PointCloud {
        PointCloud::euclidean(rng.normal_matrix(n, 3)).unwrap()
    }

    #[test]
    fn recovers_small_rigid_transform() {
        let mut rng = StreamRng::new(1);
        let source = random_cloud(&mut rng, 60);
        let r = rotation_xyz(0.15, -0.1, 0.2); // all under 15 degrees
        let t = Vector3::new(0.05, -0.03, 0.08);
        let truth = RigidTransform {
            rotation: r,
            translation: t,
            scale: 1.0,
        };
        let target = truth.apply(&source).unwrap();
        let res = icp_align(&source, &target, false, 50, 1e-12).unwrap();
        let rms: f64 = (res
            .aligned
            .points()
            .iter()
            .zip(target.points().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (60.0 * 3.0))
            .sqrt();
        assert!(rms < 1e-6, "rms {rms}");
        // orthonormality and determinant of the recovered rotation
        let rtr = res.transform.rotation.transpose() * res.transform.rotation;
        assert!((rtr - Matrix3::identity()).norm() < 1e-9);
        assert!((res.transform.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_on_equal_clouds() {
        let mut rng = StreamRng::new(2);
        let cloud = random_cloud(&mut rng, 30);
        let res = icp_align(&cloud, &cloud, false, 20, 1e-12).unwrap();
        assert!((res.transform.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(res.transform.translation.norm() < 1e-9);
        assert!(res.objective_trace[0] < 1e-12);
    }

    #[test]
    fn recovers_scale_factor_two() {
        let mut rng = StreamRng::new(3);
        let source = random_cloud(&mut rng, 80);
        let truth = RigidTransform {
            rotation: rotation_xyz(0.05, 0.04, -0.06),
            translation: Vector3::new(0.02, 0.01, -0.02),
            scale: 2.0,
        };
        let target = truth.apply(&source).unwrap();
        let res = icp_align(&source, &target, true, 80, 1e-14).unwrap();
        assert!(
            (res.transform.scale - 2.0).abs() < 1e-4,
            "scale {}",
            res.transform.scale
        );
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = StreamRng::new(4);
        let source = random_cloud(&mut rng, 50);
        let truth = RigidTransform {
            rotation: rotation_xyz(0.2, 0.1, -0.15),
            translation: Vector3::new(0.1, -0.05, 0.02),
            scale: 1.0,
        };
        let target = truth.apply(&source).unwrap();
        let res = icp_align(&source, &target, false, 40, 0.0).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {w:?}");
        }
    }

    #[test]
    fn collinear_points_fail_alignment() {
        let mut pts = Array2::zeros((5, 3));
        for i in 0..5 {
            pts[[i, 0]] = i as f64;
        }
        let line = PointCloud::euclidean(pts).unwrap();
        assert!(matches!(
            icp_align(&line, &line, false, 10, 1e-9),
            Err(Error::AlignmentFailure(_))
        ));
    }
}
