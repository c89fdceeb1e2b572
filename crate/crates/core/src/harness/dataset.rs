//! Synthetic scene generation: parametric shapes sampled uniformly by
//! surface area, placed inside the camera frustum, and rendered to small
//! silhouette + inverse-depth images by z-buffered point splatting.

use std::path::Path;

use ndarray::Array2;

use crate::conditioning::image::{read_img1, write_img1, Image};
use crate::error::{Error, Result};
use crate::geometry::io::{read_pcb, write_pcb};
use crate::geometry::{project, CameraIntrinsics, PointCloud, FRUSTUM_MARGIN};
use crate::harness::config::ConfigFile;
use crate::rng::StreamRng;

/// Shape family of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Box,
    Torus,
}

impl ShapeClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeClass::Sphere),
            "box" => Ok(ShapeClass::Box),
            "torus" => Ok(ShapeClass::Torus),
            other => Err(Error::InvalidInput(format!("unknown shape family {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Torus => "torus",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<ShapeClass>> {
        let families: Result<Vec<ShapeClass>> =
            s.split(',').map(|f| ShapeClass::parse(f.trim())).collect();
        let families = families?;
        if families.is_empty() {
            return Err(Error::InvalidInput("need at least one shape family".into()));
        }
        Ok(families)
    }
}

/// One generated example: a camera-frame surface cloud and its rendering.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub image: Image,
    pub cam: CameraIntrinsics,
    pub class: ShapeClass,
}

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub families: Vec<ShapeClass>,
    pub count: usize,
    pub points: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.image_size as f64, self.image_size)
    }
}

/// A loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub cam: CameraIntrinsics,
    pub spec: DatasetSpec,
}

fn random_rotation(rng: &mut StreamRng) -> [[f64; 3]; 3] {
    // uniform rotation from a normalized quaternion
    let (mut q, mut norm) = ([0.0f64; 4], 0.0);
    for v in q.iter_mut() {
        *v = rng.normal();
    }
    for v in q.iter() {
        norm += v * v;
    }
    let norm = norm.sqrt();
    for v in q.iter_mut() {
        *v /= norm;
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Uniform-by-area surface samples of a unit-latent shape, centered at the
/// origin. Returns (points, bounding radius).
fn sample_surface(
    class: ShapeClass,
    n: usize,
    rng: &mut StreamRng,
) -> (Array2<f64>, f64) {
    let mut pts = Array2::zeros((n, 3));
    match class {
        ShapeClass::Sphere => {
            let r = rng.uniform_in(0.35, 0.7);
            for mut row in pts.rows_mut() {
                let mut v = [0.0f64; 3];
                let norm = loop {
                    for e in v.iter_mut() {
                        *e = rng.normal();
                    }
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-9 {
                        break n;
                    }
                };
                for d in 0..3 {
                    row[d] = v[d] / norm * r;
                }
            }
            (pts, r)
        }
        ShapeClass::Box => {
            let half = [
                rng.uniform_in(0.25, 0.6),
                rng.uniform_in(0.25, 0.6),
                rng.uniform_in(0.25, 0.6),
            ];
            // face pair k has area proportional to the product of the other two
            let areas = [
                half[1] * half[2],
                half[0] * half[2],
                half[0] * half[1],
            ];
            let total: f64 = areas.iter().sum();
            for mut row in pts.rows_mut() {
                let mut pick = rng.uniform() * total;
                let mut axis = 0;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                for d in 0..3 {
                    row[d] = if d == axis {
                        sign * half[d]
                    } else {
                        rng.uniform_in(-half[d], half[d])
                    };
                }
            }
            let radius = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
            (pts, radius)
        }
        ShapeClass::Torus => {
            let ring = rng.uniform_in(0.35, 0.55);
            let tube = rng.uniform_in(0.1, 0.3) * ring;
            torus_surface(ring, tube, &mut pts, rng);
            (pts, ring + tube)
        }
    }
}

/// Torus surface samples, uniform by area: the area element is proportional
/// to (ring + tube cos theta), handled by rejection on theta.
fn torus_surface(ring: f64, tube: f64, pts: &mut Array2<f64>, rng: &mut StreamRng) {
    for mut row in pts.rows_mut() {
        let theta = loop {
            let t = rng.uniform_in(0.0, std::f64::consts::TAU);
            let accept = (ring + tube * t.cos()) / (ring + tube);
            if rng.uniform() < accept {
                break t;
            }
        };
        let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
        let arm = ring + tube * theta.cos();
        row[0] = arm * phi.cos();
        row[1] = arm * phi.sin();
        row[2] = tube * theta.sin();
    }
}

/// Render a cloud to (silhouette, normalized inverse depth) channels by
/// z-buffered point splatting: one pixel per point, nearest depth wins.
pub fn render_scene(cloud: &PointCloud, cam: &CameraIntrinsics) -> Result<Image> {
    let (h, w) = (cam.height, cam.width);
    let proj = project(cloud, cam)?;
    let mut zbuf = vec![f64::INFINITY; h * w];
    for i in 0..cloud.len() {
        let (p_h, p_w, depth) = (proj.coords[[i, 0]], proj.coords[[i, 1]], proj.depth[i]);
        if depth <= 0.0 || !(0.0..1.0).contains(&p_h) || !(0.0..1.0).contains(&p_w) {
            continue;
        }
        let (r, c) = ((p_h * h as f64) as usize, (p_w * w as f64) as usize);
        let slot = &mut zbuf[r * w + c];
        if depth < *slot {
            *slot = depth;
        }
    }
    let covered: Vec<f64> = zbuf.iter().filter(|z| z.is_finite()).cloned().collect();
    let (inv_lo, inv_hi) = covered.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), z| {
        let inv = 1.0 / z;
        (lo.min(inv), hi.max(inv))
    });
    let span = (inv_hi - inv_lo).max(1e-12);
    let mut image = Image::new(h, w, 2);
    for r in 0..h {
        for c in 0..w {
            let z = zbuf[r * w + c];
            if z.is_finite() {
                image.set(r, c, 0, 1.0);
                image.set(r, c, 1, ((1.0 / z) - inv_lo) / span);
            }
        }
    }
    Ok(image)
}

/// Sample one scene: latent shape, pose inside the frustum, rendering.
pub fn sample_scene(
    families: &[ShapeClass],
    points: usize,
    cam: &CameraIntrinsics,
    rng: &mut StreamRng,
) -> Result<SyntheticScene> {
    let class = families[rng.below(families.len())];
    const MAX_TRIES: usize = 100;
    for _ in 0..MAX_TRIES {
        let (local, radius) = sample_surface(class, points, rng);
        let rot = random_rotation(rng);
        let depth = rng.uniform_in(2.5, 4.5);
        // visible half-extent at the shape's depth, with margin for the radius
        let vis_x = (depth - radius) * cam.width as f64 / (2.0 * cam.fx);
        let vis_y = (depth - radius) * cam.height as f64 / (2.0 * cam.fy);
        let room_x = (vis_x - radius) * 0.9;
        let room_y = (vis_y - radius) * 0.9;
        if room_x <= 0.0 || room_y <= 0.0 {
            continue;
        }
        let center = [
            rng.uniform_in(-room_x, room_x),
            rng.uniform_in(-room_y, room_y),
            depth,
        ];
        let mut world = Array2::zeros((points, 3));
        for (i, row) in local.rows().into_iter().enumerate() {
            for d in 0..3 {
                world[[i, d]] = rot[d][0] * row[0] + rot[d][1] * row[1] + rot[d][2] * row[2]
                    + center[d];
            }
        }
        let cloud = PointCloud::euclidean(world)?;
        let proj = project(&cloud, cam)?;
        let margin = 2.0 * FRUSTUM_MARGIN;
        let inside = (0..points).all(|i| {
            proj.depth[i] > 0.1
                && (margin..=1.0 - margin).contains(&proj.coords[[i, 0]])
                && (margin..=1.0 - margin).contains(&proj.coords[[i, 1]])
        });
        if !inside {
            continue;
        }
        let image = render_scene(&cloud, cam)?;
        return Ok(SyntheticScene {
            cloud,
            image,
            cam: *cam,
            class,
        });
    }
    Err(Error::InvalidInput(format!(
        "failed to place a {} inside the frustum after {MAX_TRIES} tries",
        class.name()
    )))
}

/// Generate `spec.count` scenes and write them to `out_dir`: one single-cloud
/// .pcb and one IMG1 per scene, plus a manifest. Byte-identical for a fixed
/// seed.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<()> {
    if spec.count == 0 || spec.points == 0 {
        return Err(Error::SizeError("dataset needs count >= 1 and points >= 1".into()));
    }
    let cam = spec.camera();
    std::fs::create_dir_all(out_dir)?;
    let mut classes = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = StreamRng::stream(spec.seed, i as u64);
        let scene = sample_scene(&spec.families, spec.points, &cam, &mut rng)?;
        write_pcb(
            &out_dir.join(format!("cloud_{i:05}.pcb")),
            std::slice::from_ref(&scene.cloud),
        )?;
        write_img1(&out_dir.join(format!("image_{i:05}.img1")), &scene.image)?;
        classes.push(scene.class.name().to_string());
    }
    let manifest = format!(
        "[dataset]\ncount = {}\npoints = {}\nimage_size = {}\nseed = {}\nfamilies = {}\nclasses = {}\n\
         [camera]\nfx = {}\nfy = {}\ncx = {}\ncy = {}\nheight = {}\nwidth = {}\n",
        spec.count,
        spec.points,
        spec.image_size,
        spec.seed,
        spec.families
            .iter()
            .map(|f| f.name())
            .collect::<Vec<_>>()
            .join(","),
        classes.join(","),
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.height,
        cam.width,
    );
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`gen_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::Format(format!("missing manifest: {e}")))?;
    let cfg = ConfigFile::parse(&manifest)?;
    let count: usize = cfg.require("dataset", "count")?;
    let points: usize = cfg.require("dataset", "points")?;
    let image_size: usize = cfg.require("dataset", "image_size")?;
    let seed: u64 = cfg.require("dataset", "seed")?;
    let families = ShapeClass::parse_list(&cfg.require::<String>("dataset", "families")?)?;
    let classes: Vec<String> = cfg
        .require::<String>("dataset", "classes")?
        .split(',')
        .map(str::to_string)
        .collect();
    let cam = CameraIntrinsics::new(
        cfg.require("camera", "fx")?,
        cfg.require("camera", "fy")?,
        cfg.require("camera", "cx")?,
        cfg.require("camera", "cy")?,
        cfg.require("camera", "height")?,
        cfg.require("camera", "width")?,
    )?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let clouds = read_pcb(&dir.join(format!("cloud_{i:05}.pcb")))?;
        let cloud = clouds.into_iter().next().ok_or_else(|| {
            Error::Format(format!("cloud file {i} holds no cloud"))
        })?;
        let image = read_img1(&dir.join(format!("image_{i:05}.img1")))?;
        let class = ShapeClass::parse(classes.get(i).map(String::as_str).unwrap_or("sphere"))?;
        scenes.push(SyntheticScene {
            cloud,
            image,
            cam,
            class,
        });
    }
    Ok(Dataset {
        scenes,
        cam,
        spec: DatasetSpec {
            families,
            count,
            points,
            image_size,
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            families: vec![ShapeClass::Sphere, ShapeClass::Box, ShapeClass::Torus],
            count: 6,
            points: 64,
            image_size: 32,
            seed: 11,
        }
    }

    #[test]
    fn sphere_points_sit_on_the_surface() {
        let mut rng = StreamRng::new(1);
        let (pts, r) = sample_surface(ShapeClass::Sphere, 200, &mut rng);
        for row in pts.rows() {
            let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            assert!((norm - r).abs() < 1e-9);
        }
    }

    #[test]
    fn torus_points_on_surface() {
        let mut rng = StreamRng::new(2);
        let (ring, tube) = (0.5, 0.12);
        let mut pts = Array2::zeros((500, 3));
        torus_surface(ring, tube, &mut pts, &mut rng);
        // every point satisfies the implicit torus equation
        for r in pts.rows() {
            let arm = (r[0] * r[0] + r[1] * r[1]).sqrt() - ring;
            let d = (arm * arm + r[2] * r[2]).sqrt();
            assert!((d - tube).abs() < 1e-9, "tube distance {d}");
        }
        // area weighting favors the outer rim: mean of cos(theta) is
        // tube / (2 ring) instead of zero
        let mean_cos: f64 = pts
            .rows()
            .into_iter()
            .map(|r| ((r[0] * r[0] + r[1] * r[1]).sqrt() - ring) / tube)
            .sum::<f64>()
            / 500.0;
        let expect = tube / (2.0 * ring);
        assert!((mean_cos - expect).abs() < 0.1, "{mean_cos} vs {expect}");
    }

    #[test]
    fn scenes_fit_in_frustum_and_render_matches_projection() {
        let s = spec();
        let cam = s.camera();
        for i in 0..4 {
            let mut rng = StreamRng::stream(3, i);
            let scene = sample_scene(&s.families, s.points, &cam, &mut rng).unwrap();
            let proj = project(&scene.cloud, &cam).unwrap();
            let mut expected = vec![false; 32 * 32];
            for k in 0..scene.cloud.len() {
                assert!(proj.depth[k] > 0.0);
                let (ph, pw) = (proj.coords[[k, 0]], proj.coords[[k, 1]]);
                assert!((0.0..1.0).contains(&ph) && (0.0..1.0).contains(&pw));
                expected[(ph * 32.0) as usize * 32 + (pw * 32.0) as usize] = true;
            }
            for r in 0..32 {
                for c in 0..32 {
                    let lit = scene.image.get(r, c, 0) > 0.0;
                    assert_eq!(lit, expected[r * 32 + c], "pixel ({r},{c})");
                }
            }
            // inverse-depth channel normalized to [0, 1]
            for v in scene.image.data.column(1) {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let s = spec();
        gen_dataset(&s, &a).unwrap();
        gen_dataset(&s, &b).unwrap();
        for i in 0..s.count {
            let fa = std::fs::read(a.join(format!("cloud_{i:05}.pcb"))).unwrap();
            let fb = std::fs::read(b.join(format!("cloud_{i:05}.pcb"))).unwrap();
            assert_eq!(fa, fb, "cloud {i} differs across runs");
            let ia = std::fs::read(a.join(format!("image_{i:05}.img1"))).unwrap();
            let ib = std::fs::read(b.join(format!("image_{i:05}.img1"))).unwrap();
            assert_eq!(ia, ib);
        }
        let loaded = load_dataset(&a).unwrap();
        assert_eq!(loaded.scenes.len(), 6);
        assert_eq!(loaded.cam.height, 32);
        assert_eq!(loaded.spec.points, 64);
        for scene in &loaded.scenes {
            assert_eq!(scene.cloud.len(), 64);
            assert_eq!(scene.image.channels, 2);
        }
    }
}
