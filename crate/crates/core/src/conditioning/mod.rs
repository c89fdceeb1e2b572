//! Image-feature extraction and the two conditioning modes: per-point
//! projective lookup and global mean-pooled embedding.
//!
//! The feature extractor is a small stack of stride-2 3x3 convolutions whose
//! stage outputs form a multi-scale pyramid; it is trained jointly with the
//! score network. Projective conditioning projects each (noisy) point onto
//! the image plane and bilinearly samples the pyramid at that location,
//! every denoising step; out-of-image lookups return zeros.

pub mod image;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::rng::StreamRng;
use crate::scorenet::ParamSet;

pub use image::Image;

/// One level of a feature pyramid: an (h*w) x channels value grid.
#[derive(Debug, Clone)]
pub struct GridLevel {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl GridLevel {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Multi-scale image features.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub levels: Vec<GridLevel>,
}

impl FeatureGrid {
    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|l| l.channels()).sum()
    }
}

/// How image features reach the score network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Unconditional.
    None,
    /// Per-point bilinear lookup at the point's projection.
    Projective,
    /// Spatially mean-pooled features injected through the noise-embedding
    /// pathway (group-norm bias/scale).
    Global,
}

impl ConditioningMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConditioningMode::None),
            "projective" => Ok(ConditioningMode::Projective),
            "global" => Ok(ConditioningMode::Global),
            other => Err(Error::InvalidInput(format!(
                "unknown conditioning mode {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Projective => "projective",
            ConditioningMode::Global => "global",
        }
    }
}

/// Convolutional extractor shape: input channels and per-stage output
/// channels (each stage halves the resolution).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    pub stages: Vec<usize>,
}

impl ExtractorConfig {
    /// Desk-scale default: 3 stages of 8/16/32 channels.
    pub fn desk(in_channels: usize) -> Self {
        ExtractorConfig {
            in_channels,
            stages: vec![8, 16, 32],
        }
    }

    pub fn tiny(in_channels: usize) -> Self {
        ExtractorConfig {
            in_channels,
            stages: vec![4, 8],
        }
    }

    pub fn total_channels(&self) -> usize {
        self.stages.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

/// Index map from extractor stages to [`ParamSet`] slots.
#[derive(Debug, Clone)]
pub struct ExtractorLayout {
    stages: Vec<ConvIdx>,
}

impl ExtractorLayout {
    pub fn init(set: &mut ParamSet, cfg: &ExtractorConfig, rng: &mut StreamRng) -> ExtractorLayout {
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut c_in = cfg.in_channels;
        for (k, &c_out) in cfg.stages.iter().enumerate() {
            let fan_in = 9 * c_in;
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = set.push(
                format!("extractor.stage{k}.w"),
                Array2::from_shape_fn((fan_in, c_out), |_| std * rng.normal()),
            );
            let b = set.push(format!("extractor.stage{k}.b"), Array2::zeros((1, c_out)));
            stages.push(ConvIdx { w, b });
            c_in = c_out;
        }
        ExtractorLayout { stages }
    }
}

/// A pyramid level still attached to a tape.
#[derive(Debug, Clone, Copy)]
pub struct LevelVar {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Patch-gather indices for a stride-2 3x3 convolution with zero padding 1.
fn conv_tap_indices(h: usize, w: usize) -> (usize, usize, [Vec<isize>; 9]) {
    let h_out = h.div_ceil(2);
    let w_out = w.div_ceil(2);
    let mut taps: [Vec<isize>; 9] = Default::default();
    for (k, tap) in taps.iter_mut().enumerate() {
        let (kr, kc) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
        tap.reserve(h_out * w_out);
        for r_out in 0..h_out as isize {
            for c_out in 0..w_out as isize {
                let (r_in, c_in) = (2 * r_out + kr, 2 * c_out + kc);
                let idx = if r_in >= 0 && r_in < h as isize && c_in >= 0 && c_in < w as isize {
                    r_in * w as isize + c_in
                } else {
                    -1
                };
                tap.push(idx);
            }
        }
    }
    (h_out, w_out, taps)
}

/// Run the extractor on a tape. Pyramid levels are the pre-activation stage
/// outputs; between stages the input passes through x * exp(-x^2/2), a
/// sign-preserving gate that maps zero to zero.
pub fn extract_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    layout: &ExtractorLayout,
    image_var: Var,
    height: usize,
    width: usize,
) -> Vec<LevelVar> {
    let mut x = image_var;
    let (mut h, mut w) = (height, width);
    let mut levels = Vec::with_capacity(layout.stages.len());
    for (k, idx) in layout.stages.iter().enumerate() {
        let input = if k == 0 {
            x
        } else {
            let gate = tape.gaussian(x, 1.0);
            tape.mul(x, gate)
        };
        let (h_out, w_out, taps) = conv_tap_indices(h, w);
        let gathered: Vec<Var> = taps
            .iter()
            .map(|t| tape.gather_rows(input, t.clone()))
            .collect();
        let patches = tape.concat_cols(&gathered);
        let y = tape.matmul(patches, vars[idx.w]);
        let y = tape.add_row(y, vars[idx.b]);
        levels.push(LevelVar {
            var: y,
            h: h_out,
            w: w_out,
        });
        x = y;
        h = h_out;
        w = w_out;
    }
    levels
}

/// Extract a feature pyramid as plain values (scratch tape inside).
pub fn extract_features(
    set: &ParamSet,
    layout: &ExtractorLayout,
    image: &Image,
) -> Result<FeatureGrid> {
    if !image.data.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let mut tape = Tape::new();
    let vars = set.leaves(&mut tape);
    let img = tape.leaf(image.data.clone());
    let levels = extract_on_tape(&mut tape, &vars, layout, img, image.height, image.width);
    Ok(FeatureGrid {
        levels: levels
            .into_iter()
            .map(|l| GridLevel {
                h: l.h,
                w: l.w,
                data: tape.value(l.var).clone(),
            })
            .collect(),
    })
}

/// Bilinear lookup of every pyramid level at (N,2) normalized coordinates,
/// concatenated across levels; tape version.
pub fn lookup_on_tape(tape: &mut Tape, levels: &[LevelVar], coords: Var) -> Var {
    let parts: Vec<Var> = levels
        .iter()
        .map(|l| tape.bilinear_lookup(l.var, coords, l.h, l.w))
        .collect();
    tape.concat_cols(&parts)
}

/// Bilinear lookup on plain values: N x C_tot features for N x 2 coords.
pub fn projective_lookup(grid: &FeatureGrid, coords: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let c = tape.leaf(coords.clone());
    let levels: Vec<LevelVar> = grid
        .levels
        .iter()
        .map(|l| LevelVar {
            var: tape.leaf(l.data.clone()),
            h: l.h,
            w: l.w,
        })
        .collect();
    let out = lookup_on_tape(&mut tape, &levels, c);
    tape.value(out).clone()
}

/// Per-level spatial mean, concatenated: tape version yields a (1, C_tot) row.
pub fn pool_on_tape(tape: &mut Tape, levels: &[LevelVar]) -> Var {
    let parts: Vec<Var> = levels.iter().map(|l| tape.mean_rows(l.var)).collect();
    tape.concat_cols(&parts)
}

/// Per-level spatial mean of a value grid.
pub fn global_pool(grid: &FeatureGrid) -> Array2<f64> {
    let mut tape = Tape::new();
    let levels: Vec<LevelVar> = grid
        .levels
        .iter()
        .map(|l| LevelVar {
            var: tape.leaf(l.data.clone()),
            h: l.h,
            w: l.w,
        })
        .collect();
    let out = pool_on_tape(&mut tape, &levels);
    tape.value(out).clone()
}

/// Build augmented token features for a euclidean camera-frame cloud:
/// projective mode concatenates per-point looked-up features to the
/// coordinates; global and unconditional modes pass coordinates through
/// (the global path routes through the noise embedding instead).
pub fn condition_points(
    mode: ConditioningMode,
    points: &Array2<f64>,
    cam: &CameraIntrinsics,
    grid: Option<&FeatureGrid>,
) -> Result<Array2<f64>> {
    match mode {
        ConditioningMode::None | ConditioningMode::Global => Ok(points.clone()),
        ConditioningMode::Projective => {
            let grid = grid.ok_or_else(|| {
                Error::UsageError("projective conditioning needs a feature grid".into())
            })?;
            let mut tape = Tape::new();
            let pts = tape.leaf(points.clone());
            let proj = tape.pinhole_project(pts, cam);
            let coords = tape.value(proj).clone();
            let feats = projective_lookup(grid, &coords);
            let mut out = Array2::zeros((points.nrows(), points.ncols() + feats.ncols()));
            out.slice_mut(ndarray::s![.., ..points.ncols()]).assign(points);
            out.slice_mut(ndarray::s![.., points.ncols()..]).assign(&feats);
            Ok(out)
        }
    }
}
