//! Model plumbing: the denoiser interface shared by samplers and likelihood,
//! the closed-form Gaussian reference model, the frame map between world
//! coordinates and the diffusion frame, and the trainable network model with
//! its denoising loss.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};

use crate::autodiff::{Tape, Var};
use crate::conditioning::{
    extract_on_tape, lookup_on_tape, pool_on_tape, ConditioningMode, ExtractorConfig,
    ExtractorLayout, FeatureGrid, Image, LevelVar,
};
use crate::diffusion::{perturb, sample_sigma, DiffusionConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    from_frustum, to_frustum, CameraIntrinsics, Frame, NormalizationStats, PointCloud,
};
use crate::rng::StreamRng;
use crate::scorenet::{embed_cnoise, forward, NetConfig, NetLayout, ParamSet};

/// Bijection between world coordinates and the frame diffusion runs in:
/// an optional frustum reparameterization followed by affine normalization.
#[derive(Debug, Clone)]
pub struct FrameMap {
    pub frame: Frame,
    pub norm: NormalizationStats,
    pub cam: Option<CameraIntrinsics>,
}

impl FrameMap {
    pub fn euclidean(norm: NormalizationStats, cam: Option<CameraIntrinsics>) -> Self {
        FrameMap {
            frame: Frame::Euclidean,
            norm,
            cam,
        }
    }

    pub fn frustum(norm: NormalizationStats, cam: CameraIntrinsics) -> Self {
        FrameMap {
            frame: Frame::Frustum,
            norm,
            cam: Some(cam),
        }
    }

    pub fn identity(dim: usize) -> Self {
        FrameMap {
            frame: Frame::Euclidean,
            norm: NormalizationStats::identity(dim),
            cam: None,
        }
    }

    fn cam(&self) -> Result<&CameraIntrinsics> {
        self.cam
            .as_ref()
            .ok_or_else(|| Error::UsageError("frame map needs camera intrinsics".into()))
    }

    /// World (euclidean camera-frame) cloud to diffusion-frame coordinates.
    pub fn world_to_diffusion(&self, cloud: &PointCloud) -> Result<Array2<f64>> {
        let staged = match self.frame {
            Frame::Euclidean => cloud.clone(),
            Frame::Frustum => to_frustum(cloud, self.cam()?)?,
        };
        Ok(self.norm.apply(&staged)?.into_points())
    }

    /// Diffusion-frame coordinates back to a world cloud.
    pub fn diffusion_to_world(&self, points: &Array2<f64>) -> Result<PointCloud> {
        let denorm = self
            .norm
            .invert(&PointCloud::new(points.clone(), self.frame)?)?;
        match self.frame {
            Frame::Euclidean => Ok(denorm),
            Frame::Frustum => from_frustum(&denorm, self.cam()?),
        }
    }

    /// On-tape map from diffusion frame to euclidean camera frame, used to
    /// project evolving noisy points for feature lookup.
    pub fn to_camera_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let denorm = tape.affine_cols(x, self.norm.scale.clone(), self.norm.mean.clone());
        match self.frame {
            Frame::Euclidean => Ok(denorm),
            Frame::Frustum => Ok(tape.frustum_to_euclid(denorm, self.cam()?)),
        }
    }

    /// Log-determinant of the world -> diffusion Jacobian at the given
    /// diffusion-frame points: the likelihood frame correction.
    pub fn log_det_correction(&self, points: &Array2<f64>) -> Result<f64> {
        let n = points.nrows();
        let mut total = self.norm.log_det_apply(n);
        if self.frame == Frame::Frustum {
            let cam = self.cam()?;
            let (h, w) = (cam.height as f64, cam.width as f64);
            let denorm = self
                .norm
                .invert(&PointCloud::new(points.clone(), Frame::Frustum)?)?;
            for row in denorm.points().rows() {
                let p_h = crate::geometry::sigmoid(row[0]);
                let p_w = crate::geometry::sigmoid(row[1]);
                let z = row[2].exp();
                // det d(u,v,l)/d(x,y,z) = fx*fy / (H*W * z^3 * ph(1-ph) * pw(1-pw))
                total += cam.fx.ln() + cam.fy.ln()
                    - h.ln()
                    - w.ln()
                    - 3.0 * z.ln()
                    - (p_h * (1.0 - p_h)).ln()
                    - (p_w * (1.0 - p_w)).ln();
            }
        }
        Ok(total)
    }
}

/// A denoiser D(x; sigma) usable by the samplers and the likelihood solver.
/// `x` is always in the model's diffusion frame.
pub trait DenoiseModel {
    fn out_dim(&self) -> usize;

    fn diffusion_config(&self) -> &DiffusionConfig;

    /// Denoised estimate D(x; sigma).
    fn denoise(&self, x: &Array2<f64>, sigma: f64) -> Result<Array2<f64>>;

    /// Vector-Jacobian product: (D(x; sigma), upstream^T dD/dx).
    fn denoise_vjp(
        &self,
        x: &Array2<f64>,
        sigma: f64,
        upstream: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;

    /// Score s(x, sigma) = (D(x; sigma) - x) / sigma^2.
    fn score(&self, x: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        Ok((self.denoise(x, sigma)? - x) / (sigma * sigma))
    }

    /// Map between world coordinates and the diffusion frame, when the model
    /// has one (identity otherwise).
    fn frame_map(&self) -> Option<&FrameMap> {
        None
    }

    /// Number of network evaluations since the last reset.
    fn eval_count(&self) -> u64;

    fn reset_eval_count(&self);
}

/// Closed-form denoiser for data distributed as N(0, sigma_data^2 I):
/// D(x; sigma) = x * sigma_data^2 / (sigma^2 + sigma_data^2).
pub struct AnalyticGaussian {
    cfg: DiffusionConfig,
    dim: usize,
    frame: Option<FrameMap>,
    evals: AtomicU64,
}

impl AnalyticGaussian {
    pub fn new(cfg: DiffusionConfig, dim: usize) -> Self {
        AnalyticGaussian {
            cfg,
            dim,
            frame: None,
            evals: AtomicU64::new(0),
        }
    }

    pub fn with_frame(mut self, frame: FrameMap) -> Self {
        self.frame = Some(frame);
        self
    }

    fn shrink(&self, sigma: f64) -> f64 {
        let sd2 = self.cfg.sigma_data * self.cfg.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }
}

impl DenoiseModel for AnalyticGaussian {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn diffusion_config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    fn denoise(&self, x: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(x * self.shrink(sigma))
    }

    fn denoise_vjp(
        &self,
        x: &Array2<f64>,
        sigma: f64,
        upstream: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let s = self.shrink(sigma);
        Ok((x * s, upstream * s))
    }

    fn frame_map(&self) -> Option<&FrameMap> {
        self.frame.as_ref()
    }

    fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }
}

/// The trainable model: score network plus (for conditional modes) the
/// convolutional feature extractor, all parameters in one flat set.
pub struct NetModel {
    pub net_cfg: NetConfig,
    pub diff_cfg: DiffusionConfig,
    pub mode: ConditioningMode,
    pub extractor_cfg: Option<ExtractorConfig>,
    pub frame: FrameMap,
    pub params: ParamSet,
    pub net_layout: NetLayout,
    pub extractor_layout: Option<ExtractorLayout>,
    pub dim: usize,
    grid: Option<FeatureGrid>,
    evals: AtomicU64,
}

impl NetModel {
    /// Initialize a fresh model. `extractor_cfg` is required for conditional
    /// modes and must describe the dataset's image channels.
    pub fn init(
        net_cfg: NetConfig,
        diff_cfg: DiffusionConfig,
        mode: ConditioningMode,
        extractor_cfg: Option<ExtractorConfig>,
        frame: FrameMap,
        dim: usize,
        rng: &mut StreamRng,
    ) -> Result<NetModel> {
        net_cfg.validate()?;
        if mode != ConditioningMode::None && extractor_cfg.is_none() {
            return Err(Error::UsageError(
                "conditional modes need an extractor config".into(),
            ));
        }
        if mode != ConditioningMode::None && frame.cam.is_none() {
            return Err(Error::UsageError(
                "conditional modes need camera intrinsics in the frame map".into(),
            ));
        }
        let mut params = ParamSet::new();
        let extractor_layout = extractor_cfg
            .as_ref()
            .map(|cfg| ExtractorLayout::init(&mut params, cfg, rng));
        let c_tot = extractor_cfg.as_ref().map_or(0, |c| c.total_channels());
        let d_in = match mode {
            ConditioningMode::Projective => dim + c_tot,
            _ => dim,
        };
        let d_cond = match mode {
            ConditioningMode::Global => net_cfg.d_emb + c_tot,
            _ => net_cfg.d_emb,
        };
        let net_layout = NetLayout::init(&mut params, &net_cfg, d_in, d_cond, dim, rng)?;
        Ok(NetModel {
            net_cfg,
            diff_cfg,
            mode,
            extractor_cfg,
            frame,
            params,
            net_layout,
            extractor_layout,
            dim,
            grid: None,
            evals: AtomicU64::new(0),
        })
    }

    /// Attach the conditioning image for subsequent denoise calls (extracts
    /// the feature pyramid once).
    pub fn set_image(&mut self, image: &Image) -> Result<()> {
        let layout = self.extractor_layout.as_ref().ok_or_else(|| {
            Error::UsageError("this model has no feature extractor".into())
        })?;
        let expected = self.extractor_cfg.as_ref().unwrap().in_channels;
        if image.channels != expected {
            return Err(Error::UsageError(format!(
                "model expects {expected}-channel images, got {}",
                image.channels
            )));
        }
        self.grid = Some(crate::conditioning::extract_features(
            &self.params,
            layout,
            image,
        )?);
        Ok(())
    }

    pub fn clear_image(&mut self) {
        self.grid = None;
    }

    pub fn grid(&self) -> Option<&FeatureGrid> {
        self.grid.as_ref()
    }

    fn grid_leaves(&self, tape: &mut Tape) -> Result<Option<Vec<LevelVar>>> {
        match self.mode {
            ConditioningMode::None => Ok(None),
            _ => {
                let grid = self.grid.as_ref().ok_or_else(|| {
                    Error::UsageError(
                        "conditional model needs an image (call set_image first)".into(),
                    )
                })?;
                Ok(Some(
                    grid.levels
                        .iter()
                        .map(|l| LevelVar {
                            var: tape.leaf(l.data.clone()),
                            h: l.h,
                            w: l.w,
                        })
                        .collect(),
                ))
            }
        }
    }

    /// Build D(x; sigma) on a tape: preconditioned wrapper around the score
    /// network with per-mode conditioning.
    fn denoise_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        sigma: f64,
        levels: Option<&[LevelVar]>,
        cached: Option<&[Array2<f64>]>,
    ) -> Result<(Var, Vec<Var>)> {
        if sigma <= 0.0 {
            return Err(Error::DomainError(format!(
                "denoiser needs sigma > 0, got {sigma}"
            )));
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        let cfg = &self.diff_cfg;
        let scaled = tape.scale(x, cfg.c_in(sigma));
        let tokens = match self.mode {
            ConditioningMode::Projective => {
                let levels = levels.ok_or_else(|| {
                    Error::UsageError("projective mode needs feature levels".into())
                })?;
                let cam = self.frame.cam()?;
                let cam_points = self.frame.to_camera_on_tape(tape, x)?;
                let proj = tape.pinhole_project(cam_points, cam);
                let feats = lookup_on_tape(tape, levels, proj);
                tape.concat_cols(&[scaled, feats])
            }
            _ => scaled,
        };
        let mut embed = embed_cnoise(tape, vars, &self.net_layout, &self.net_cfg, cfg.c_noise(sigma));
        if self.mode == ConditioningMode::Global {
            let levels = levels
                .ok_or_else(|| Error::UsageError("global mode needs feature levels".into()))?;
            let pooled = pool_on_tape(tape, levels);
            embed = tape.concat_cols(&[embed, pooled]);
        }
        let out = forward(
            tape,
            vars,
            &self.net_layout,
            &self.net_cfg,
            tokens,
            embed,
            cached,
        )?;
        let skip = tape.scale(x, cfg.c_skip(sigma));
        let scaled_out = tape.scale(out.scores, cfg.c_out(sigma));
        let denoised = tape.add(skip, scaled_out);
        Ok((denoised, out.inducer_trace))
    }

    /// Denoise and also return the per-layer inducer activations for caching.
    pub fn denoise_trace(
        &self,
        x: &Array2<f64>,
        sigma: f64,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.params.leaves(&mut tape);
        let levels = self.grid_leaves(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let (d, trace) = self.denoise_on_tape(&mut tape, &vars, xv, sigma, levels.as_deref(), None)?;
        let trace_vals = trace.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((tape.value(d).clone(), trace_vals))
    }

    /// Denoise with cached inducer activations: token outputs become
    /// independent of one another.
    pub fn denoise_cached(
        &self,
        x: &Array2<f64>,
        sigma: f64,
        cache: &[Array2<f64>],
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.leaves(&mut tape);
        let levels = self.grid_leaves(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let (d, _) =
            self.denoise_on_tape(&mut tape, &vars, xv, sigma, levels.as_deref(), Some(cache))?;
        Ok(tape.value(d).clone())
    }

    /// Mean denoising loss over a batch plus parameter gradients.
    ///
    /// Batch items are (clean diffusion-frame points, optional image). Each
    /// item draws its own sigma (log-uniform) and noise; the loss is
    /// lambda(sigma) * ||D(x + sigma eps; sigma) - x||^2 averaged over batch,
    /// points, and coordinates.
    pub fn loss_and_grads(
        &self,
        batch: &[(Array2<f64>, Option<&Image>)],
        rng: &mut StreamRng,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        if batch.is_empty() {
            return Err(Error::SizeError("loss needs a non-empty batch".into()));
        }
        let sigmas = sample_sigma(&self.diff_cfg, batch.len(), rng);
        let noisy: Vec<Array2<f64>> = batch
            .iter()
            .zip(sigmas.iter())
            .map(|((clean, _), sigma)| perturb(clean, *sigma, rng).0)
            .collect();
        self.loss_and_grads_at(batch, &sigmas, &noisy)
    }

    /// Deterministic core of [`Self::loss_and_grads`]: noise levels and noisy
    /// points supplied by the caller.
    pub fn loss_and_grads_at(
        &self,
        batch: &[(Array2<f64>, Option<&Image>)],
        sigmas: &[f64],
        noisy: &[Array2<f64>],
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.params.leaves(&mut tape);
        let mut total: Option<Var> = None;
        for (((clean, image), sigma), noisy_pts) in
            batch.iter().zip(sigmas.iter()).zip(noisy.iter())
        {
            let levels = match self.mode {
                ConditioningMode::None => None,
                _ => {
                    let image = image.ok_or_else(|| {
                        Error::UsageError("conditional training batch item lacks an image".into())
                    })?;
                    let layout = self.extractor_layout.as_ref().unwrap();
                    let img = tape.leaf(image.data.clone());
                    Some(extract_on_tape(
                        &mut tape,
                        &vars,
                        layout,
                        img,
                        image.height,
                        image.width,
                    ))
                }
            };
            let xv = tape.leaf(noisy_pts.clone());
            let (denoised, _) =
                self.denoise_on_tape(&mut tape, &vars, xv, *sigma, levels.as_deref(), None)?;
            let clean_leaf = tape.leaf(clean.clone());
            let diff = tape.sub(denoised, clean_leaf);
            let sq = tape.mul(diff, diff);
            let mse = tape.mean_all(sq);
            let weighted = tape.scale(mse, self.diff_cfg.loss_weight(*sigma));
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        let total = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
        let loss = tape.value(total)[[0, 0]];
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence(format!(
                "loss became non-finite ({loss})"
            )));
        }
        let grads = tape.backward_scalar(total);
        Ok((loss, self.params.collect_grads(&grads, &vars)))
    }
}

impl DenoiseModel for NetModel {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn diffusion_config(&self) -> &DiffusionConfig {
        &self.diff_cfg
    }

    fn denoise(&self, x: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.leaves(&mut tape);
        let levels = self.grid_leaves(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let (d, _) = self.denoise_on_tape(&mut tape, &vars, xv, sigma, levels.as_deref(), None)?;
        Ok(tape.value(d).clone())
    }

    fn denoise_vjp(
        &self,
        x: &Array2<f64>,
        sigma: f64,
        upstream: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let vars = self.params.leaves(&mut tape);
        let levels = self.grid_leaves(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let (d, _) = self.denoise_on_tape(&mut tape, &vars, xv, sigma, levels.as_deref(), None)?;
        let grads = tape.backward(d, upstream.clone());
        let dx = grads.get_or_zeros(xv, x.dim());
        Ok((tape.value(d).clone(), dx))
    }

    fn frame_map(&self) -> Option<&FrameMap> {
        Some(&self.frame)
    }

    fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }
}

/// lambda(sigma) * mean((denoised - clean)^2): the per-item training loss.
pub fn weighted_denoising_mse(
    cfg: &DiffusionConfig,
    sigma: f64,
    denoised: &Array2<f64>,
    clean: &Array2<f64>,
) -> f64 {
    let diff = denoised - clean;
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
    cfg.loss_weight(sigma) * mse
}

/// Flattened-vector norm helper used by frame tests.
pub fn flat_norm(points: &Array2<f64>) -> f64 {
    points.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Convenience: a frame map scaled by `s` (every axis), for change-of-
/// variables tests.
pub fn scaled_frame(dim: usize, s: f64) -> FrameMap {
    FrameMap {
        frame: Frame::Euclidean,
        norm: NormalizationStats {
            mean: Array1::zeros(dim),
            scale: Array1::from_elem(dim, s),
            mode: crate::geometry::NormalizationMode::Global,
        },
        cam: None,
    }
}
