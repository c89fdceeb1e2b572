//! Training loop: adaptive-moment optimization with belief-style
//! second-moment centering over the denoising loss, per-step cloud
//! subsampling for augmentation, EMA tracking, optional periodic
//! validation with keep-best, and exact resume from a checkpoint.

use ndarray::Array2;

use crate::conditioning::{ConditioningMode, ExtractorConfig};
use crate::diffusion::{estimate_sigma_max, DiffusionConfig, EmaState};
use crate::error::{Error, Result};
use crate::geometry::{
    fit_normalization, subsample, Frame, NormalizationMode, PointCloud,
};
use crate::harness::dataset::Dataset;
use crate::metrics::{one_nna, PairMetric};
use crate::model::{FrameMap, NetModel};
use crate::rng::StreamRng;
use crate::samplers::{sample, SamplerConfig};
use crate::scorenet::NetConfig;

/// Adaptive-moment optimizer with the second moment centered on the first
/// (belief about the gradient): s tracks (g - m)^2 instead of g^2.
pub struct AdaBelief {
    m: Vec<Array2<f64>>,
    s: Vec<Array2<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl AdaBelief {
    pub fn new(shapes: &[Array2<f64>], lr: f64) -> Self {
        AdaBelief {
            m: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
            s: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, s)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.s.iter_mut()))
        {
            azip(m, g, |mv, gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv
            });
            for ((sv, mv), gv) in s.iter_mut().zip(m.iter()).zip(g.iter()) {
                let centered = gv - mv;
                *sv = self.beta2 * *sv + (1.0 - self.beta2) * centered * centered + self.eps;
            }
            for ((pv, mv), sv) in p.iter_mut().zip(m.iter()).zip(s.iter()) {
                let m_hat = mv / bc1;
                let s_hat = sv / bc2;
                *pv -= self.lr * m_hat / (s_hat.sqrt() + self.eps);
            }
        }
    }
}

fn azip(a: &mut Array2<f64>, b: &Array2<f64>, f: impl Fn(&mut f64, f64)) {
    for (x, y) in a.iter_mut().zip(b.iter()) {
        f(x, *y);
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Seeded prefix fraction of the dataset actually used.
    pub data_fraction: f64,
    /// Validate every this many steps (0 disables; enables keep-best).
    pub eval_every: usize,
    /// Per-step subsample size (data augmentation).
    pub points_per_cloud: usize,
    pub mode: ConditioningMode,
    pub norm_mode: NormalizationMode,
    /// Run diffusion in frustum coordinates.
    pub frustum: bool,
    pub seed: u64,
    pub ema_rate: f64,
    /// Pair budget for sigma_max estimation.
    pub sigma_max_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            lr: 2e-4,
            data_fraction: 1.0,
            eval_every: 0,
            points_per_cloud: 128,
            mode: ConditioningMode::None,
            norm_mode: NormalizationMode::Global,
            frustum: false,
            seed: 0,
            ema_rate: 0.999,
            sigma_max_samples: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidInput(
                "data_fraction must be in (0, 1]".into(),
            ));
        }
        if self.steps == 0 || self.batch == 0 || self.points_per_cloud == 0 {
            return Err(Error::InvalidInput("counts must be >= 1".into()));
        }
        if self.norm_mode == NormalizationMode::PerShape {
            return Err(Error::InvalidInput(
                "per-shape normalization is an evaluation protocol, not a training frame".into(),
            ));
        }
        Ok(())
    }
}

type BestSnapshot = (f64, Vec<Array2<f64>>, Vec<Array2<f64>>);

/// What a training run produced.
pub struct TrainOutcome {
    pub model: NetModel,
    pub ema: EmaState,
    pub step: u64,
    pub loss_history: Vec<f64>,
    /// Clouds touched by any batch (data-fraction accounting).
    pub touched_clouds: usize,
    /// True when the loss diverged and the state was rolled back one step.
    pub diverged: bool,
    /// Best validation 1-NNA when eval_every > 0.
    pub best_eval: Option<f64>,
}

/// Start training from scratch or resume an existing model/optimizer state.
pub struct ResumeState {
    pub model: NetModel,
    pub ema: EmaState,
    pub step: u64,
}

/// Train a model on a dataset. Per-step randomness derives from
/// `(seed, step)` streams, so resuming from step k replays exactly the
/// stream a fresh run would have used.
pub fn train(
    dataset: &Dataset,
    tcfg: &TrainConfig,
    ncfg: &NetConfig,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    ncfg.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::SizeError("training needs a non-empty dataset".into()));
    }
    let used = ((tcfg.data_fraction * dataset.scenes.len() as f64).ceil() as usize)
        .clamp(1, dataset.scenes.len());
    let scenes = &dataset.scenes[..used];

    // diffusion-frame clouds: optional frustum reparameterization, then
    // normalization fitted over the used subset
    let staged: Vec<PointCloud> = scenes
        .iter()
        .map(|s| {
            if tcfg.frustum {
                crate::geometry::to_frustum(&s.cloud, &dataset.cam)
            } else {
                Ok(s.cloud.clone())
            }
        })
        .collect::<Result<_>>()?;
    let norm = fit_normalization(&staged, tcfg.norm_mode)?;
    let diffusion_clouds: Vec<Array2<f64>> = staged
        .iter()
        .map(|c| Ok(norm.apply(c)?.into_points()))
        .collect::<Result<_>>()?;

    let (mut model, mut ema, start_step) = match resume {
        Some(state) => (state.model, state.ema, state.step),
        None => {
            let normalized: Vec<PointCloud> = diffusion_clouds
                .iter()
                .map(|p| PointCloud::new(p.clone(), Frame::Euclidean))
                .collect::<Result<_>>()?;
            let mut est_rng = StreamRng::stream(tcfg.seed, u64::MAX);
            let sigma_max = if normalized.len() >= 2 {
                estimate_sigma_max(&normalized, tcfg.sigma_max_samples, &mut est_rng)?
            } else {
                0.0
            };
            if sigma_max <= 0.0 {
                return Err(Error::DegenerateData(
                    "sigma_max estimate is zero; dataset has no spread".into(),
                ));
            }
            let diff_cfg = DiffusionConfig::new(sigma_max);
            diff_cfg.validate()?;
            let frame_kind = if tcfg.frustum {
                Frame::Frustum
            } else {
                Frame::Euclidean
            };
            let frame = FrameMap {
                frame: frame_kind,
                norm: norm.clone(),
                cam: Some(dataset.cam),
            };
            let extractor = (tcfg.mode != ConditioningMode::None).then(|| {
                ExtractorConfig::desk(scenes[0].image.channels)
            });
            let mut init_rng = StreamRng::stream(tcfg.seed, u64::MAX - 1);
            let model = NetModel::init(
                *ncfg,
                diff_cfg,
                tcfg.mode,
                extractor,
                frame,
                3,
                &mut init_rng,
            )?;
            let ema = EmaState::new(model.params.tensors(), tcfg.ema_rate);
            (model, ema, 0)
        }
    };

    let mut optimizer = AdaBelief::new(model.params.tensors(), tcfg.lr);
    let mut touched = vec![false; used];
    let mut loss_history = Vec::with_capacity(tcfg.steps);
    let mut best: Option<BestSnapshot> = None;
    let mut diverged = false;

    for step in start_step..start_step + tcfg.steps as u64 {
        let mut rng = StreamRng::stream(tcfg.seed, step);
        let mut batch_data = Vec::with_capacity(tcfg.batch);
        for _ in 0..tcfg.batch {
            let idx = rng.below(used);
            touched[idx] = true;
            let n = diffusion_clouds[idx].nrows();
            let m = tcfg.points_per_cloud.min(n);
            let sub = subsample(
                &PointCloud::new(diffusion_clouds[idx].clone(), Frame::Euclidean)?,
                m,
                &mut rng,
            )?
            .into_points();
            let image = (tcfg.mode != ConditioningMode::None).then(|| &scenes[idx].image);
            batch_data.push((sub, image));
        }
        let snapshot = model.params.tensors().to_vec();
        let ema_snapshot = ema.shadow.clone();
        match model.loss_and_grads(&batch_data, &mut rng) {
            Ok((loss, grads)) => {
                loss_history.push(loss);
                optimizer.step(model.params.tensors_mut(), &grads);
                ema.update(model.params.tensors())?;
            }
            Err(Error::TrainingDivergence(_)) => {
                model.params.tensors_mut().clone_from_slice(&snapshot);
                ema.shadow.clone_from_slice(&ema_snapshot);
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }

        if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every as u64 == 0 {
            let score = if tcfg.mode == ConditioningMode::None {
                quick_validation(&model, &ema, &diffusion_clouds, tcfg, step)?
            } else {
                // conditional runs track the recent training loss instead
                let tail = loss_history.len().min(tcfg.eval_every);
                loss_history[loss_history.len() - tail..].iter().sum::<f64>() / tail as f64
            };
            if best.as_ref().map(|(b, _, _)| score < *b).unwrap_or(true) {
                best = Some((
                    score,
                    model.params.tensors().to_vec(),
                    ema.shadow.clone(),
                ));
            }
        }
    }

    let mut best_eval = None;
    if let Some((score, params, shadow)) = best {
        best_eval = Some(score);
        model.params.tensors_mut().clone_from_slice(&params);
        ema.shadow.clone_from_slice(&shadow);
    }
    Ok(TrainOutcome {
        step: start_step + loss_history.len() as u64,
        model,
        ema,
        loss_history,
        touched_clouds: touched.iter().filter(|t| **t).count(),
        diverged,
        best_eval,
    })
}

/// Cheap CD-based 1-NNA between a few EMA samples and training clouds.
fn quick_validation(
    model: &NetModel,
    ema: &EmaState,
    diffusion_clouds: &[Array2<f64>],
    tcfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let k = 8.min(diffusion_clouds.len());
    let n_pts = tcfg.points_per_cloud.min(diffusion_clouds[0].nrows());
    let mut eval_model = clone_model(model)?;
    let mut ema_copy = ema.clone();
    ema_copy.swap(eval_model.params.tensors_mut())?;
    let scfg = SamplerConfig::ode(16);
    let mut refs = Vec::with_capacity(k);
    let mut gens = Vec::with_capacity(k);
    for (i, cloud) in diffusion_clouds.iter().take(k).enumerate() {
        let mut rng = StreamRng::stream(tcfg.seed ^ 0x5eed, step * 64 + i as u64);
        let g = sample(&eval_model, &scfg, n_pts, &mut rng)?;
        gens.push(PointCloud::new(g, Frame::Euclidean)?);
        let r = subsample(
            &PointCloud::new(cloud.clone(), Frame::Euclidean)?,
            n_pts,
            &mut rng,
        )?;
        refs.push(r);
    }
    one_nna(&refs, &gens, PairMetric::Cd)
}

fn clone_model(model: &NetModel) -> Result<NetModel> {
    let mut fresh = NetModel::init(
        model.net_cfg,
        model.diff_cfg,
        model.mode,
        model.extractor_cfg.clone(),
        model.frame.clone(),
        model.dim,
        &mut StreamRng::new(0),
    )?;
    fresh
        .params
        .tensors_mut()
        .clone_from_slice(model.params.tensors());
    Ok(fresh)
}
