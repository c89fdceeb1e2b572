//! Inference-time algorithms: the second-order stochastic sampler, the
//! probability-flow (deterministic) sampler, exact log-likelihood via the
//! flow ODE, inpainting-based upsampling with resampling, and the
//! inducer-cached efficient upsampler.
//!
//! Everything here operates in the model's diffusion frame; callers map
//! samples back to world coordinates through the model's frame map.

use ndarray::Array2;

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::model::{DenoiseModel, NetModel};
use crate::rng::StreamRng;

/// Which integrator drives sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Second-order stochastic sampler (per-step churn).
    Sde,
    /// Probability flow: deterministic given the prior draw.
    Ode,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sde" => Ok(SamplerKind::Sde),
            "ode" => Ok(SamplerKind::Ode),
            other => Err(Error::InvalidInput(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Total churn budget; per-step gamma is min(churn/steps, sqrt(2)-1).
    pub churn: f64,
    /// Churn applies only when sigma lies in this band.
    pub churn_range: (f64, f64),
    /// Multiplier on the churn noise standard deviation.
    pub noise_inflation: f64,
}

impl SamplerConfig {
    pub fn sde(steps: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::Sde,
            steps,
            churn: 40.0,
            churn_range: (0.05, 50.0),
            noise_inflation: 1.0,
        }
    }

    pub fn ode(steps: usize) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ode,
            steps,
            churn: 0.0,
            churn_range: (0.0, 0.0),
            noise_inflation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidInput("sampler needs steps >= 2".into()));
        }
        if self.churn < 0.0 {
            return Err(Error::InvalidInput("churn must be non-negative".into()));
        }
        Ok(())
    }

    fn gamma(&self, sigma: f64) -> f64 {
        if self.kind == SamplerKind::Sde
            && self.churn > 0.0
            && sigma >= self.churn_range.0
            && sigma <= self.churn_range.1
        {
            (self.churn / self.steps as f64).min(2f64.sqrt() - 1.0)
        } else {
            0.0
        }
    }
}

/// Decreasing noise schedule sigma_0 = sigma_max ... sigma_{steps-1} =
/// sigma_min, terminated with an exact 0.
pub fn sigma_schedule(cfg: &DiffusionConfig, steps: usize) -> Vec<f64> {
    assert!(steps >= 2);
    let inv_rho = 1.0 / cfg.rho;
    let hi = cfg.sigma_max.powf(inv_rho);
    let lo = cfg.sigma_min.powf(inv_rho);
    let mut sched: Vec<f64> = (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            (hi + t * (lo - hi)).powf(cfg.rho)
        })
        .collect();
    // endpoints exact despite powf round-trip
    sched[0] = cfg.sigma_max;
    sched[steps - 1] = cfg.sigma_min;
    sched.push(0.0);
    sched
}

fn ensure_finite(x: &Array2<f64>, step: usize, sigma: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SamplerDivergence { step, sigma })
    }
}

/// One churned second-order step from sigma to sigma_next; shared by the SDE
/// and ODE samplers (the ODE is the churn-free special case).
fn heun_step<M: DenoiseModel + ?Sized>(
    model: &M,
    scfg: &SamplerConfig,
    x: &Array2<f64>,
    sigma: f64,
    sigma_next: f64,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let gamma = scfg.gamma(sigma);
    let (x_hat, sigma_hat) = if gamma > 0.0 {
        let sigma_hat = sigma * (1.0 + gamma);
        let extra = (sigma_hat * sigma_hat - sigma * sigma).sqrt() * scfg.noise_inflation;
        let eps = rng.normal_matrix(x.nrows(), x.ncols());
        (x + &(eps * extra), sigma_hat)
    } else {
        (x.clone(), sigma)
    };
    let d = (&x_hat - &model.denoise(&x_hat, sigma_hat)?) / sigma_hat;
    let h = sigma_next - sigma_hat;
    let x_euler = &x_hat + &(&d * h);
    if sigma_next > 0.0 {
        let d2 = (&x_euler - &model.denoise(&x_euler, sigma_next)?) / sigma_next;
        Ok(&x_hat + &(&(&d + &d2) * (h * 0.5)))
    } else {
        Ok(x_euler)
    }
}

/// Integrate the reverse process starting from the given prior state
/// (`prior` must be distributed as sigma_max * N(0, I) for faithful samples).
pub fn sample_with_prior<M: DenoiseModel + ?Sized>(
    model: &M,
    scfg: &SamplerConfig,
    prior: &Array2<f64>,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    scfg.validate()?;
    let sched = sigma_schedule(model.diffusion_config(), scfg.steps);
    let mut x = prior.clone();
    for i in 0..scfg.steps {
        x = heun_step(model, scfg, &x, sched[i], sched[i + 1], rng)?;
        ensure_finite(&x, i, sched[i + 1])?;
    }
    Ok(x)
}

/// Draw `n_points` from the model: prior noise at sigma_max, then the
/// second-order reverse integration. Output is in the diffusion frame.
pub fn sample<M: DenoiseModel + ?Sized>(
    model: &M,
    scfg: &SamplerConfig,
    n_points: usize,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let prior =
        rng.normal_matrix(n_points, model.out_dim()) * model.diffusion_config().sigma_max;
    sample_with_prior(model, scfg, &prior, rng)
}

/// ceil(M/n) independent samples concatenated and truncated to M points.
pub fn generate_dense<M: DenoiseModel + ?Sized>(
    model: &M,
    scfg: &SamplerConfig,
    per_sample: usize,
    total: usize,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let d = model.out_dim();
    let mut out = Array2::zeros((total, d));
    let mut written = 0;
    let mut draw = 0u64;
    while written < total {
        let mut sub = rng.substream(draw);
        draw += 1;
        let s = sample(model, scfg, per_sample, &mut sub)?;
        let take = per_sample.min(total - written);
        out.slice_mut(ndarray::s![written..written + take, ..])
            .assign(&s.slice(ndarray::s![..take, ..]));
        written += take;
    }
    Ok(out)
}

/// How the divergence of the denoiser is estimated during likelihood
/// integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMethod {
    /// One vector-Jacobian product per coordinate: exact trace.
    Exact,
    /// Rademacher trace probes (unbiased).
    StochasticProbe,
}

/// Coordinate budget above which exact divergence falls back to probes.
pub const EXACT_DIVERGENCE_LIMIT: usize = 4096;

/// Exact divergence of the denoiser: sum_j dD_j/dx_j via N*D basis
/// back-propagations. Returns (D(x; sigma), divergence).
pub fn denoiser_divergence_exact<M: DenoiseModel + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    sigma: f64,
) -> Result<(Array2<f64>, f64)> {
    let (n, d) = x.dim();
    let mut div = 0.0;
    let mut value = None;
    for j in 0..n * d {
        let mut seed = Array2::zeros((n, d));
        seed[[j / d, j % d]] = 1.0;
        let (val, grad) = model.denoise_vjp(x, sigma, &seed)?;
        div += grad[[j / d, j % d]];
        if value.is_none() {
            value = Some(val);
        }
    }
    Ok((value.unwrap(), div))
}

/// One Rademacher probe of the denoiser divergence: v^T (dD/dx) v.
pub fn denoiser_divergence_probe<M: DenoiseModel + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    sigma: f64,
    rng: &mut StreamRng,
) -> Result<(Array2<f64>, f64)> {
    let (n, d) = x.dim();
    let v = Array2::from_shape_fn((n, d), |_| rng.rademacher());
    let (val, grad) = model.denoise_vjp(x, sigma, &v)?;
    let probe = grad.iter().zip(v.iter()).map(|(g, vv)| g * vv).sum();
    Ok((val, probe))
}

fn divergence<M: DenoiseModel + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    sigma: f64,
    method: DivergenceMethod,
    probes: usize,
    rng: &mut StreamRng,
) -> Result<(Array2<f64>, f64)> {
    match method {
        DivergenceMethod::Exact => denoiser_divergence_exact(model, x, sigma),
        DivergenceMethod::StochasticProbe => {
            let mut acc = 0.0;
            let mut value = None;
            for _ in 0..probes.max(1) {
                let (val, p) = denoiser_divergence_probe(model, x, sigma, rng)?;
                acc += p;
                if value.is_none() {
                    value = Some(val);
                }
            }
            Ok((value.unwrap(), acc / probes.max(1) as f64))
        }
    }
}

/// Exact (or probed) log-likelihood via the probability-flow ODE.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodResult {
    /// log p of the input under the model, in the diffusion frame (nats).
    pub log_density: f64,
    /// Log-determinant of the reparameterization + normalization Jacobians.
    pub frame_correction: f64,
    /// log_density + frame_correction: density of the world-space cloud.
    pub total: f64,
    /// What actually computed the divergence.
    pub divergence_method: DivergenceMethod,
}

/// Integrate the probability-flow ODE from sigma_min to sigma_max jointly
/// with the instantaneous change of log-density, then evaluate the terminal
/// state under N(0, (sigma_max^2 + sigma_data^2) I).
///
/// `cloud` is in the model's diffusion frame. The exact method switches to
/// probes automatically above [`EXACT_DIVERGENCE_LIMIT`] coordinates.
pub fn log_likelihood<M: DenoiseModel + ?Sized>(
    model: &M,
    cloud: &Array2<f64>,
    steps: usize,
    method: DivergenceMethod,
    probes: usize,
    rng: &mut StreamRng,
) -> Result<LikelihoodResult> {
    if steps < 2 {
        return Err(Error::InvalidInput("likelihood needs steps >= 2".into()));
    }
    let (n, d) = cloud.dim();
    let method = if method == DivergenceMethod::Exact && n * d > EXACT_DIVERGENCE_LIMIT {
        DivergenceMethod::StochasticProbe
    } else {
        method
    };
    let cfg = model.diffusion_config();
    // ascending sigma grid: reverse of the sampler schedule without the 0
    let mut grid = sigma_schedule(cfg, steps);
    grid.pop();
    grid.reverse();

    // dx/dsigma = (x - D)/sigma ; dlogp/dsigma = (n*d - div D)/sigma
    let rhs = |x: &Array2<f64>, sigma: f64, rng: &mut StreamRng| -> Result<(Array2<f64>, f64)> {
        let (den, div_d) = divergence(model, x, sigma, method, probes, rng)?;
        let f = (x - &den) / sigma;
        let g = (n as f64 * d as f64 - div_d) / sigma;
        Ok((f, g))
    };

    let mut x = cloud.clone();
    let mut delta = 0.0;
    for w in grid.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        let h = s1 - s0;
        let (f1, g1) = rhs(&x, s0, rng)?;
        let x_euler = &x + &(&f1 * h);
        let (f2, g2) = rhs(&x_euler, s1, rng)?;
        x = &x + &(&(&f1 + &f2) * (h * 0.5));
        delta += h * 0.5 * (g1 + g2);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SamplerDivergence { step: 0, sigma: s1 });
        }
    }

    let var = cfg.sigma_max * cfg.sigma_max + cfg.sigma_data * cfg.sigma_data;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let log_terminal = -0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI * var).ln()
        - sq / (2.0 * var);
    let log_density = log_terminal + delta;

    let frame_correction = match model.frame_map() {
        Some(frame) => frame.log_det_correction(cloud)?,
        None => 0.0,
    };
    Ok(LikelihoodResult {
        log_density,
        frame_correction,
        total: log_density + frame_correction,
        divergence_method: method,
    })
}

/// Upsample a context cloud to `target_m` points by inpainting: new points
/// start from prior noise, the context is re-diffused to the current noise
/// level at every network evaluation, scores are computed jointly, and only
/// the new block is updated. Each solver step runs `resample_substeps`
/// forward/backward noise cycles. The context block of the output equals the
/// input bit-exactly.
///
/// `tile_new` bounds how many new points one completion may carry; a target
/// needing more runs multiple conditionally-independent completions and
/// concatenates them. Without `tile_new`, a request exceeding `trained_width`
/// is refused.
#[allow(clippy::too_many_arguments)]
pub fn upsample_inpaint<M: DenoiseModel + ?Sized>(
    model: &M,
    context: &Array2<f64>,
    target_m: usize,
    scfg: &SamplerConfig,
    resample_substeps: usize,
    tile_new: Option<usize>,
    trained_width: Option<usize>,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    scfg.validate()?;
    let n = context.nrows();
    let d = context.ncols();
    if target_m <= n {
        return Err(Error::UsageError(format!(
            "upsampling needs target m > context size ({target_m} <= {n})"
        )));
    }
    let new_total = target_m - n;
    let per_tile = match tile_new {
        Some(k) if k >= 1 => k.min(new_total),
        Some(_) => return Err(Error::UsageError("tile size must be >= 1".into())),
        None => {
            if let Some(width) = trained_width {
                if new_total > width {
                    return Err(Error::UsageError(format!(
                        "{new_total} new points exceed the trained width {width}; enable tiling"
                    )));
                }
            }
            new_total
        }
    };
    let tiles = new_total.div_ceil(per_tile);

    let mut out = Array2::zeros((target_m, d));
    out.slice_mut(ndarray::s![..n, ..]).assign(context);
    let mut written = 0;
    for tile in 0..tiles {
        let mut sub = rng.substream(tile as u64);
        let block = inpaint_single(model, context, per_tile, scfg, resample_substeps, &mut sub)?;
        let take = per_tile.min(new_total - written);
        out.slice_mut(ndarray::s![n + written..n + written + take, ..])
            .assign(&block.slice(ndarray::s![..take, ..]));
        written += take;
    }
    Ok(out)
}

/// One joint reverse step of the inpainting process: context re-noised to
/// the evaluation level, scores on [context; new] jointly, new block updated.
fn inpaint_step<M: DenoiseModel + ?Sized>(
    model: &M,
    context: &Array2<f64>,
    x_new: &Array2<f64>,
    sigma: f64,
    sigma_next: f64,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let n = context.nrows();
    let k = x_new.nrows();
    let d = context.ncols();
    let joint_eval = |x_block: &Array2<f64>, sigma: f64, rng: &mut StreamRng| -> Result<Array2<f64>> {
        let noise = rng.normal_matrix(n, d);
        let mut joint = Array2::zeros((n + k, d));
        joint
            .slice_mut(ndarray::s![..n, ..])
            .assign(&(context + &(noise * sigma)));
        joint.slice_mut(ndarray::s![n.., ..]).assign(x_block);
        let den = model.denoise(&joint, sigma)?;
        let deriv = (&joint - &den) / sigma;
        Ok(deriv.slice(ndarray::s![n.., ..]).to_owned())
    };
    let h = sigma_next - sigma;
    let d1 = joint_eval(x_new, sigma, rng)?;
    let euler = x_new + &(&d1 * h);
    if sigma_next > 0.0 {
        let d2 = joint_eval(&euler, sigma_next, rng)?;
        Ok(x_new + &(&(&d1 + &d2) * (h * 0.5)))
    } else {
        Ok(euler)
    }
}

fn inpaint_single<M: DenoiseModel + ?Sized>(
    model: &M,
    context: &Array2<f64>,
    k: usize,
    scfg: &SamplerConfig,
    resample_substeps: usize,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    let d = context.ncols();
    let cfg = model.diffusion_config();
    let sched = sigma_schedule(cfg, scfg.steps);
    let mut x_new = rng.normal_matrix(k, d) * cfg.sigma_max;
    for i in 0..scfg.steps {
        let (sigma, sigma_next) = (sched[i], sched[i + 1]);
        x_new = inpaint_step(model, context, &x_new, sigma, sigma_next, rng)?;
        for _ in 0..resample_substeps {
            // re-diffuse the new block up to sigma_i, then reverse again
            let back = (sigma * sigma - sigma_next * sigma_next).sqrt();
            let eps = rng.normal_matrix(k, d);
            let renoised = &x_new + &(eps * back);
            x_new = inpaint_step(model, context, &renoised, sigma, sigma_next, rng)?;
        }
        ensure_finite(&x_new, i, sigma_next)?;
    }
    Ok(x_new)
}

/// Inducer-cached upsampling: per network evaluation the score network runs
/// once on the re-diffused context (caching per-layer inducer activations)
/// and once on all new points with the cached state, making every new point
/// independent of the others. Total cost per evaluation is O(context) +
/// O(new) instead of O(tiles * (context + new)).
///
/// Returns n + tiles * new_per_tile points; the context block is bit-exact.
#[allow(clippy::too_many_arguments)]
pub fn upsample_cached(
    model: &NetModel,
    context: &Array2<f64>,
    new_per_tile: usize,
    tiles: usize,
    scfg: &SamplerConfig,
    resample_substeps: usize,
    rng: &mut StreamRng,
) -> Result<Array2<f64>> {
    scfg.validate()?;
    if new_per_tile == 0 || tiles == 0 {
        return Err(Error::UsageError(
            "cached upsampling needs new_per_tile >= 1 and tiles >= 1".into(),
        ));
    }
    let n = context.nrows();
    let d = context.ncols();
    let k = new_per_tile * tiles;
    let cfg = *model.diffusion_config();
    let sched = sigma_schedule(&cfg, scfg.steps);

    let cached_eval = |x_block: &Array2<f64>, sigma: f64, rng: &mut StreamRng| -> Result<Array2<f64>> {
        let noise = rng.normal_matrix(n, d);
        let ctx_noisy = context + &(noise * sigma);
        let (_, cache) = model.denoise_trace(&ctx_noisy, sigma)?;
        let den = model.denoise_cached(x_block, sigma, &cache)?;
        Ok((x_block - &den) / sigma)
    };
    let step = |x_new: &Array2<f64>, sigma: f64, sigma_next: f64, rng: &mut StreamRng| -> Result<Array2<f64>> {
        let h = sigma_next - sigma;
        let d1 = cached_eval(x_new, sigma, rng)?;
        let euler = x_new + &(&d1 * h);
        if sigma_next > 0.0 {
            let d2 = cached_eval(&euler, sigma_next, rng)?;
            Ok(x_new + &(&(&d1 + &d2) * (h * 0.5)))
        } else {
            Ok(euler)
        }
    };

    let mut x_new = rng.normal_matrix(k, d) * cfg.sigma_max;
    for i in 0..scfg.steps {
        let (sigma, sigma_next) = (sched[i], sched[i + 1]);
        x_new = step(&x_new, sigma, sigma_next, rng)?;
        for _ in 0..resample_substeps {
            let back = (sigma * sigma - sigma_next * sigma_next).sqrt();
            let eps = rng.normal_matrix(k, d);
            let renoised = &x_new + &(eps * back);
            x_new = step(&renoised, sigma, sigma_next, rng)?;
        }
        ensure_finite(&x_new, i, sigma_next)?;
    }

    let mut out = Array2::zeros((n + k, d));
    out.slice_mut(ndarray::s![..n, ..]).assign(context);
    out.slice_mut(ndarray::s![n.., ..]).assign(&x_new);
    Ok(out)
}
