//! Continuous-time noise model: sigma sampling, forward perturbation,
//! denoiser preconditioning, the denoising loss, EMA weights, and
//! sigma_max estimation.
//!
//! Noise level sigma is identified with solver time t (variance-exploding
//! convention): data at sigma is clean data plus N(0, sigma^2 I) noise.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::StreamRng;

/// Schedule and preconditioning constants of the diffusion process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    /// Schedule exponent for the sampler sigma spacing.
    pub rho: f64,
    /// Default sampler step count.
    pub steps: usize,
}

impl DiffusionConfig {
    pub fn new(sigma_max: f64) -> Self {
        DiffusionConfig {
            sigma_min: 1e-4,
            sigma_max,
            sigma_data: 1.0,
            rho: 7.0,
            steps: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidInput(format!(
                "need 0 < sigma_min < sigma_max, got ({}, {})",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.sigma_data <= 0.0 {
            return Err(Error::InvalidInput("sigma_data must be positive".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidInput("steps must be >= 2".into()));
        }
        Ok(())
    }

    /// Skip coefficient c_skip(sigma) = sd^2 / (sigma^2 + sd^2).
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    /// Output coefficient c_out(sigma) = sigma * sd / sqrt(sigma^2 + sd^2).
    pub fn c_out(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        sigma * sd / (sigma * sigma + sd * sd).sqrt()
    }

    /// Input coefficient c_in(sigma) = 1 / sqrt(sigma^2 + sd^2).
    pub fn c_in(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        1.0 / (sigma * sigma + sd * sd).sqrt()
    }

    /// Noise-conditioning scalar c_noise(sigma) = ln(sigma) / 4.
    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }

    /// Loss weight lambda(sigma) = (sigma^2 + sd^2) / (sigma * sd)^2,
    /// the reciprocal of c_out(sigma)^2.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let c = self.c_out(sigma);
        1.0 / (c * c)
    }
}

/// Largest pairwise distance between training examples, used to pick
/// sigma_max. Clouds are compared as flattened vectors in storage order.
///
/// When the number of candidate pairs is at most `samples` the maximum is
/// exhaustive; otherwise `samples` pairs are drawn uniformly at random.
pub fn estimate_sigma_max(
    clouds: &[PointCloud],
    samples: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    if clouds.len() < 2 {
        return Err(Error::SizeError(
            "sigma_max estimation needs at least two clouds".into(),
        ));
    }
    let shape = (clouds[0].len(), clouds[0].dim());
    if clouds.iter().any(|c| (c.len(), c.dim()) != shape) {
        return Err(Error::SizeError(
            "sigma_max estimation needs equally-shaped clouds".into(),
        ));
    }
    let n = clouds.len();
    let pairs = n * (n - 1) / 2;
    let dist = |a: &PointCloud, b: &PointCloud| -> f64 {
        a.points()
            .iter()
            .zip(b.points().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut max = 0.0f64;
    if pairs <= samples {
        for i in 0..n {
            for j in (i + 1)..n {
                max = max.max(dist(&clouds[i], &clouds[j]));
            }
        }
    } else {
        for _ in 0..samples {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            max = max.max(dist(&clouds[i], &clouds[j]));
        }
    }
    Ok(max)
}

/// Draw a batch of sigma values log-uniformly over (sigma_min, sigma_max).
pub fn sample_sigma(cfg: &DiffusionConfig, batch: usize, rng: &mut StreamRng) -> Vec<f64> {
    let lo = cfg.sigma_min.ln();
    let hi = cfg.sigma_max.ln();
    (0..batch)
        .map(|_| (lo + (hi - lo) * rng.uniform()).exp())
        .collect()
}

/// Forward perturbation: returns (x + sigma * eps, eps) with eps standard
/// normal per coordinate.
pub fn perturb(
    points: &Array2<f64>,
    sigma: f64,
    rng: &mut StreamRng,
) -> (Array2<f64>, Array2<f64>) {
    let eps = rng.normal_matrix(points.nrows(), points.ncols());
    let noisy = points + &(&eps * sigma);
    (noisy, eps)
}

/// Denoiser preconditioning: D(x; sigma) = c_skip * x + c_out * F(c_in * x, c_noise).
///
/// `raw` is the unpreconditioned network, called with the scaled points and
/// the noise-conditioning scalar.
pub fn precondition<F>(cfg: &DiffusionConfig, x: &Array2<f64>, sigma: f64, raw: F) -> Result<Array2<f64>>
where
    F: FnOnce(&Array2<f64>, f64) -> Array2<f64>,
{
    if sigma <= 0.0 {
        return Err(Error::DomainError(format!(
            "preconditioning needs sigma > 0, got {sigma}"
        )));
    }
    let scaled = x * cfg.c_in(sigma);
    let f = raw(&scaled, cfg.c_noise(sigma));
    Ok(x * cfg.c_skip(sigma) + &(f * cfg.c_out(sigma)))
}

/// Score from a denoised estimate: s(x, sigma) = (D(x; sigma) - x) / sigma^2.
pub fn score_from_denoised(x: &Array2<f64>, denoised: &Array2<f64>, sigma: f64) -> Array2<f64> {
    (denoised - x) / (sigma * sigma)
}

/// EMA shadow of a flat tensor list.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Vec<Array2<f64>>,
    pub rate: f64,
}

impl EmaState {
    pub fn new(tensors: &[Array2<f64>], rate: f64) -> Self {
        EmaState {
            shadow: tensors.to_vec(),
            rate,
        }
    }

    /// shadow <- rate * shadow + (1 - rate) * live, elementwise.
    pub fn update(&mut self, live: &[Array2<f64>]) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(Error::StructuralError(format!(
                "ema holds {} tensors, live set has {}",
                self.shadow.len(),
                live.len()
            )));
        }
        for (s, l) in self.shadow.iter_mut().zip(live.iter()) {
            if s.dim() != l.dim() {
                return Err(Error::StructuralError(format!(
                    "ema shape {:?} vs live {:?}",
                    s.dim(),
                    l.dim()
                )));
            }
            s.zip_mut_with(l, |sv, lv| *sv = self.rate * *sv + (1.0 - self.rate) * lv);
        }
        Ok(())
    }

    /// Swap shadow and live tensors in place (call again to swap back).
    pub fn swap(&mut self, live: &mut [Array2<f64>]) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(Error::StructuralError("ema/live tensor count mismatch".into()));
        }
        for (s, l) in self.shadow.iter_mut().zip(live.iter_mut()) {
            std::mem::swap(s, l);
        }
        Ok(())
    }
}
