//! Forward noising chain, closed-form marginals, reverse posteriors, and the
//! Monte-Carlo evidence lower bound with its per-step KL decomposition.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gaussian, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// The default endpoints scaled by `1000 / steps`.
    pub fn rescaled(steps: usize) -> Self {
        let k = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (1e-4 * k).min(0.999),
            beta_end: (0.02 * k).min(0.999),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` steps.
    pub fn build(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule: steps must be ≥ 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule: need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::build(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    /// Schedule from explicit per-step variances, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule: no steps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("schedule: beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Variance of the learned reverse step `p_θ(z_{t−1} | z_t)`. The final
    /// decoding step `t = 1` always uses `β_1`.
    pub fn reverse_variance(&self, t: usize, mode: ReverseVariance) -> f64 {
        match mode {
            _ if t == 1 => self.beta(1),
            ReverseVariance::Posterior => self.posterior_variance(t),
            ReverseVariance::Beta => self.beta(t),
        }
    }
}

/// Choice of fixed reverse-process variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `β̃_t`, the forward posterior variance.
    #[default]
    Posterior,
    /// `β_t`, the forward step variance.
    Beta,
}

/// Isotropic Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub var: f64,
}

/// `√α_t · z_{t−1} + √(1 − α_t) · ε` with fresh `ε`.
pub fn forward_step(
    z_prev: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    let eps = gaussian(rng, z_prev.data.shape())?;
    let (a, s) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    let data = z_prev.data.zip_map(&eps, |z, e| a * z + s * e)?;
    Ok(LatentGrid::new(data, t))
}

/// Closed-form `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`; returns `z_t` and `ε`.
pub fn forward_marginal(
    z0: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(LatentGrid, Tensor)> {
    schedule.check_t(t)?;
    let eps = gaussian(rng, z0.data.shape())?;
    let zt = q_sample(&z0.data, t, &eps, schedule)?;
    Ok((LatentGrid::new(zt, t), eps))
}

/// Deterministic marginal sample for a given noise draw.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// Parameters of `q(z_{t−1} | z_t, z_0)` for `t ≥ 2`.
pub fn posterior_params(
    z0: &Tensor,
    zt: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<GaussianParams> {
    schedule.check_t(t)?;
    if t < 2 {
        return Err(Error::Index(format!("posterior needs t ≥ 2, got {t}")));
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab = schedule.alpha_bar(t);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = z0.zip_map(zt, |a, b| c0 * a + ct * b)?;
    Ok(GaussianParams {
        mean,
        var: schedule.posterior_variance(t),
    })
}

/// Reverse-step Gaussian implied by a noise prediction:
/// mean `(z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
pub fn reverse_params(
    zt: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    mode: ReverseVariance,
) -> Result<GaussianParams> {
    schedule.check_t(t)?;
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let mean = zt.zip_map(eps_hat, |z, e| (z - coef * e) * inv)?;
    Ok(GaussianParams {
        mean,
        var: schedule.reverse_variance(t, mode),
    })
}

/// `KL(p ‖ q)` for isotropic Gaussians, summed over dimensions.
pub fn kl_gaussian(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    if !(p.var > 0.0 && q.var > 0.0) {
        return Err(Error::Domain(format!(
            "kl_gaussian: variances must be positive ({}, {})",
            p.var, q.var
        )));
    }
    if p.mean.shape() != q.mean.shape() {
        return Err(shape_err!("kl_gaussian: mean shapes differ"));
    }
    let ratio = p.var / q.var;
    let per_dim = 0.5 * (ratio - 1.0 - ratio.ln());
    let mean_term: f64 = p
        .mean
        .data()
        .iter()
        .zip(q.mean.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / (2.0 * q.var);
    Ok(per_dim * p.mean.len() as f64 + mean_term)
}

/// Isotropic Gaussian log-density summed over dimensions.
pub fn gaussian_log_density(x: &Tensor, p: &GaussianParams) -> Result<f64> {
    if x.shape() != p.mean.shape() {
        return Err(shape_err!("log density: shape mismatch"));
    }
    let sq: f64 = x
        .data()
        .iter()
        .zip(p.mean.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(-0.5 * x.len() as f64 * (2.0 * PI * p.var).ln() - sq / (2.0 * p.var))
}

/// Anything that predicts the injected noise of a noisy latent.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, zt: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Sync,
{
    fn predict_noise(&self, zt: &Tensor, t: usize) -> Result<Tensor> {
        self(zt, t)
    }
}

/// Per-term ELBO estimate. `kl_terms[0]` is the prior term
/// `KL(q(z_T|z_0) ‖ N(0, I))`; `kl_terms[t−1]` for `t ≥ 2` is the expected
/// denoising term `KL(q(z_{t−1}|z_t, z_0) ‖ p_θ(z_{t−1}|z_t))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub reconstruction_term: f64,
    pub kl_terms: Vec<f64>,
    pub total: f64,
    /// Standard error of `total` across Monte-Carlo replicates (0 for one).
    pub total_std_error: f64,
    pub mc_samples: usize,
}

/// Monte-Carlo ELBO with one draw per timestep in each replicate.
pub fn elbo(
    z0: &LatentGrid,
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    mode: ReverseVariance,
    rng: &mut Rng,
    mc_samples: usize,
) -> Result<ElboReport> {
    if mc_samples < 1 {
        return Err(Error::Config("elbo: mc_samples must be ≥ 1".into()));
    }
    let steps = schedule.steps();
    let x = &z0.data;
    let base = rng.fork();

    // Prior term is analytic in z_0.
    let ab_t = schedule.alpha_bar(steps);
    let prior_q = GaussianParams {
        mean: x.scale(ab_t.sqrt()),
        var: 1.0 - ab_t,
    };
    let prior_p = GaussianParams {
        mean: Tensor::zeros(x.shape()),
        var: 1.0,
    };
    let prior_kl = kl_gaussian(&prior_q, &prior_p)?;

    let replicates: Vec<(f64, Vec<f64>)> = (0..mc_samples)
        .into_par_iter()
        .map(|m| -> Result<(f64, Vec<f64>)> {
            let mut r = base.split(m as u64);
            let mut kls = vec![0.0; steps];
            kls[0] = prior_kl;
            for t in 2..=steps {
                let eps = gaussian(&mut r, x.shape())?;
                let zt = q_sample(x, t, &eps, schedule)?;
                let q = posterior_params(x, &zt, t, schedule)?;
                let eps_hat = denoiser.predict_noise(&zt, t)?;
                let p = reverse_params(&zt, t, &eps_hat, schedule, mode)?;
                kls[t - 1] = kl_gaussian(&q, &p)?;
            }
            let eps = gaussian(&mut r, x.shape())?;
            let z1 = q_sample(x, 1, &eps, schedule)?;
            let eps_hat = denoiser.predict_noise(&z1, 1)?;
            let p = reverse_params(&z1, 1, &eps_hat, schedule, mode)?;
            let recon = gaussian_log_density(x, &p)?;
            Ok((recon, kls))
        })
        .collect::<Result<_>>()?;

    let n = mc_samples as f64;
    let recon = replicates.iter().map(|r| r.0).sum::<f64>() / n;
    let kl_terms: Vec<f64> = (0..steps)
        .map(|i| replicates.iter().map(|r| r.1[i]).sum::<f64>() / n)
        .collect();
    let totals: Vec<f64> = replicates
        .iter()
        .map(|(rc, k)| rc - k.iter().sum::<f64>())
        .collect();
    let total = recon - kl_terms.iter().sum::<f64>();
    let std_error = if mc_samples > 1 {
        let var = totals.iter().map(|v| (v - total).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(ElboReport {
        reconstruction_term: recon,
        kl_terms,
        total,
        total_std_error: std_error,
        mc_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<f64>) -> LatentGrid {
        let n = values.len();
        LatentGrid::clean(Tensor::new(vec![n], values).unwrap())
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::build(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);

        let s = NoiseSchedule::build(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));

        assert!(matches!(NoiseSchedule::build(10, 1e-4, 1.0), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::build(0, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::build(10, 0.1, 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn forward_step_limits_and_errors() {
        let s = NoiseSchedule::from_betas(vec![1e-30, 0.5]).unwrap();
        let z = grid(vec![0.3, -1.2, 2.0]);
        let out = forward_step(&z, 1, &s, &mut Rng::new(1)).unwrap();
        assert!(out.data.sub(&z.data).unwrap().max_abs() < 1e-14);
        assert_eq!(out.t, 1);

        let a = forward_step(&z, 2, &s, &mut Rng::new(3)).unwrap();
        let b = forward_step(&z, 2, &s, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(forward_step(&z, 3, &s, &mut Rng::new(1)), Err(Error::Index(_))));
        assert!(matches!(forward_step(&z, 0, &s, &mut Rng::new(1)), Err(Error::Index(_))));
    }

    #[test]
    fn forward_step_variance_from_zero() {
        let s = NoiseSchedule::build(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let z = grid(vec![0.0; 10_000]);
        let out = forward_step(&z, t, &s, &mut Rng::new(5)).unwrap();
        let var = out.data.sum_squares() / 10_000.0;
        let expected = 1.0 - s.alpha(t);
        // Var of the sample variance is 2σ⁴/n.
        let sigma = (2.0 * expected * expected / 10_000.0).sqrt();
        assert!((var - expected).abs() < 3.0 * sigma, "{var} vs {expected}");
    }

    #[test]
    fn marginal_examples() {
        let s = NoiseSchedule::from_betas(vec![1e-14; 3]).unwrap();
        let z0 = grid(vec![1.0, -2.0]);
        let (zt, _) = forward_marginal(&z0, 3, &s, &mut Rng::new(1)).unwrap();
        assert!(zt.data.sub(&z0.data).unwrap().max_abs() < 1e-6);

        let s = NoiseSchedule::build(10, 1e-3, 0.1).unwrap();
        let (zt, eps) = forward_marginal(&z0, 7, &s, &mut Rng::new(2)).unwrap();
        let ab = s.alpha_bar(7);
        let recombined = z0.data.zip_map(&eps, |z, e| ab.sqrt() * z + (1.0 - ab).sqrt() * e).unwrap();
        assert_eq!(recombined, zt.data);
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.3]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let p = posterior_params(&zero, &zero, 2, &s).unwrap();
        assert_eq!(p.mean.data(), &[0.0]);

        // Hand evaluation: ᾱ1 = 0.9, ᾱ2 = 0.63.
        let z0 = Tensor::vector(vec![1.0]);
        let zt = Tensor::vector(vec![2.0]);
        let p = posterior_params(&z0, &zt, 2, &s).unwrap();
        let mean = (0.9f64.sqrt() * 0.3 * 1.0 + 0.7f64.sqrt() * 0.1 * 2.0) / 0.37;
        let var = 0.3 * 0.1 / 0.37;
        assert!((p.mean.data()[0] - mean).abs() < 1e-14);
        assert!((p.var - var).abs() < 1e-14);

        let s = NoiseSchedule::build(50, 1e-4, 0.02).unwrap();
        assert!((2..=50).all(|t| s.posterior_variance(t) > 0.0));
        assert!(matches!(posterior_params(&z0, &zt, 1, &s), Err(Error::Index(_))));
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams {
            mean: Tensor::vector(vec![0.0]),
            var: 1.0,
        };
        let q = GaussianParams {
            mean: Tensor::vector(vec![1.0]),
            var: 1.0,
        };
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert!((kl_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        let bad = GaussianParams {
            mean: Tensor::vector(vec![0.0]),
            var: 0.0,
        };
        assert!(matches!(kl_gaussian(&bad, &p), Err(Error::Domain(_))));

        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let a = GaussianParams {
                mean: gaussian(&mut rng, &[4]).unwrap(),
                var: 0.01 + rng.uniform() * 3.0,
            };
            let b = GaussianParams {
                mean: gaussian(&mut rng, &[4]).unwrap(),
                var: 0.01 + rng.uniform() * 3.0,
            };
            assert!(kl_gaussian(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn elbo_rejects_zero_samples() {
        let s = NoiseSchedule::build(3, 0.1, 0.2).unwrap();
        let zero = |z: &Tensor, _t: usize| Ok(Tensor::zeros(z.shape()));
        let r = elbo(&grid(vec![0.0]), &zero, &s, ReverseVariance::Posterior, &mut Rng::new(1), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn elbo_single_point_perfect_denoiser() {
        // The exact noise is recoverable from z_t when z_0 is known.
        let point = 0.7;
        let s = NoiseSchedule::build(10, 1e-3, 0.2).unwrap();
        let oracle = |zt: &Tensor, t: usize| {
            let ab = s.alpha_bar(t);
            Ok(zt.map(|z| (z - ab.sqrt() * point) / (1.0 - ab).sqrt()))
        };
        let r = elbo(&grid(vec![point]), &oracle, &s, ReverseVariance::Posterior, &mut Rng::new(2), 3)
            .unwrap();
        assert_eq!(r.kl_terms.len(), 10);
        for kl in &r.kl_terms[1..] {
            assert!(kl.abs() < 1e-10, "{kl}");
        }

        // T = 1: only the prior term remains; it vanishes as β_1 → 1 for z_0 = 0.
        let s = NoiseSchedule::from_betas(vec![1.0 - 1e-9]).unwrap();
        let oracle = |zt: &Tensor, _t: usize| Ok(zt.scale(1.0 / (1e-9f64).sqrt()).scale(0.0));
        let r = elbo(&grid(vec![0.0]), &oracle, &s, ReverseVariance::Posterior, &mut Rng::new(2), 1)
            .unwrap();
        assert_eq!(r.kl_terms.len(), 1);
        assert!(r.kl_terms[0].abs() < 1e-8);
    }
}
