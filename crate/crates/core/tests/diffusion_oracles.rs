use ctrldiff::codec::LatentGrid;
use ctrldiff::diffusion::{elbo, forward_marginal, forward_step, NoiseSchedule, ReverseVariance};
use ctrldiff::{Rng, Tensor};

const TRIALS: usize = 10_000;

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn chain_matches_marginal_moments() {
    let sched = NoiseSchedule::build(100, 1e-3, 0.2).unwrap();
    let z0 = LatentGrid::clean(Tensor::vector(vec![1.5]));
    let root = Rng::new(42);
    for (k, &t) in [1usize, 5, 20, 60, 100].iter().enumerate() {
        let mut chain_rng = root.split(2 * k as u64);
        let mut marg_rng = root.split(2 * k as u64 + 1);
        let mut chain = Vec::with_capacity(TRIALS);
        let mut marg = Vec::with_capacity(TRIALS);
        for _ in 0..TRIALS {
            let mut z = z0.clone();
            for s in 1..=t {
                z = forward_step(&z, s, &sched, &mut chain_rng).unwrap();
            }
            chain.push(z.data.data()[0]);
            marg.push(forward_marginal(&z0, t, &sched, &mut marg_rng).unwrap().0.data.data()[0]);
        }
        let ab = sched.alpha_bar(t);
        let var = 1.0 - ab;
        let n = TRIALS as f64;
        let (mc, vc) = moments(&chain);
        let (mm, vm) = moments(&marg);
        let mean_sd = (2.0 * var / n).sqrt();
        let var_sd = (2.0 * 2.0 * var * var / n).sqrt();
        assert!((mc - mm).abs() < 3.0 * mean_sd, "t={t}: means {mc} vs {mm}");
        assert!((vc - vm).abs() < 3.0 * var_sd, "t={t}: variances {vc} vs {vm}");
        assert!((mm - ab.sqrt() * 1.5).abs() < 3.0 * (var / n).sqrt());
    }
}

/// Log-likelihood of the reverse chain driven by `ε̂(z, t) = √(1−ᾱ_t)·z`.
/// Every step is `z_{t−1} = √α_t·z_t + σ_t·ξ`, so `z_0` is a centred
/// Gaussian whose variance follows a scalar recursion from `v_T = 1`.
fn toy_log_likelihood(x: f64, sched: &NoiseSchedule, mode: ReverseVariance) -> f64 {
    let mut v = 1.0;
    for t in (1..=sched.steps()).rev() {
        v = sched.alpha(t) * v + sched.reverse_variance(t, mode);
    }
    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - x * x / (2.0 * v)
}

#[test]
fn elbo_bounds_linear_gaussian_likelihood() {
    let sched = NoiseSchedule::build(100, 1e-3, 0.2).unwrap();
    let optimal = |z: &Tensor, t: usize| Ok(z.scale((1.0 - sched.alpha_bar(t)).sqrt()));
    let mut data_rng = Rng::new(9);
    let points = ctrldiff::tensor::gaussian(&mut data_rng, &[200]).unwrap();
    for mode in [ReverseVariance::Posterior, ReverseVariance::Beta] {
        let root = Rng::new(17);
        let mut elbos = Vec::new();
        let mut lls = Vec::new();
        for (i, &x) in points.data().iter().enumerate() {
            let z0 = LatentGrid::clean(Tensor::vector(vec![x]));
            let r = elbo(&z0, &optimal, &sched, mode, &mut root.split(i as u64), 64).unwrap();
            for kl in &r.kl_terms {
                assert!(*kl >= -1e-10, "negative KL {kl}");
            }
            elbos.push(r.total);
            lls.push(toy_log_likelihood(x, &sched, mode));
        }
        let gaps: Vec<f64> = lls.iter().zip(&elbos).map(|(l, e)| l - e).collect();
        let (gap, var) = moments(&gaps);
        let se = (var / gaps.len() as f64).sqrt();
        assert!(gap > -3.0 * se, "{mode:?}: ELBO exceeds log-likelihood by {}", -gap);
        if mode == ReverseVariance::Beta {
            // This reverse chain is the exact time reversal of N(0, 1) data.
            assert!(gap.abs() < 0.05, "Beta-mode gap {gap} ± {se}");
        }
    }
}
