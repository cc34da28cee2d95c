//! Noise-prediction objective, the optimizer loop and a finite-difference
//! gradient checker.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::denoiser::{ConditioningBundle, Denoiser};
use crate::diffusion::{forward_marginal, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState, StepInfo};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gaussian, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Probability of replacing a sample's conditions with the null prompt.
    pub cond_dropout: f64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            grad_clip: Some(1.0),
            cond_dropout: 0.1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("train: cond_dropout must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A pre-encoded training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub latent: LatentGrid,
    pub cond: ConditioningBundle,
    /// Clean reference latent, noised to the sample's timestep on use.
    pub reference: Option<LatentGrid>,
}

/// Per-sample draws: the timestep, the noise, and whether conditions are
/// dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub t: usize,
    pub eps: crate::Tensor,
    pub dropped: bool,
    pub reference_eps: Option<crate::Tensor>,
}

impl SampleDraw {
    pub fn draw(ex: &TrainingExample, schedule: &NoiseSchedule, cond_dropout: f64, rng: &mut Rng) -> Result<Self> {
        let t = rng.range_inclusive(1, schedule.steps());
        let dropped = rng.uniform() < cond_dropout;
        let (_, eps) = forward_marginal(&ex.latent, t, schedule, rng)?;
        let reference_eps = match &ex.reference {
            Some(r) => Some(gaussian(rng, r.data.shape())?),
            None => None,
        };
        Ok(Self {
            t,
            eps,
            dropped,
            reference_eps,
        })
    }
}

/// Loss and gradients of one sample under fixed draws.
pub fn sample_loss(
    denoiser: &Denoiser,
    ex: &TrainingExample,
    draw: &SampleDraw,
    schedule: &NoiseSchedule,
    null: &ConditioningBundle,
) -> Result<(f64, Gradients)> {
    let zt = LatentGrid::new(q_sample(&ex.latent.data, draw.t, &draw.eps, schedule)?, draw.t);
    let base = if draw.dropped { null } else { &ex.cond };
    let reference = match (&ex.reference, &draw.reference_eps) {
        (Some(r), Some(e)) => Some(LatentGrid::new(q_sample(&r.data, draw.t, e, schedule)?, draw.t)),
        _ => None,
    };
    let cond = base.clone().with_reference(reference);
    denoiser.loss_and_grad(&zt, draw.t, &draw.eps, &cond)
}

/// Batch-mean of `‖ε − ε̂‖²` and its gradients. Each sample carries its own
/// random stream, so the result does not depend on batch order beyond
/// floating-point summation.
pub fn training_loss(
    batch: &[(&TrainingExample, Rng)],
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond_dropout: f64,
    null: &ConditioningBundle,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|(ex, rng)| {
            let mut rng = rng.clone();
            let draw = SampleDraw::draw(ex, schedule, cond_dropout, &mut rng)?;
            sample_loss(denoiser, ex, &draw, schedule, null)
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut grads = Gradients::zeros_like(&denoiser.params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grads.accumulate(g, 1.0 / n);
    }
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so coordinates whose gradient
/// is essentially zero are judged on absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of `loss` on `subset`
/// trainable coordinates: one from every trainable tensor first, the rest
/// drawn uniformly.
pub fn gradient_check(
    store: &ParamStore,
    loss: &(dyn Fn(&ParamStore) -> Result<f64> + Sync),
    analytic: &Gradients,
    subset: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let f0 = loss(store)?;
    let f1 = loss(store)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Determinism(format!("loss evaluations differ: {f0} vs {f1}")));
    }
    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let total: usize = trainable.iter().map(|&id| store.get(id).len()).sum();
    if total == 0 {
        return Err(Error::Input("no trainable parameters to check".into()));
    }
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for &id in &trainable {
        if coords.len() < subset {
            coords.push((id, rng.index(store.get(id).len())));
        }
    }
    while coords.len() < subset.min(total) {
        let mut k = rng.index(total);
        for &id in &trainable {
            let n = store.get(id).len();
            if k < n {
                coords.push((id, k));
                break;
            }
            k -= n;
        }
    }
    let results: Vec<(f64, f64, f64)> = coords
        .par_iter()
        .map(|&(id, k)| {
            let mut s = store.clone();
            let orig = s.get(id).data()[k];
            s.get_mut(id).data_mut()[k] = orig + eps;
            let fp = loss(&s)?;
            s.get_mut(id).data_mut()[k] = orig - eps;
            let fm = loss(&s)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.value(id, k);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            Ok((rel, a, numeric))
        })
        .collect::<Result<_>>()?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: coords.len(),
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&(id, k), &(rel, a, n)) in coords.iter().zip(&results) {
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((store.name(id).to_string(), k));
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}

/// One Adam update of the denoiser. Non-finite gradients abort with the
/// offending parameter names.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<StepInfo> {
    if !grads.is_finite() {
        let bad: Vec<&str> = grads
            .iter()
            .filter(|(_, g)| g.is_some_and(|g| !g.is_finite()))
            .map(|(id, _)| params.name(id))
            .collect();
        return Err(Error::NonFinite(format!("non-finite gradients in {bad:?}")));
    }
    adam_step(params, grads, state, &config.adam())
}

/// Mutable training state: weights, optimizer moments and the step count.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: Denoiser,
    pub optimizer: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Stream index bases keep batch shuffles and per-sample draws apart.
const SHUFFLE_STREAM: u64 = 1 << 62;

/// Random stream for sample `i` of step `step` (0-based).
pub fn sample_stream(seed: u64, step: usize, batch_size: usize, i: usize) -> Rng {
    Rng::new(seed).split((step * batch_size + i) as u64)
}

/// Trains for `config.steps` steps. `on_checkpoint(step, state)` runs every
/// `checkpoint_every` steps (after refreshing the reference branch).
pub fn train(
    dataset: &[TrainingExample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    null: &ConditioningBundle,
    state: &mut TrainState,
    on_checkpoint: &mut dyn FnMut(usize, &mut TrainState) -> Result<()>,
) -> Result<Vec<LossPoint>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let root = Rng::new(config.seed);
    let start = state.optimizer.step as usize;
    if start > config.steps {
        return Err(Error::Config(format!(
            "state is at step {start}, past the configured {} steps",
            config.steps
        )));
    }
    // Replay the epoch position so a resumed run sees the same batches.
    let seen = start * config.batch_size;
    let mut epoch = (seen / dataset.len()) as u64;
    let mut cursor = seen % dataset.len();
    let mut order: Vec<usize> = Vec::new();
    if cursor > 0 {
        order = (0..dataset.len()).collect();
        root.split(SHUFFLE_STREAM + epoch).shuffle(&mut order);
        epoch += 1;
    }
    let mut curve = Vec::with_capacity(config.steps - start);
    for step in start..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for i in 0..config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                root.split(SHUFFLE_STREAM + epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push((&dataset[order[cursor]], sample_stream(config.seed, step, config.batch_size, i)));
            cursor += 1;
        }
        let (loss, grads) = training_loss(&batch, &state.denoiser, schedule, config.cond_dropout, null)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss} at step {}", step + 1)));
        }
        let info = optimizer_step(&mut state.denoiser.params, &grads, &mut state.optimizer, config)?;
        curve.push(LossPoint {
            step: step + 1,
            loss,
            grad_norm: info.grad_norm,
        });
        if (step + 1) % 50 == 0 {
            log::info!("step {} loss {loss:.3} grad_norm {:.3}", step + 1, info.grad_norm);
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            state.denoiser.refresh_reference_branch()?;
            on_checkpoint(step + 1, state)?;
        }
    }
    Ok(curve)
}

pub fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,grad_norm")?;
    for p in curve {
        writeln!(f, "{},{},{}", p.step, p.loss, p.grad_norm)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean of the first `window` losses and of the last `window` losses.
pub fn smoothed_endpoints(curve: &[LossPoint], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(curve.len());
    let mean = |s: &[LossPoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}
