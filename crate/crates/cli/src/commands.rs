//! Subcommand implementations. Each returns the process exit code on
//! completion; errors propagate to [`crate::run`].

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use ctrldiff::codec::{Image, LatentGrid};
use ctrldiff::denoiser::{ConditioningBundle, Denoiser, DenoiserConfig};
use ctrldiff::designhelper::{generate_corpus, read_corpus, write_corpus, CorpusManifest, Sample, SCHEMA_VERSION};
use ctrldiff::diffusion::elbo;
use ctrldiff::evaluator::{
    frechet_distance, inception_score, retrieval_recall, similarity_score, DualEncoder, FeatureStats,
    RetrievalTable, SpaceClassifier, RELIABLE_ACCURACY,
};
use ctrldiff::optim::AdamState;
use ctrldiff::prompt::{embedding_table, PatchScorer, PromptEncoder, Vocabulary};
use ctrldiff::sampler::{ancestral_sample, write_samples, SampleRecord, SampleRequest};
use ctrldiff::tensor::gaussian;
use ctrldiff::trainer::{
    gradient_check, sample_loss, smoothed_endpoints, train, write_loss_csv, SampleDraw, TrainState,
    TrainingExample,
};
use ctrldiff::{Error, Result, Rng};

use crate::config::{Provenance, RunConfig};
use crate::manifest::RunManifest;
use crate::model::Model;

/// Averaging window for the smoothed start and end of the loss curve.
pub const LOSS_WINDOW: usize = 50;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Settings shared by every subcommand.
pub struct Context {
    pub config: RunConfig,
    pub provenance: Provenance,
    pub args: Vec<String>,
}

impl Context {
    fn manifest(&self, command: &str, seed: u64) -> Result<RunManifest> {
        RunManifest::new(command, &self.args, &self.config, &self.provenance, seed)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// A corpus path may name the split directory itself or its parent.
pub fn split_dir(path: &Path, split: &str) -> PathBuf {
    if path.join("manifest.json").is_file() {
        path.to_path_buf()
    } else {
        path.join(split)
    }
}

pub fn load_corpus(path: &Path, split: &str) -> Result<(PathBuf, Vec<Sample>)> {
    let dir = split_dir(path, split);
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Input(format!("data: no corpus at {}", dir.display())));
    }
    let (_, samples) = read_corpus(&dir)?;
    Ok((dir, samples))
}

pub fn gen_data(ctx: &Context, out: &Path) -> Result<i32> {
    let d = &ctx.config.data;
    let samples = generate_corpus(d.seed, d.count, d.image_size, &d.constraints(), d.rough)?;
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        seed: d.seed,
        count: d.count,
        image_size: d.image_size,
        split: d.split.clone(),
        constraints: d.constraints(),
        rough: d.rough,
    };
    write_corpus(out, &manifest, &samples)?;
    ctx.manifest("gen-data", d.seed)?.finish(out)?;
    log::info!("wrote {} samples to {}", samples.len(), out.join(&d.split).display());
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub start_step: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss_window: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_ratio: Option<f64>,
    pub scorer_accuracy: Option<f64>,
    pub scorer_loss: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
}

pub fn train_cmd(ctx: &Context, data: &Path, out: &Path, resume: Option<&Path>) -> Result<i32> {
    let cfg = &ctx.config;
    let (data_dir, samples) = load_corpus(data, &cfg.data.split)?;
    if samples[0].image.height() != cfg.data.image_size {
        return Err(Error::Config(format!(
            "data: corpus images are {}px, config expects {}",
            samples[0].image.height(),
            cfg.data.image_size
        )));
    }
    let mut manifest = ctx.manifest("train", cfg.train.seed)?;
    manifest.input("data", &data_dir)?;
    let (model, optimizer, scorer) = match resume {
        Some(path) => {
            manifest.input("resume", path)?;
            let (mut model, opt) = Model::load(path)?;
            let want = cfg.denoiser(model.encoder.vocab.len());
            if model.denoiser.config != want {
                return Err(Error::Config("train: resumed checkpoint has a different model shape".into()));
            }
            model.config = cfg.clone();
            let opt = opt.ok_or_else(|| Error::Input("train: checkpoint has no optimizer state".into()))?;
            (model, opt, None)
        }
        None => {
            let (model, scorer) = Model::initialize(cfg, &samples)?;
            let opt = AdamState::new(&model.denoiser.params);
            (model, opt, Some(scorer))
        }
    };
    let start_step = optimizer.step;
    let examples: Vec<TrainingExample> = model.examples(&samples)?;
    let schedule = cfg.schedule()?;
    let null = ConditioningBundle::null(&model.encoder);
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut state = TrainState {
        denoiser: model.denoiser.clone(),
        optimizer,
    };
    let template = model.clone();
    let curve = train(&examples, &cfg.train, &schedule, &null, &mut state, &mut |step, st| {
        let m = Model {
            denoiser: st.denoiser.clone(),
            ..template.clone()
        };
        m.checkpoint(Some(&st.optimizer))?
            .save(&ckpt_dir.join(format!("step_{step:06}.ddmp")))?;
        log::info!("checkpoint at step {step}");
        Ok(())
    })?;
    let trained = Model {
        denoiser: state.denoiser.clone(),
        ..model
    };
    trained.checkpoint(Some(&state.optimizer))?.save(&out.join("model.ddmp"))?;
    write_loss_csv(&out.join("loss.csv"), &curve)?;
    let ends = smoothed_endpoints(&curve, LOSS_WINDOW);
    let report = TrainReport {
        start_step,
        steps: curve.len(),
        batch_size: cfg.train.batch_size,
        loss_window: LOSS_WINDOW,
        initial_loss: ends.map(|e| e.0),
        final_loss: ends.map(|e| e.1),
        loss_ratio: ends.map(|(a, b)| b / a),
        scorer_accuracy: scorer.as_ref().map(|s| s.accuracy),
        scorer_loss: scorer.as_ref().map(|s| s.final_loss),
        trainable_params: trained.denoiser.params.trainable_count(),
        total_params: trained.denoiser.params.total_count(),
    };
    write_json(&out.join("train_report.json"), &report)?;
    manifest.finish(out)?;
    if let (Some(a), Some(b)) = (report.initial_loss, report.final_loss) {
        log::info!("loss {a:.3} -> {b:.3} over {} steps", report.steps);
    }
    Ok(0)
}

pub fn sample_cmd(ctx: &Context, checkpoint: &Path, out: &Path, prompt: Option<String>, reference: Option<&Path>) -> Result<i32> {
    let s = &ctx.config.sample;
    let mut manifest = ctx.manifest("sample", s.seed)?;
    manifest.input("checkpoint", checkpoint)?;
    let (model, _) = Model::load(checkpoint)?;
    let reference = match reference {
        Some(p) => {
            manifest.input("reference", p)?;
            Some(Image::read_ppm(p)?)
        }
        None => None,
    };
    let req = SampleRequest {
        reference,
        variance: s.variance,
        design_control: s.design_control,
        clip_denoised: s.clip_denoised,
        ..SampleRequest::new(prompt, s.seed, s.count)
    };
    let schedule = model.config.schedule()?;
    let samples = ancestral_sample(&req, &model.denoiser, &schedule, &model.codec, &model.encoder)?;
    write_samples(out, &samples, s.sheet_cols)?;
    manifest.finish(out)?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(0)
}

/// Images with optional prompts: a corpus split, or a `sample` output
/// directory.
pub fn load_image_set(path: &Path, split: &str) -> Result<(Vec<Image>, Option<Vec<String>>)> {
    if split_dir(path, split).join("manifest.json").is_file() {
        let (_, samples) = load_corpus(path, split)?;
        let images = samples.iter().map(|s| s.image.clone()).collect();
        let prompts = samples.into_iter().map(|s| s.prompt).collect();
        return Ok((images, Some(prompts)));
    }
    let records_path = path.join("samples.json");
    if !records_path.is_file() {
        return Err(Error::Input(format!("eval: {} is neither a corpus nor a sample set", path.display())));
    }
    let records: Vec<SampleRecord> = serde_json::from_slice(&std::fs::read(records_path)?)?;
    let images = records
        .iter()
        .map(|r| Image::read_ppm(&path.join(format!("{}.ppm", r.index))))
        .collect::<Result<Vec<_>>>()?;
    let prompts = records.into_iter().map(|r| r.prompt).collect::<Option<Vec<_>>>();
    Ok((images, prompts))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub reference_count: usize,
    pub candidate_count: usize,
    pub classifier_train_accuracy: f64,
    pub classifier_holdout_accuracy: f64,
    /// Held-out accuracy reached the level at which the feature-based
    /// scores are considered meaningful.
    pub classifier_reliable: bool,
    pub dual_encoder_train_accuracy: f64,
    pub fid: f64,
    pub is_reference: f64,
    pub is_candidate: f64,
    pub clip_sim_reference: f64,
    pub clip_sim_candidate: Option<f64>,
    pub retrieval_reference: Option<RetrievalTable>,
    pub retrieval_candidate: Option<RetrievalTable>,
}

pub fn eval_cmd(ctx: &Context, reference: &Path, candidate: &Path, out: &Path) -> Result<i32> {
    let cfg = &ctx.config;
    let e = &cfg.eval;
    let mut manifest = ctx.manifest("eval", e.seed)?;
    let (ref_dir, ref_samples) = load_corpus(reference, &cfg.data.split)?;
    manifest.input("reference", &ref_dir)?;
    manifest.input("candidate", candidate)?;
    let (cand_images, cand_prompts) = load_image_set(candidate, &cfg.data.split)?;

    let n = ref_samples.len();
    let n_hold = ((n as f64 * e.holdout).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    if n < 4 {
        return Err(Error::Input(format!("eval: reference corpus needs at least 4 samples, has {n}")));
    }
    let n_train = n - n_hold;
    let images: Vec<Image> = ref_samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = ref_samples.iter().map(|s| s.spec.space_type).collect();
    let prompts: Vec<String> = ref_samples.iter().map(|s| s.prompt.clone()).collect();
    let root = Rng::new(e.seed);

    let mut clf = SpaceClassifier::new(&mut root.split(0));
    let clf_train = clf.train(&images[..n_train], &labels[..n_train], &e.classifier)?;
    let holdout_acc = clf.accuracy(&images[n_train..], &labels[n_train..])?;
    if holdout_acc < RELIABLE_ACCURACY {
        log::warn!("eval: classifier held-out accuracy {holdout_acc:.3} is below {RELIABLE_ACCURACY}");
    }
    let mut dual = DualEncoder::new(Vocabulary::builtin(), &mut root.split(1));
    let dual_train = dual.train(&images[..n_train], &prompts[..n_train], &e.dual_encoder)?;

    let ref_stats = FeatureStats::from_features(&clf.features(&images)?)?;
    let cand_stats = FeatureStats::from_features(&clf.features(&cand_images)?)?;
    let max_k = e.ks.iter().copied().max().unwrap_or(1);
    let recall = |imgs: &[Image], texts: &[String]| -> Result<Option<RetrievalTable>> {
        if imgs.len() <= max_k {
            log::warn!("eval: {} pairs cannot support recall@{max_k}; skipped", imgs.len());
            return Ok(None);
        }
        Ok(Some(retrieval_recall(&dual.embed_images(imgs)?, &dual.embed_texts(texts)?, &e.ks)?))
    };
    let report = EvalReport {
        reference_count: n,
        candidate_count: cand_images.len(),
        classifier_train_accuracy: clf_train.train_accuracy,
        classifier_holdout_accuracy: holdout_acc,
        classifier_reliable: holdout_acc >= RELIABLE_ACCURACY,
        dual_encoder_train_accuracy: dual_train.train_accuracy,
        fid: frechet_distance(&ref_stats, &cand_stats)?,
        is_reference: inception_score(&images, &clf)?,
        is_candidate: inception_score(&cand_images, &clf)?,
        clip_sim_reference: similarity_score(&images[n_train..], &prompts[n_train..], &dual)?,
        clip_sim_candidate: match &cand_prompts {
            Some(p) => Some(similarity_score(&cand_images, p, &dual)?),
            None => None,
        },
        retrieval_reference: recall(&images[n_train..], &prompts[n_train..])?,
        retrieval_candidate: match &cand_prompts {
            Some(p) => recall(&cand_images, p)?,
            None => None,
        },
    };
    std::fs::create_dir_all(out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    let rows: Vec<(String, RetrievalTable)> = [
        ("reference (held out)", &report.retrieval_reference),
        ("candidate", &report.retrieval_candidate),
    ]
    .into_iter()
    .filter_map(|(name, t)| t.clone().map(|t| (name.to_string(), t)))
    .collect();
    std::fs::write(out.join("retrieval.txt"), RetrievalTable::format(&rows))?;
    manifest.finish(out)?;
    log::info!(
        "FID {:.3}, IS {:.3} (reference {:.3})",
        report.fid,
        report.is_candidate,
        report.is_reference
    );
    Ok(0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckOutput {
    pub preset: String,
    pub params: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Finite-difference check of the full conditional loss with text,
/// design tokens and a reference image all active.
pub fn gradcheck(preset: &str, seed: u64) -> Result<GradCheckOutput> {
    let vocab = Vocabulary::builtin();
    let cfg = DenoiserConfig::preset(preset, vocab.len())?;
    let root = Rng::new(seed);
    let table = embedding_table(vocab.len(), cfg.d_text, root.split(0).next_u64())?;
    let scorer = PatchScorer::new(cfg.d_text, 3, &mut root.split(1));
    let enc = PromptEncoder { vocab, table, scorer };
    let mut d = Denoiser::init(cfg.clone(), &enc.table, &mut root.split(2))?;
    d.randomize(&mut root.split(3), 0.5)?;
    let schedule = ctrldiff::diffusion::NoiseSchedule::build(10, 1e-4, 0.02)?;
    let null = ConditioningBundle::null(&enc);
    let mut rng = root.split(4);
    let shape = [cfg.latent_channels, cfg.latent_size, cfg.latent_size];
    let ex = TrainingExample {
        latent: LatentGrid::clean(gaussian(&mut rng, &shape)?),
        cond: ConditioningBundle::from_prompt(&enc, "a sofa width 3 height 1 and a table width 2 height 2")?,
        reference: Some(LatentGrid::clean(gaussian(&mut rng, &shape)?)),
    };
    let draw = SampleDraw::draw(&ex, &schedule, 0.0, &mut rng)?;
    let (_, grads) = sample_loss(&d, &ex, &draw, &schedule, &null)?;
    let template = d.clone();
    let f = |s: &ctrldiff::params::ParamStore| {
        let mut m = template.clone();
        m.params = s.clone();
        Ok(sample_loss(&m, &ex, &draw, &schedule, &null)?.0)
    };
    let r = gradient_check(&d.params, &f, &grads, 200, 1e-5, &mut root.split(5))?;
    Ok(GradCheckOutput {
        preset: preset.into(),
        params: d.params.trainable_count(),
        checked: r.checked,
        max_relative_error: r.max_relative_error,
        tolerance: GRADCHECK_TOLERANCE,
        worst: r.worst,
        passed: r.max_relative_error < GRADCHECK_TOLERANCE,
    })
}

pub fn gradcheck_cmd(ctx: &Context, preset: &str, seed: u64, out: Option<&Path>) -> Result<i32> {
    let r = gradcheck(preset, seed)?;
    println!("max relative error {:.3e} over {} coordinates ({} params)", r.max_relative_error, r.checked, r.params);
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("gradcheck_report.json"), &r)?;
        ctx.manifest("gradcheck", seed)?.finish(out)?;
    }
    Ok(if r.passed { 0 } else { 3 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElboSummary {
    pub count: usize,
    pub mc_samples: usize,
    pub latent_dims: usize,
    pub mean_elbo: f64,
    /// Negative mean ELBO per latent dimension, in bits.
    pub bits_per_dim: f64,
    pub mean_reconstruction: f64,
    pub mean_prior_kl: f64,
    /// Mean of each denoising KL term, indexed by `t − 2` for `t = 2..T`.
    pub mean_kl_by_step: Vec<f64>,
    pub per_sample: Vec<serde_json::Value>,
}

pub fn elbo_cmd(ctx: &Context, checkpoint: &Path, data: &Path, out: &Path) -> Result<i32> {
    let cfg = &ctx.config;
    let e = &cfg.elbo;
    let mut manifest = ctx.manifest("elbo", cfg.seed)?;
    manifest.input("checkpoint", checkpoint)?;
    let (data_dir, samples) = load_corpus(data, &cfg.data.split)?;
    manifest.input("data", &data_dir)?;
    let (model, _) = Model::load(checkpoint)?;
    let schedule = model.config.schedule()?;
    let root = Rng::new(cfg.seed);
    let mut reports = Vec::new();
    for (i, s) in samples.iter().take(e.count).enumerate() {
        let z0 = model.codec.encode(&s.image)?;
        let cond = ConditioningBundle::from_prompt(&model.encoder, &s.prompt)?;
        let pred = model.denoiser.conditioned(&cond);
        let r = elbo(&z0, &pred, &schedule, e.variance, &mut root.split(i as u64), e.mc_samples)?;
        reports.push(r);
    }
    let n = reports.len() as f64;
    let dims = model.denoiser.config.latent_channels * model.denoiser.config.latent_size.pow(2);
    let mean = |f: &dyn Fn(&ctrldiff::diffusion::ElboReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_elbo = mean(&|r| r.total);
    let steps = schedule.steps();
    let summary = ElboSummary {
        count: reports.len(),
        mc_samples: e.mc_samples,
        latent_dims: dims,
        mean_elbo,
        bits_per_dim: -mean_elbo / (dims as f64 * std::f64::consts::LN_2),
        mean_reconstruction: mean(&|r| r.reconstruction_term),
        mean_prior_kl: mean(&|r| r.kl_terms[0]),
        mean_kl_by_step: (1..steps).map(|k| mean(&|r| r.kl_terms[k])).collect(),
        per_sample: reports
            .iter()
            .enumerate()
            .map(|(i, r)| json!({"index": i, "total": r.total, "std_error": r.total_std_error}))
            .collect(),
    };
    std::fs::create_dir_all(out)?;
    write_json(&out.join("elbo_report.json"), &summary)?;
    manifest.finish(out)?;
    log::info!("mean ELBO {:.3} ({:.4} bits/dim)", summary.mean_elbo, summary.bits_per_dim);
    Ok(0)
}
