//! Ancestral sampling through the learned reverse chain.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Image, LatentGrid};
use crate::denoiser::{ConditioningBundle, Denoiser};
use crate::diffusion::{posterior_params, q_sample, reverse_params, GaussianParams, NoiseSchedule, ReverseVariance};
use crate::error::{Error, Result};
use crate::prompt::PromptEncoder;
use crate::tensor::{gaussian, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    /// `None` samples under the null prompt.
    pub prompt: Option<String>,
    pub reference: Option<Image>,
    pub seed: u64,
    pub count: usize,
    pub variance: ReverseVariance,
    /// Keep design tokens parsed from the prompt.
    pub design_control: bool,
    /// Project each step's clean-latent estimate onto decodable images
    /// (pixels in `[0, 1]`) before forming the reverse mean.
    pub clip_denoised: bool,
}

impl SampleRequest {
    pub fn new(prompt: Option<String>, seed: u64, count: usize) -> Self {
        Self {
            prompt,
            reference: None,
            seed,
            count,
            variance: ReverseVariance::Posterior,
            design_control: true,
            clip_denoised: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub stream: u64,
    pub prompt: Option<String>,
    /// Fraction of pixels clamped when decoding the running latent, from
    /// `t = T` down to `t = 0`.
    pub clamp_fraction_per_step: Vec<f64>,
    pub final_clamp_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub image: Image,
    pub latent: LatentGrid,
    pub record: SampleRecord,
}

/// Runs `z_T ~ N(0, I)` through `t = T..1`, adding noise except at the last
/// step, then decodes. Sample `j` uses stream `j` of `req.seed`.
pub fn ancestral_sample(
    req: &SampleRequest,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    codec: &Codec,
    encoder: &PromptEncoder,
) -> Result<Vec<GeneratedSample>> {
    if req.count == 0 {
        return Err(Error::Input("sample count must be ≥ 1".into()));
    }
    let out_w = denoiser.params.by_name("out.conv.w")?;
    if out_w.max_abs() == 0.0 {
        log::warn!("denoiser output layer is all zero; samples will be decoded noise");
    }
    let mut cond = match &req.prompt {
        Some(p) => ConditioningBundle::from_prompt(encoder, p)?,
        None => ConditioningBundle::null(encoder),
    };
    if !req.design_control {
        cond = cond.without_design();
    }
    let reference = match &req.reference {
        Some(img) => Some(codec.encode(img)?),
        None => None,
    };
    let c = &denoiser.config;
    let shape = [c.latent_channels, c.latent_size, c.latent_size];
    let root = Rng::new(req.seed);
    (0..req.count)
        .into_par_iter()
        .map(|j| {
            let mut rng = root.split(j as u64);
            let mut z = gaussian(&mut rng, &shape)?;
            let mut clamps = Vec::with_capacity(schedule.steps() + 1);
            for t in (1..=schedule.steps()).rev() {
                clamps.push(clamp_fraction(codec, &z)?);
                let r = match &reference {
                    Some(r0) => {
                        let e = gaussian(&mut rng, &shape)?;
                        Some(LatentGrid::new(q_sample(&r0.data, t, &e, schedule)?, t))
                    }
                    None => None,
                };
                let step_cond = cond.clone().with_reference(r);
                let eps_hat = denoiser.predict_noise(&LatentGrid::new(z.clone(), t), t, &step_cond)?;
                let p = if req.clip_denoised {
                    clipped_reverse_params(codec, &z, t, &eps_hat, schedule, req.variance)?
                } else {
                    reverse_params(&z, t, &eps_hat, schedule, req.variance)?
                };
                z = if t > 1 {
                    let noise = gaussian(&mut rng, &shape)?;
                    let sd = p.var.sqrt();
                    p.mean.zip_map(&noise, |m, e| m + sd * e)?
                } else {
                    p.mean
                };
            }
            let latent = LatentGrid::clean(z);
            let decoded = codec.decode(&latent)?;
            let total = (decoded.image.height() * decoded.image.width()) as f64;
            let final_clamp = decoded.clamped_pixels as f64 / total;
            clamps.push(final_clamp);
            Ok(GeneratedSample {
                image: decoded.image,
                latent,
                record: SampleRecord {
                    index: j,
                    seed: req.seed,
                    stream: j as u64,
                    prompt: req.prompt.clone(),
                    clamp_fraction_per_step: clamps,
                    final_clamp_fraction: final_clamp,
                },
            })
        })
        .collect()
}

/// Fraction of pixels with at least one channel outside `[0, 1]`.
fn clamp_fraction(codec: &Codec, z: &crate::Tensor) -> Result<f64> {
    let (h, w, px) = codec.decode_raw(&LatentGrid::clean(z.clone()))?;
    let clamped = px
        .chunks(3)
        .filter(|rgb| rgb.iter().any(|v| !(0.0..=1.0).contains(v)))
        .count();
    Ok(clamped as f64 / (h * w) as f64)
}

/// Reverse step through the clean-latent estimate
/// `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, clamped in pixel space. The codec is an
/// isometry up to scale, so the clamp is the nearest decodable latent.
/// Without clamping this equals [`reverse_params`].
fn clipped_reverse_params(
    codec: &Codec,
    z: &crate::Tensor,
    t: usize,
    eps_hat: &crate::Tensor,
    schedule: &NoiseSchedule,
    mode: ReverseVariance,
) -> Result<GaussianParams> {
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z0 = z.zip_map(eps_hat, |zt, e| (zt - s * e) / a)?;
    let (h, w, px) = codec.decode_raw(&LatentGrid::clean(z0))?;
    let px: Vec<f64> = px.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let z0 = codec.encode_raw_pixels(h, w, &px)?.data;
    if t == 1 {
        return Ok(GaussianParams {
            mean: z0,
            var: schedule.reverse_variance(1, mode),
        });
    }
    let mut p = posterior_params(&z0, z, t, schedule)?;
    p.var = schedule.reverse_variance(t, mode);
    Ok(p)
}

/// Writes `{i}.ppm`, `samples.json` and a contact sheet into `dir`.
pub fn write_samples(dir: &Path, samples: &[GeneratedSample], sheet_cols: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        s.image.write_ppm(&dir.join(format!("{}.ppm", s.record.index)))?;
    }
    let records: Vec<&SampleRecord> = samples.iter().map(|s| &s.record).collect();
    std::fs::write(dir.join("samples.json"), serde_json::to_vec_pretty(&records)?)?;
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    if !images.is_empty() {
        Image::contact_sheet(&images, sheet_cols.max(1))?.write_ppm(&dir.join("contact_sheet.ppm"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::prompt::{embedding_table, PatchScorer, Vocabulary};

    fn parts() -> (Denoiser, Codec, PromptEncoder) {
        let vocab = Vocabulary::builtin();
        let table = embedding_table(vocab.len(), 4, 3).unwrap();
        let scorer = PatchScorer::new(4, 3, &mut Rng::new(1));
        let enc = PromptEncoder { vocab, table, scorer };
        let d = Denoiser::init(DenoiserConfig::tiny(enc.vocab.len()), &enc.table, &mut Rng::new(2)).unwrap();
        let codec = Codec::new(2, 5, 0.5, 0.25).unwrap();
        (d, codec, enc)
    }

    #[test]
    fn single_step_inversion_with_oracle_noise() {
        let sched = NoiseSchedule::build(1, 0.3, 0.3).unwrap();
        let mut rng = Rng::new(1);
        let z0 = gaussian(&mut rng, &[12, 4, 4]).unwrap();
        let eps = gaussian(&mut rng, &[12, 4, 4]).unwrap();
        let z1 = q_sample(&z0, 1, &eps, &sched).unwrap();
        let p = reverse_params(&z1, 1, &eps, &sched, ReverseVariance::Posterior).unwrap();
        assert!(p.mean.sub(&z0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (mut d, codec, enc) = parts();
        d.randomize(&mut Rng::new(3), 0.1).unwrap();
        let sched = NoiseSchedule::build(5, 1e-3, 0.05).unwrap();
        let req = SampleRequest::new(Some("a sofa width 3 height 1".into()), 7, 2);
        let a = ancestral_sample(&req, &d, &sched, &codec, &enc).unwrap();
        let b = ancestral_sample(&req, &d, &sched, &codec, &enc).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.record, y.record);
        }
        assert_ne!(a[0].image, a[1].image);
        let other = ancestral_sample(&SampleRequest { seed: 8, ..req }, &d, &sched, &codec, &enc).unwrap();
        assert_ne!(other[0].image, a[0].image);
        assert_eq!(a[0].record.clamp_fraction_per_step.len(), 6);
    }

    /// With ε̂ ≡ 0 each step scales by 1/√α_t and adds variance σ_t², so the
    /// final variance follows `v ← v/α_t + σ_t²` from `v = 1`, with no noise
    /// at t = 1.
    #[test]
    fn zero_predictor_variance_matches_recursion() {
        let (d, codec, enc) = parts();
        let sched = NoiseSchedule::build(20, 1e-3, 0.2).unwrap();
        let req = SampleRequest::new(None, 11, 40);
        let samples = ancestral_sample(&req, &d, &sched, &codec, &enc).unwrap();
        let mut v = 1.0;
        for t in (1..=20).rev() {
            v /= sched.alpha(t);
            if t > 1 {
                v += sched.posterior_variance(t);
            }
        }
        let xs: Vec<f64> = samples.iter().flat_map(|s| s.latent.data.data().to_vec()).collect();
        let n = xs.len() as f64;
        let emp = xs.iter().map(|x| x * x).sum::<f64>() / n;
        // Var of the sample second moment for Gaussian data: 2v²/n.
        let sd = (2.0 * v * v / n).sqrt();
        assert!((emp - v).abs() < 3.0 * sd, "empirical {emp} vs {v}");
    }

    #[test]
    fn writes_sidecar_and_sheet() {
        let (d, codec, enc) = parts();
        let sched = NoiseSchedule::build(2, 1e-3, 0.05).unwrap();
        let s = ancestral_sample(&SampleRequest::new(None, 1, 3), &d, &sched, &codec, &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_samples(dir.path(), &s, 2).unwrap();
        for f in ["0.ppm", "2.ppm", "samples.json", "contact_sheet.ppm"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(ancestral_sample(&SampleRequest::new(None, 1, 0), &d, &sched, &codec, &enc).is_err());
    }
}
