//! Run configuration: JSON file plus `--set a.b=v` overrides, validated as a
//! whole before any command does work.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use ctrldiff::denoiser::DenoiserConfig;
use ctrldiff::designhelper::SceneConstraints;
use ctrldiff::diffusion::{NoiseSchedule, ReverseVariance, ScheduleConfig};
use ctrldiff::evaluator::EvalTrainConfig;
use ctrldiff::prompt::ScorerTrainConfig;
use ctrldiff::trainer::TrainConfig;
use ctrldiff::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Three space types × three styles, each scene with a sofa.
    #[default]
    Desk,
    /// Every space type and style.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub split: String,
    pub subset: Subset,
    /// Omit dimensions from prompts.
    pub rough: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            count: 256,
            image_size: 32,
            split: "train".into(),
            subset: Subset::Desk,
            rough: false,
        }
    }
}

impl DataConfig {
    pub fn constraints(&self) -> SceneConstraints {
        match self.subset {
            Subset::Desk => SceneConstraints::desk_subset(),
            Subset::Full => SceneConstraints::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub patch_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { patch_size: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub d_text: usize,
    pub hidden: usize,
    pub scorer: ScorerTrainConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            hidden: 32,
            scorer: ScorerTrainConfig::default(),
        }
    }
}

/// Denoiser shape settings; latent size and width follow from the codec and
/// image size, text width from [`PromptConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    pub attention_levels: Vec<usize>,
    pub design_layers: usize,
    pub reference_trainable: bool,
    pub text_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::desk(1);
        Self {
            base_channels: d.base_channels,
            channel_mult: d.channel_mult,
            groups: d.groups,
            attention_levels: d.attention_levels,
            design_layers: d.design_layers,
            reference_trainable: d.reference_trainable,
            text_positions: d.text_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    pub count: usize,
    pub variance: ReverseVariance,
    pub clip_denoised: bool,
    pub design_control: bool,
    pub sheet_cols: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 8,
            variance: ReverseVariance::Posterior,
            clip_denoised: true,
            design_control: true,
            sheet_cols: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub classifier: EvalTrainConfig,
    pub dual_encoder: EvalTrainConfig,
    pub ks: Vec<usize>,
    /// Fraction of the reference corpus held out to score the classifier.
    pub holdout: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classifier: EvalTrainConfig::default(),
            dual_encoder: EvalTrainConfig::default(),
            ks: vec![1, 5, 10],
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    pub count: usize,
    pub mc_samples: usize,
    pub variance: ReverseVariance,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            count: 16,
            mc_samples: 4,
            variance: ReverseVariance::Posterior,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds codec fitting, prompt-encoder training and model initialization.
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub prompt: PromptConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub elbo: ElboConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            prompt: PromptConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::rescaled(100),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            elbo: ElboConfig::default(),
        }
    }
}

/// Where a configuration came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub file: Option<String>,
    pub overrides: Vec<String>,
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` in order and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<(Self, Provenance)> {
        let base = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        let prov = Provenance {
            file: file.map(|p| p.display().to_string()),
            overrides: overrides.to_vec(),
        };
        Ok((cfg, prov))
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.schedule)
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.codec.patch_size * self.codec.patch_size
    }

    pub fn latent_size(&self) -> usize {
        self.data.image_size / self.codec.patch_size.max(1)
    }

    pub fn denoiser(&self, vocab_size: usize) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            latent_channels: self.latent_channels(),
            latent_size: self.latent_size(),
            base_channels: m.base_channels,
            channel_mult: m.channel_mult.clone(),
            groups: m.groups,
            attention_levels: m.attention_levels.clone(),
            design_layers: m.design_layers,
            d_text: self.prompt.d_text,
            vocab_size,
            reference_trainable: m.reference_trainable,
            text_positions: m.text_positions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.count == 0 || d.split.is_empty() || d.split.contains(['/', '\\']) {
            return bad(format!("data: count must be ≥ 1 and split a plain name (got {d:?})"));
        }
        let p = self.codec.patch_size;
        if p == 0 || d.image_size == 0 || d.image_size % p != 0 {
            return bad(format!("codec: image size {} not divisible by patch {p}", d.image_size));
        }
        if d.image_size % 4 != 0 {
            return bad(format!("data: image size {} must be a multiple of 4", d.image_size));
        }
        if self.prompt.d_text == 0 || self.prompt.hidden == 0 || self.prompt.scorer.batch_size == 0 {
            return bad("prompt: d_text, hidden and scorer batch size must be positive".into());
        }
        self.denoiser(1).validate()?;
        self.schedule()?;
        self.train.validate()?;
        if self.sample.count == 0 || self.sample.sheet_cols == 0 {
            return bad("sample: count and sheet_cols must be ≥ 1".into());
        }
        self.eval.classifier.validate()?;
        self.eval.dual_encoder.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval: ks must be nonempty and positive".into());
        }
        if !(0.0 < self.eval.holdout && self.eval.holdout < 1.0) {
            return bad(format!("eval: holdout {} must lie in (0, 1)", self.eval.holdout));
        }
        if self.elbo.count == 0 || self.elbo.mc_samples == 0 {
            return bad("elbo: count and mc_samples must be ≥ 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(hex(&Sha256::digest(serde_json::to_vec(&v)?)))
    }
}

/// Sets the existing field at dotted path `a.b` to `v`, parsed as JSON when
/// possible and as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let mut node = &mut *root;
    for key in path.split('.') {
        node = node
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown key {path:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
