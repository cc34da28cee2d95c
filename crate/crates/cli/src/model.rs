//! Trained artifacts as one unit, and their mapping to checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ctrldiff::codec::Codec;
use ctrldiff::denoiser::{ConditioningBundle, Denoiser, DenoiserConfig};
use ctrldiff::designhelper::Sample;
use ctrldiff::optim::AdamState;
use ctrldiff::params::ParamStore;
use ctrldiff::prompt::{LexiconEntry, PatchScorer, PromptEncoder, ScorerTraining, Vocabulary};
use ctrldiff::trainer::TrainingExample;
use ctrldiff::{Error, Result, Rng, Tensor};

use crate::checkpoint::{Checkpoint, NamedTensor, OptimizerSnapshot};
use crate::config::RunConfig;

const DENOISER: &str = "denoiser/";
const SCORER: &str = "prompt/scorer/";
const TABLE: &str = "prompt/table";

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    run: RunConfig,
    denoiser: DenoiserConfig,
    vocab: Vec<LexiconEntry>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub encoder: PromptEncoder,
    pub codec: Codec,
    pub denoiser: Denoiser,
}

impl Model {
    /// Fits the codec, trains the prompt encoder and initializes the
    /// denoiser, each from its own stream of `config.seed`.
    pub fn initialize(config: &RunConfig, samples: &[Sample]) -> Result<(Self, ScorerTraining)> {
        if samples.is_empty() {
            return Err(Error::Input("model: empty training corpus".into()));
        }
        let root = Rng::new(config.seed);
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let codec = Codec::fitted(config.codec.patch_size, root.split(0).next_u64(), &images)?;
        let prompts: Vec<String> = samples.iter().map(|s| s.prompt.clone()).collect();
        let p = &config.prompt;
        let (encoder, scorer) = PromptEncoder::train(
            Vocabulary::builtin(),
            p.d_text,
            p.hidden,
            root.split(1).next_u64(),
            &prompts,
            &p.scorer,
        )?;
        let dcfg = config.denoiser(encoder.vocab.len());
        let denoiser = Denoiser::init(dcfg, &encoder.table, &mut root.split(2))?;
        let model = Self {
            config: config.clone(),
            encoder,
            codec,
            denoiser,
        };
        Ok((model, scorer))
    }

    pub fn examples(&self, samples: &[Sample]) -> Result<Vec<TrainingExample>> {
        samples
            .iter()
            .map(|s| {
                Ok(TrainingExample {
                    latent: self.codec.encode(&s.image)?,
                    cond: ConditioningBundle::from_prompt(&self.encoder, &s.prompt)?,
                    reference: None,
                })
            })
            .collect()
    }

    pub fn checkpoint(&self, optimizer: Option<&AdamState>) -> Result<Checkpoint> {
        let blob = ConfigBlob {
            run: self.config.clone(),
            denoiser: self.denoiser.config.clone(),
            vocab: self.encoder.vocab.entries().to_vec(),
        };
        let params = &self.denoiser.params;
        let mut tensors: Vec<NamedTensor> = params
            .iter()
            .map(|(name, t, _)| NamedTensor {
                name: format!("{DENOISER}{name}"),
                value: t.clone(),
            })
            .collect();
        tensors.push(NamedTensor {
            name: TABLE.into(),
            value: self.encoder.table.clone(),
        });
        tensors.extend(self.encoder.scorer.params.iter().map(|(name, t, _)| NamedTensor {
            name: format!("{SCORER}{name}"),
            value: t.clone(),
        }));
        let optimizer = optimizer.map(|o| OptimizerSnapshot {
            step: o.step,
            moments: params
                .iter()
                .zip(o.m.iter().zip(&o.v))
                .filter_map(|((name, _, _), (m, v))| {
                    Some((format!("{DENOISER}{name}"), m.clone()?, v.clone()?))
                })
                .collect(),
        });
        Ok(Checkpoint {
            config: serde_json::to_value(&blob)?,
            tensors,
            optimizer,
            rng: Rng::new(self.config.train.seed).state(),
            codec: self.codec.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>)> {
        let blob: ConfigBlob = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint: config blob: {e}")))?;
        let vocab = Vocabulary::from_entries(blob.vocab)?;
        let table = ck.tensor(TABLE)?.clone();
        let mut scorer = PatchScorer::new(blob.run.prompt.d_text, blob.run.prompt.hidden, &mut Rng::new(0));
        fill(&mut scorer.params, ck, SCORER)?;
        let mut denoiser = Denoiser::init(blob.denoiser, &table, &mut Rng::new(0))?;
        fill(&mut denoiser.params, ck, DENOISER)?;
        let expected = denoiser.params.len() + scorer.params.len() + 1;
        if ck.tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint: {} tensors, model expects {expected}",
                ck.tensors.len()
            )));
        }
        let optimizer = match &ck.optimizer {
            None => None,
            Some(snap) => {
                let mut state = AdamState::new(&denoiser.params);
                state.step = snap.step;
                let trainable = state.m.iter().filter(|m| m.is_some()).count();
                if snap.moments.len() != trainable {
                    return Err(Error::Format(format!(
                        "checkpoint: {} moment pairs for {trainable} trainable tensors",
                        snap.moments.len()
                    )));
                }
                for (name, m, v) in &snap.moments {
                    let short = name.strip_prefix(DENOISER).unwrap_or(name);
                    let k = denoiser.params.id(short)?.index();
                    match &state.m[k] {
                        Some(cur) if cur.shape() == m.shape() && cur.shape() == v.shape() => {}
                        _ => return Err(Error::Format(format!("checkpoint: bad moments for {name}"))),
                    }
                    state.m[k] = Some(m.clone());
                    state.v[k] = Some(v.clone());
                }
                Some(state)
            }
        };
        let model = Self {
            config: blob.run,
            encoder: PromptEncoder { vocab, table, scorer },
            codec: ck.codec.clone(),
            denoiser,
        };
        Ok((model, optimizer))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn fill(store: &mut ParamStore, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let src: &Tensor = ck.tensor(&name)?;
        let dst = store.get_mut(id);
        if dst.shape() != src.shape() {
            return Err(Error::Format(format!(
                "checkpoint: {name} has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}
