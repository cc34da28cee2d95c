//! Noise-prediction UNet with text cross-attention, reference-appearance
//! attention and design-specification control in the decoder.
//!
//! Feature maps flow channels-last as `[h·w × c]`. A frozen copy of the
//! encoder path (`ref.*` parameters) embeds the reference latent; its
//! normalized features join the keys and values of every self-attention
//! site at the matching resolution.

use serde::{Deserialize, Serialize};

use crate::codec::{chw_to_tokens, tokens_to_chw, LatentGrid};
use crate::designhelper::parse_dimensions;
use crate::diffusion::NoisePredictor;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamStore};
use crate::prompt::{PromptEncoder, PromptFeatures, Vocabulary, UNK_ID};
use crate::tensor::{gaussian, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub groups: usize,
    /// Resolution levels (0 = finest) that carry attention blocks.
    pub attention_levels: Vec<usize>,
    /// Number of decoder levels, finest first, with design control.
    pub design_layers: usize,
    pub d_text: usize,
    pub vocab_size: usize,
    pub reference_trainable: bool,
    /// Add sinusoidal position codes to prompt tokens before text
    /// cross-attention.
    #[serde(default)]
    pub text_positions: bool,
}

impl DenoiserConfig {
    /// 8×8 latents from 32×32 images at patch size 4.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            latent_channels: 48,
            latent_size: 8,
            base_channels: 64,
            channel_mult: vec![1, 2],
            groups: 8,
            attention_levels: vec![0, 1],
            design_layers: 2,
            d_text: 32,
            vocab_size,
            reference_trainable: false,
            text_positions: true,
        }
    }

    /// Gradient-check scale model.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            latent_channels: 12,
            latent_size: 4,
            base_channels: 4,
            channel_mult: vec![1, 1],
            groups: 2,
            attention_levels: vec![0],
            design_layers: 2,
            d_text: 4,
            vocab_size,
            reference_trainable: false,
            text_positions: true,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_size)),
            "tiny" => Ok(Self::tiny(vocab_size)),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Width of a design token: kind, width and height embeddings side by side.
    pub fn design_dim(&self) -> usize {
        3 * self.d_text
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.latent_channels == 0 || self.base_channels == 0 || self.d_text == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be nonempty and positive".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        for l in 0..self.levels() {
            if self.channels(l) % self.groups != 0 {
                return bad(format!("{} channels not divisible by {} groups", self.channels(l), self.groups));
            }
        }
        let scale = 1usize << (self.levels() - 1);
        if self.latent_size == 0 || self.latent_size % scale != 0 {
            return bad(format!("latent size {} not divisible by {scale}", self.latent_size));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} out of range"));
        }
        if self.design_layers > self.levels() {
            return bad(format!("design_layers {} exceeds {} levels", self.design_layers, self.levels()));
        }
        if self.vocab_size == 0 {
            return bad("vocabulary is empty".into());
        }
        Ok(())
    }
}

/// Projection matrices of one attention site. `wq` maps query inputs and
/// `wk`/`wv` map key/value inputs into the shared head width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// `softmax(q·Wq (kv·Wk)ᵀ / √d_k + bias) · kv·Wv · Wo`, single head.
fn attend(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    w: [Var; 4],
    bias: Option<Var>,
) -> Result<Var> {
    let [wq, wk, wv, wo] = w;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let d_k = g.value(k).cols();
    let logits = g.matmul_nt(q, k)?;
    let mut logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add_row(logits, b)?;
    }
    let a = g.softmax_rows(logits);
    let out = g.matmul(a, v)?;
    g.matmul(out, wo)
}

fn proj_vars(g: &mut Graph, p: &AttentionProj) -> [Var; 4] {
    [
        g.input(p.wq.clone()),
        g.input(p.wk.clone()),
        g.input(p.wv.clone()),
        g.input(p.wo.clone()),
    ]
}

/// Scaled dot-product attention; `logit_bias` (one entry per key) is added
/// to every row of logits before the softmax.
pub fn attention(
    q_in: &Tensor,
    kv_in: &Tensor,
    proj: &AttentionProj,
    logit_bias: Option<&[f64]>,
) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.input(q_in.clone());
    let kv = g.input(kv_in.clone());
    let w = proj_vars(&mut g, proj);
    let bias = match logit_bias {
        Some(b) => {
            if b.len() != kv_in.rows() {
                return Err(shape_err!("logit bias has {} entries for {} keys", b.len(), kv_in.rows()));
            }
            Some(g.input(Tensor::new(vec![1, b.len()], b.to_vec())?))
        }
        None => None,
    };
    let out = attend(&mut g, q, kv, w, bias)?;
    Ok(g.value(out).clone())
}

/// Attention of `h` over the sequence concatenation of `h` and `h_ref`.
/// Attention rows are independent, so querying with the concatenation and
/// keeping the `h` rows is the same as querying with `h` alone.
pub fn appearance_context_attention(h: &Tensor, h_ref: Option<&Tensor>, proj: &AttentionProj) -> Result<Tensor> {
    match h_ref {
        None => attention(h, h, proj, None),
        Some(r) => {
            if r.cols() != h.cols() {
                return Err(shape_err!("reference features have {} channels, expected {}", r.cols(), h.cols()));
            }
            let mut rows: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row(i).to_vec()).collect();
            rows.extend((0..r.rows()).map(|i| r.row(i).to_vec()));
            attention(h, &Tensor::from_rows(&rows)?, proj, None)
        }
    }
}

fn design_fuse(g: &mut Graph, h: Var, c_design: Var, w: [Var; 4]) -> Result<Var> {
    let att = attend(g, c_design, h, w, None)?;
    let pooled = g.mean_rows(att);
    g.add_row(h, pooled)
}

/// Design tokens query the spatial features; the mean of the `k` outputs
/// is added to every position. Empty `c_design` returns `h` unchanged.
pub fn design_control_block(h: &Tensor, c_design: Option<&Tensor>, proj: &AttentionProj) -> Result<Tensor> {
    let Some(c) = c_design else {
        return Ok(h.clone());
    };
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let hv = g.input(h.clone());
    let cv = g.input(c.clone());
    let w = proj_vars(&mut g, proj);
    let out = design_fuse(&mut g, hv, cv, w)?;
    Ok(g.value(out).clone())
}

/// Vocabulary ids of one design clause: furniture kind, width numeral,
/// height numeral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignToken {
    pub ids: [usize; 3],
}

/// Everything the denoiser is conditioned on besides `z_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub text: Option<PromptFeatures>,
    /// Reference latent at the same timestep as `z_t`.
    pub reference: Option<LatentGrid>,
    pub design: Vec<DesignToken>,
}

impl ConditioningBundle {
    pub fn new(text: Option<PromptFeatures>, reference: Option<LatentGrid>, design: Vec<DesignToken>) -> Result<Self> {
        if text.is_none() && reference.is_none() && design.is_empty() {
            return Err(Error::Input("conditioning bundle is empty".into()));
        }
        if let Some(w) = text.as_ref().and_then(|t| t.weights.as_ref()) {
            if w.len() != text.as_ref().map_or(0, PromptFeatures::len) || w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Input("prompt weights must be positive, one per token".into()));
            }
        }
        Ok(Self { text, reference, design })
    }

    /// Text features plus design tokens parsed from `<kind> width n height m`
    /// clauses.
    pub fn from_prompt(encoder: &PromptEncoder, prompt: &str) -> Result<Self> {
        let features = encoder.encode(prompt)?;
        let design = design_tokens(&encoder.vocab, &features.tokens);
        Self::new(Some(features), None, design)
    }

    /// The null prompt: a single unknown token and no design tokens.
    pub fn null(encoder: &PromptEncoder) -> Self {
        let features = PromptFeatures {
            token_ids: vec![UNK_ID],
            tokens: vec![crate::prompt::UNK.to_string()],
            embeddings: Tensor::new(vec![1, encoder.table.cols()], encoder.table.row(UNK_ID).to_vec())
                .expect("table row"),
            weights: Some(vec![1.0]),
        };
        Self {
            text: Some(features),
            reference: None,
            design: Vec::new(),
        }
    }

    pub fn with_reference(mut self, reference: Option<LatentGrid>) -> Self {
        self.reference = reference;
        self
    }

    pub fn without_design(mut self) -> Self {
        self.design.clear();
        self
    }
}

/// Design tokens for every dimension clause in `tokens` whose words are in
/// the vocabulary.
pub fn design_tokens(vocab: &Vocabulary, tokens: &[String]) -> Vec<DesignToken> {
    parse_dimensions(tokens)
        .into_iter()
        .filter_map(|c| {
            let ids = c.positions.map(|p| vocab.id(&tokens[p]));
            match ids {
                [Some(a), Some(b), Some(c)] => Some(DesignToken { ids: [a, b, c] }),
                _ => None,
            }
        })
        .collect()
}

/// Denoiser weights and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

const REF: &str = "ref.";

impl Denoiser {
    /// Fresh parameters. The output head, the time gains on its two input
    /// skips and every design-control output projection start at zero, so
    /// the initial prediction is 0 and design control starts as the
    /// identity. `text_table` seeds the trainable token embeddings.
    pub fn init(config: DenoiserConfig, text_table: &Tensor, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if text_table.shape() != [config.vocab_size, config.d_text] {
            return Err(shape_err!(
                "text table {:?} does not match [{}, {}]",
                text_table.shape(),
                config.vocab_size,
                config.d_text
            ));
        }
        let c = &config;
        let mut s = ParamStore::new();
        let b = c.base_channels;
        s.insert("text.emb", text_table.clone(), true);
        s.insert_init("time.w1", &[b, b], b, rng);
        s.insert_zeros("time.b1", &[b]);
        s.insert_init("time.w2", &[b, b], b, rng);
        s.insert_zeros("time.b2", &[b]);
        conv(&mut s, "conv_in", c.latent_channels, b, rng);
        let mut cur = b;
        for l in 0..c.levels() {
            let ch = c.channels(l);
            resblock(&mut s, &format!("enc{l}.res"), cur, ch, b, rng);
            if c.has_attention(l) {
                attn_site(&mut s, &format!("enc{l}"), ch, c.d_text, rng);
            }
            cur = ch;
        }
        resblock(&mut s, "mid.res", cur, cur, b, rng);
        for l in (0..c.levels()).rev() {
            let ch = c.channels(l);
            resblock(&mut s, &format!("dec{l}.res"), cur + ch, ch, b, rng);
            if c.has_attention(l) {
                attn_site(&mut s, &format!("dec{l}"), ch, c.d_text, rng);
            }
            if l < c.design_layers {
                let p = format!("dec{l}.design");
                s.insert_init(format!("{p}.wq"), &[c.design_dim(), ch], c.design_dim(), rng);
                s.insert_init(format!("{p}.wk"), &[ch, ch], ch, rng);
                s.insert_init(format!("{p}.wv"), &[ch, ch], ch, rng);
                s.insert_zeros(format!("{p}.wo"), &[ch, ch]);
            }
            cur = ch;
        }
        s.insert_const("out.gn.g", &[b], 1.0);
        s.insert_zeros("out.gn.b", &[b]);
        s.insert_zeros("out.conv.w", &[9 * b, c.latent_channels]);
        s.insert_zeros("out.conv.b", &[c.latent_channels]);
        s.insert_zeros("out.skip.w", &[b, c.latent_channels]);
        s.insert_zeros("out.skip.b", &[c.latent_channels]);
        s.insert_init("out.mix.w", &[c.latent_channels, c.latent_channels], c.latent_channels, rng);
        s.insert_zeros("out.mix.gain.w", &[b, c.latent_channels]);
        s.insert_zeros("out.mix.gain.b", &[c.latent_channels]);
        let mut d = Self { config, params: s };
        d.refresh_reference_branch()?;
        Ok(d)
    }

    /// Names of the encoder-path parameters mirrored by the reference branch.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _, _)| n)
            .filter(|n| {
                n.starts_with("time.")
                    || n.starts_with("conv_in.")
                    || (n.starts_with("enc") && (n.contains(".res.") || n.contains(".attn.")))
            })
            .map(str::to_string)
            .collect()
    }

    /// Copies the current encoder path into the frozen reference branch.
    pub fn refresh_reference_branch(&mut self) -> Result<()> {
        let trainable = self.config.reference_trainable;
        for name in self.encoder_param_names() {
            let t = self.params.by_name(&name)?.clone();
            self.params.insert(format!("{REF}{name}"), t, trainable);
        }
        Ok(())
    }

    /// Replaces every parameter (zero-initialized ones included) with
    /// Gaussian values of standard deviation `scale`.
    pub fn randomize(&mut self, rng: &mut Rng, scale: f64) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            let t = gaussian(rng, &shape)?.scale(scale);
            let base = if self.params.name(id).ends_with(".g") { 1.0 } else { 0.0 };
            *self.params.get_mut(id) = t.map(|v| v + base);
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        let c = &self.config;
        let want = [c.latent_channels, c.latent_size, c.latent_size];
        if z.data.shape() != want {
            return Err(shape_err!("latent {:?}, model expects {:?}", z.data.shape(), want));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &ConditioningBundle) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(t) = &cond.text {
            if let Some(&bad) = t.token_ids.iter().find(|&&i| i >= v) {
                return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
            }
        }
        if let Some(r) = &cond.reference {
            self.check_latent(r)?;
        }
        if cond.design.iter().flat_map(|d| d.ids).any(|i| i >= v) {
            return Err(Error::Index("design token outside vocabulary".into()));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`, returning `ε̂` as `[h·w × c]`.
    pub(crate) fn forward(&self, g: &mut Graph, z_t: &LatentGrid, t: usize, cond: &ConditioningBundle) -> Result<Var> {
        self.check_latent(z_t)?;
        self.check_cond(cond)?;
        if t == 0 {
            return Err(Error::Index("timestep must be ≥ 1".into()));
        }
        let mut net = Net {
            g,
            store: &self.params,
            cfg: &self.config,
        };
        net.run(z_t, t, cond)
    }

    pub fn predict_noise(&self, z_t: &LatentGrid, t: usize, cond: &ConditioningBundle) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, z_t, t, cond)?;
        let s = self.config.latent_size;
        Ok(tokens_to_chw(g.value(out), s, s))
    }

    /// `‖ε − ε̂‖²` summed over elements, with gradients of every trainable
    /// parameter.
    pub fn loss_and_grad(
        &self,
        z_t: &LatentGrid,
        t: usize,
        eps: &Tensor,
        cond: &ConditioningBundle,
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, z_t, t, cond)?;
        let target = g.input(chw_to_tokens(eps));
        let loss = g.sum_sq_diff(out, target)?;
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)))
    }

    /// Binds a conditioning bundle, giving a [`NoisePredictor`].
    pub fn conditioned<'a>(&'a self, cond: &'a ConditioningBundle) -> Conditioned<'a> {
        Conditioned { denoiser: self, cond }
    }
}

/// A denoiser with fixed conditions.
pub struct Conditioned<'a> {
    pub denoiser: &'a Denoiser,
    pub cond: &'a ConditioningBundle,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict_noise(&self, zt: &Tensor, t: usize) -> Result<Tensor> {
        let z = LatentGrid::new(zt.clone(), t);
        self.denoiser.predict_noise(&z, t, self.cond)
    }
}

fn conv(s: &mut ParamStore, p: &str, cin: usize, cout: usize, rng: &mut Rng) {
    s.insert_init(format!("{p}.w"), &[9 * cin, cout], 9 * cin, rng);
    s.insert_zeros(format!("{p}.b"), &[cout]);
}

fn norm(s: &mut ParamStore, p: &str, ch: usize) {
    s.insert_const(format!("{p}.g"), &[ch], 1.0);
    s.insert_zeros(format!("{p}.b"), &[ch]);
}

fn resblock(s: &mut ParamStore, p: &str, cin: usize, cout: usize, temb: usize, rng: &mut Rng) {
    norm(s, &format!("{p}.gn1"), cin);
    conv(s, &format!("{p}.conv1"), cin, cout, rng);
    s.insert_init(format!("{p}.temb.w"), &[temb, cout], temb, rng);
    s.insert_zeros(format!("{p}.temb.b"), &[cout]);
    norm(s, &format!("{p}.gn2"), cout);
    conv(s, &format!("{p}.conv2"), cout, cout, rng);
    if cin != cout {
        s.insert_init(format!("{p}.skip.w"), &[cin, cout], cin, rng);
        s.insert_zeros(format!("{p}.skip.b"), &[cout]);
    }
}

fn attn_site(s: &mut ParamStore, p: &str, ch: usize, d_text: usize, rng: &mut Rng) {
    norm(s, &format!("{p}.attn.norm"), ch);
    for w in ["wq", "wk", "wv", "wo"] {
        s.insert_init(format!("{p}.attn.{w}"), &[ch, ch], ch, rng);
    }
    norm(s, &format!("{p}.xattn.norm"), ch);
    s.insert_init(format!("{p}.xattn.wq"), &[ch, ch], ch, rng);
    s.insert_init(format!("{p}.xattn.wk"), &[d_text, ch], d_text, rng);
    s.insert_init(format!("{p}.xattn.wv"), &[d_text, ch], d_text, rng);
    s.insert_init(format!("{p}.xattn.wo"), &[ch, ch], ch, rng);
}

/// Sinusoidal embedding of an integer timestep, `[1 × dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        v[i] = (t as f64 * f).sin();
        v[half + i] = (t as f64 * f).cos();
    }
    Tensor::from_parts(vec![1, dim], v)
}

/// Sinusoidal codes for token positions `0..n`, `[n × dim]`.
pub fn position_codes(n: usize, dim: usize) -> Tensor {
    let rows: Vec<f64> = (0..n)
        .flat_map(|i| timestep_embedding(i, dim).into_data())
        .collect();
    Tensor::from_parts(vec![n, dim], rows)
}

struct Net<'g, 'p, 's> {
    g: &'g mut Graph<'p>,
    store: &'s ParamStore,
    cfg: &'s DenoiserConfig,
}

/// Per-forward text and design inputs.
struct TextInputs {
    text: Option<(Var, Var)>,
    design: Option<Var>,
}

impl Net<'_, '_, '_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.g.param(id))
    }

    fn linear(&mut self, x: Var, p: &str) -> Result<Var> {
        let w = self.p(&format!("{p}.w"))?;
        let b = self.p(&format!("{p}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    fn conv3(&mut self, x: Var, p: &str, side: usize) -> Result<Var> {
        let cols = self.g.im2col3(x, side, side)?;
        self.linear(cols, p)
    }

    fn gn(&mut self, x: Var, p: &str) -> Result<Var> {
        let gamma = self.p(&format!("{p}.g"))?;
        let beta = self.p(&format!("{p}.b"))?;
        self.g.group_norm(x, gamma, beta, self.cfg.groups)
    }

    fn time(&mut self, prefix: &str, t: usize) -> Result<Var> {
        let e = self.g.input(timestep_embedding(t, self.cfg.base_channels));
        let w1 = self.p(&format!("{prefix}time.w1"))?;
        let b1 = self.p(&format!("{prefix}time.b1"))?;
        let h = self.g.matmul(e, w1)?;
        let h = self.g.add_row(h, b1)?;
        let h = self.g.silu(h);
        let w2 = self.p(&format!("{prefix}time.w2"))?;
        let b2 = self.p(&format!("{prefix}time.b2"))?;
        let h = self.g.matmul(h, w2)?;
        let h = self.g.add_row(h, b2)?;
        Ok(self.g.silu(h))
    }

    fn resblock(&mut self, x: Var, p: &str, temb: Var, side: usize) -> Result<Var> {
        let h = self.gn(x, &format!("{p}.gn1"))?;
        let h = self.g.silu(h);
        let h = self.conv3(h, &format!("{p}.conv1"), side)?;
        let tb = self.linear(temb, &format!("{p}.temb"))?;
        let h = self.g.add_row(h, tb)?;
        let h = self.gn(h, &format!("{p}.gn2"))?;
        let h = self.g.silu(h);
        let h = self.conv3(h, &format!("{p}.conv2"), side)?;
        let skip = if self.store.id(&format!("{p}.skip.w")).is_ok() {
            self.linear(x, &format!("{p}.skip"))?
        } else {
            x
        };
        self.g.add(skip, h)
    }

    fn proj(&mut self, p: &str) -> Result<[Var; 4]> {
        Ok([
            self.p(&format!("{p}.wq"))?,
            self.p(&format!("{p}.wk"))?,
            self.p(&format!("{p}.wv"))?,
            self.p(&format!("{p}.wo"))?,
        ])
    }

    /// Self-attention (with reference rows appended to the keys and values
    /// when given), then text cross-attention. Returns the block output and
    /// the normalized self-attention input.
    fn transblock(
        &mut self,
        x: Var,
        site: &str,
        reference: Option<Var>,
        text: &TextInputs,
    ) -> Result<(Var, Var)> {
        let hn = self.gn(x, &format!("{site}.attn.norm"))?;
        let kv = match reference {
            Some(r) => self.g.concat_rows(&[hn, r])?,
            None => hn,
        };
        let w = self.proj(&format!("{site}.attn"))?;
        let a = attend(self.g, hn, kv, w, None)?;
        let mut h = self.g.add(x, a)?;
        if let Some((emb, bias)) = text.text {
            let hn2 = self.gn(h, &format!("{site}.xattn.norm"))?;
            let w = self.proj(&format!("{site}.xattn"))?;
            let a = attend(self.g, hn2, emb, w, Some(bias))?;
            h = self.g.add(h, a)?;
        }
        Ok((h, hn))
    }

    /// Reference branch: frozen encoder path on the reference latent,
    /// returning normalized attention inputs per level.
    fn reference_features(&mut self, z_ref: &LatentGrid, t: usize) -> Result<Vec<Option<Var>>> {
        let temb = self.time(REF, t)?;
        let mut side = self.cfg.latent_size;
        let x = self.g.input(z_ref.to_tokens());
        let mut h = self.conv3(x, &format!("{REF}conv_in"), side)?;
        let none = TextInputs { text: None, design: None };
        let mut feats = Vec::new();
        for l in 0..self.cfg.levels() {
            h = self.resblock(h, &format!("{REF}enc{l}.res"), temb, side)?;
            if self.cfg.has_attention(l) {
                let (out, hn) = self.transblock(h, &format!("{REF}enc{l}"), None, &none)?;
                h = out;
                feats.push(Some(hn));
            } else {
                feats.push(None);
            }
            if l + 1 < self.cfg.levels() {
                h = self.g.avg_pool2(h, side, side)?;
                side /= 2;
            }
        }
        Ok(feats)
    }

    fn text_inputs(&mut self, cond: &ConditioningBundle) -> Result<TextInputs> {
        let table = self.p("text.emb")?;
        let text = match &cond.text {
            Some(f) => {
                let mut emb = self.g.gather_rows(table, &f.token_ids)?;
                if self.cfg.text_positions {
                    let pos = self.g.input(position_codes(f.token_ids.len(), self.cfg.d_text));
                    emb = self.g.add(emb, pos)?;
                }
                let w = f.weights_or_uniform();
                let n = w.len() as f64;
                let bias: Vec<f64> = w.iter().map(|&x| (x * n).ln()).collect();
                let bias = self.g.input(Tensor::new(vec![1, bias.len()], bias)?);
                Some((emb, bias))
            }
            None => None,
        };
        let design = if cond.design.is_empty() {
            None
        } else {
            let cols: Vec<Var> = (0..3)
                .map(|j| {
                    let ids: Vec<usize> = cond.design.iter().map(|d| d.ids[j]).collect();
                    self.g.gather_rows(table, &ids)
                })
                .collect::<Result<_>>()?;
            Some(self.g.concat_cols(&cols)?)
        };
        Ok(TextInputs { text, design })
    }

    fn run(&mut self, z_t: &LatentGrid, t: usize, cond: &ConditioningBundle) -> Result<Var> {
        let cfg = self.cfg;
        let refs = match &cond.reference {
            Some(r) => self.reference_features(r, t)?,
            None => vec![None; cfg.levels()],
        };
        let text = self.text_inputs(cond)?;
        let temb = self.time("", t)?;
        let mut side = cfg.latent_size;
        let x = self.g.input(z_t.to_tokens());
        let mut h = self.conv3(x, "conv_in", side)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            h = self.resblock(h, &format!("enc{l}.res"), temb, side)?;
            if cfg.has_attention(l) {
                h = self.transblock(h, &format!("enc{l}"), refs[l], &text)?.0;
            }
            skips.push(h);
            if l + 1 < cfg.levels() {
                h = self.g.avg_pool2(h, side, side)?;
                side /= 2;
            }
        }
        h = self.resblock(h, "mid.res", temb, side)?;
        for l in (0..cfg.levels()).rev() {
            h = self.g.concat_cols(&[h, skips[l]])?;
            h = self.resblock(h, &format!("dec{l}.res"), temb, side)?;
            if cfg.has_attention(l) {
                h = self.transblock(h, &format!("dec{l}"), refs[l], &text)?.0;
            }
            if l < cfg.design_layers {
                if let Some(c) = text.design {
                    let w = self.proj(&format!("dec{l}.design"))?;
                    h = design_fuse(self.g, h, c, w)?;
                }
            }
            if l > 0 {
                h = self.g.upsample2(h, side, side)?;
                side *= 2;
            }
        }
        let h = self.gn(h, "out.gn")?;
        let h = self.g.silu(h);
        let out = self.conv3(h, "out.conv", side)?;
        // Per-channel and channel-mixing skips from the input, gated by time.
        let gain = self.linear(temb, "out.skip")?;
        let ones = self.g.input(Tensor::full(&[side * side, 1], 1.0));
        let gain = self.g.matmul(ones, gain)?;
        let skip = self.g.mul(x, gain)?;
        let mix = self.p("out.mix.w")?;
        let mixed = self.g.matmul(x, mix)?;
        let mix_gain = self.linear(temb, "out.mix.gain")?;
        let mix_gain = self.g.matmul(ones, mix_gain)?;
        let mixed = self.g.mul(mixed, mix_gain)?;
        let out = self.g.add(out, skip)?;
        self.g.add(out, mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{embedding_table, LexiconEntry};

    fn toy_vocab() -> Vocabulary {
        let words = ["sofa", "table", "width", "height", "2", "3", "4", "a", "bedroom", "with", "and"];
        let mut entries = vec![LexiconEntry {
            token: crate::prompt::UNK.into(),
            design_term: false,
        }];
        entries.extend(words.iter().map(|w| LexiconEntry {
            token: w.to_string(),
            design_term: !matches!(*w, "a" | "with" | "and"),
        }));
        Vocabulary::from_entries(entries).unwrap()
    }

    fn toy_encoder(d: usize) -> PromptEncoder {
        let vocab = toy_vocab();
        let table = embedding_table(vocab.len(), d, 5).unwrap();
        let scorer = crate::prompt::PatchScorer::new(d, 3, &mut Rng::new(6));
        PromptEncoder { vocab, table, scorer }
    }

    fn tiny() -> (Denoiser, PromptEncoder) {
        let enc = toy_encoder(4);
        let cfg = DenoiserConfig::tiny(enc.vocab.len());
        (Denoiser::init(cfg, &enc.table, &mut Rng::new(1)).unwrap(), enc)
    }

    fn latent(cfg: &DenoiserConfig, seed: u64, t: usize) -> LatentGrid {
        let s = cfg.latent_size;
        LatentGrid::new(gaussian(&mut Rng::new(seed), &[cfg.latent_channels, s, s]).unwrap(), t)
    }

    fn rand_proj(rng: &mut Rng, dq: usize, dkv: usize, dk: usize) -> AttentionProj {
        AttentionProj {
            wq: gaussian(rng, &[dq, dk]).unwrap(),
            wk: gaussian(rng, &[dkv, dk]).unwrap(),
            wv: gaussian(rng, &[dkv, dk]).unwrap(),
            wo: gaussian(rng, &[dk, dk]).unwrap(),
        }
    }

    fn stack(a: &Tensor, b: &Tensor) -> Tensor {
        let mut rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
        rows.extend((0..b.rows()).map(|i| b.row(i).to_vec()));
        Tensor::from_rows(&rows).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn presets_validate_and_tiny_is_small() {
        let (d, _) = tiny();
        assert!(d.params.trainable_count() <= 5000, "{}", d.params.trainable_count());
        DenoiserConfig::desk(300).validate().unwrap();
        let mut bad = DenoiserConfig::desk(300);
        bad.groups = 7;
        assert!(bad.validate().is_err());
        assert!(DenoiserConfig::preset("huge", 3).is_err());
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let mut rng = Rng::new(2);
        let p = rand_proj(&mut rng, 3, 3, 3);
        let q = gaussian(&mut rng, &[4, 3]).unwrap();
        let kv = gaussian(&mut rng, &[1, 3]).unwrap();
        let out = attention(&q, &kv, &p, None).unwrap();
        let expect = kv.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((out.get2(i, j) - expect.get2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplication_and_uniform_bias_invariance() {
        let mut rng = Rng::new(3);
        let p = rand_proj(&mut rng, 5, 5, 5);
        let q = gaussian(&mut rng, &[6, 5]).unwrap();
        let kv = gaussian(&mut rng, &[7, 5]).unwrap();
        let bias: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let base = attention(&q, &kv, &p, Some(&bias)).unwrap();
        let doubled: Vec<f64> = bias.iter().chain(&bias).copied().collect();
        let dup = attention(&q, &stack(&kv, &kv), &p, Some(&doubled)).unwrap();
        assert!(max_diff(&base, &dup) < 1e-12);
        let plain = attention(&q, &kv, &p, None).unwrap();
        let shifted = attention(&q, &kv, &p, Some(&[0.7; 7])).unwrap();
        assert!(max_diff(&plain, &shifted) < 1e-12);
        assert!(attention(&q, &kv, &p, Some(&[0.0; 3])).is_err());
        let wrong = rand_proj(&mut rng, 4, 5, 5);
        assert!(matches!(attention(&q, &kv, &wrong, None), Err(Error::Shape(_))));
    }

    #[test]
    fn appearance_attention_degenerate_cases() {
        let mut rng = Rng::new(4);
        let p = rand_proj(&mut rng, 4, 4, 4);
        let h = gaussian(&mut rng, &[5, 4]).unwrap();
        let own = appearance_context_attention(&h, Some(&h), &p).unwrap();
        let selfatt = attention(&h, &h, &p, None).unwrap();
        assert!(max_diff(&own, &selfatt) < 1e-12);
        let none = appearance_context_attention(&h, None, &p).unwrap();
        assert_eq!(none, selfatt);
        let narrow = gaussian(&mut rng, &[5, 3]).unwrap();
        assert!(matches!(
            appearance_context_attention(&h, Some(&narrow), &p),
            Err(Error::Shape(_))
        ));
    }

    /// Output rows lie in the convex hull of the value rows: with distinct
    /// one-hot values and identity projections each output row is a
    /// probability vector over the concatenated positions.
    #[test]
    fn appearance_attention_is_convex_combination() {
        let eye = Tensor::identity(6);
        let p = AttentionProj {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        };
        let onehot = |i: usize| -> Vec<f64> { (0..6).map(|j| f64::from(u8::from(i == j))).collect() };
        let h = Tensor::from_rows(&[onehot(0), onehot(1), onehot(2)]).unwrap();
        let r = Tensor::from_rows(&[onehot(3), onehot(4), onehot(5)]).unwrap();
        let out = appearance_context_attention(&h, Some(&r), &p).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        for i in 0..3 {
            let row = out.row(i);
            assert!(row.iter().all(|&x| x > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let ref_mass: f64 = row[3..].iter().sum();
            assert!(ref_mass > 0.0);
        }
    }

    #[test]
    fn design_block_identities() {
        let mut rng = Rng::new(5);
        let mut p = rand_proj(&mut rng, 6, 4, 4);
        let h = gaussian(&mut rng, &[4, 4]).unwrap();
        let c = gaussian(&mut rng, &[2, 6]).unwrap();
        assert_eq!(design_control_block(&h, None, &p).unwrap(), h);
        p.wo = Tensor::zeros(&[4, 4]);
        assert_eq!(design_control_block(&h, Some(&c), &p).unwrap(), h);
    }

    #[test]
    fn design_block_hand_computed() {
        // Two-position spatial map with 2 channels, one design token.
        let eye = Tensor::identity(2);
        let p = AttentionProj {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        };
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = design_control_block(&h, Some(&c), &p).unwrap();
        // logits = [1, 2] / √2
        let (l0, l1) = (1.0 / 2f64.sqrt(), 2.0 / 2f64.sqrt());
        let (e0, e1) = (l0.exp(), l1.exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let att = [a0 * 1.0, a1 * 2.0];
        let expect = [[1.0 + att[0], att[1]], [att[0], 2.0 + att[1]]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get2(i, j) - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn design_block_is_permutation_invariant_in_tokens() {
        let mut rng = Rng::new(6);
        let p = rand_proj(&mut rng, 6, 4, 4);
        let h = gaussian(&mut rng, &[4, 4]).unwrap();
        let c = gaussian(&mut rng, &[3, 6]).unwrap();
        let rows: Vec<Vec<f64>> = [2, 0, 1].iter().map(|&i| c.row(i).to_vec()).collect();
        let a = design_control_block(&h, Some(&c), &p).unwrap();
        let b = design_control_block(&h, Some(&Tensor::from_rows(&rows).unwrap()), &p).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn fresh_model_predicts_zero_and_ignores_design() {
        let (d, enc) = tiny();
        let z = latent(&d.config, 1, 3);
        let cond = ConditioningBundle::from_prompt(&enc, "a bedroom with a sofa width 4 height 2").unwrap();
        assert_eq!(cond.design.len(), 1);
        let eps = d.predict_noise(&z, 3, &cond).unwrap();
        assert_eq!(eps.shape(), z.data.shape());
        assert!(eps.data().iter().all(|&v| v == 0.0));

        // Randomize everything except the design output projections: the
        // prediction is then nonzero yet still blind to design tokens.
        let mut r = d.clone();
        r.randomize(&mut Rng::new(9), 0.3).unwrap();
        for l in 0..r.config.design_layers {
            let id = r.params.id(&format!("dec{l}.design.wo")).unwrap();
            *r.params.get_mut(id) = Tensor::zeros(r.params.get(id).shape());
        }
        let with = r.predict_noise(&z, 3, &cond).unwrap();
        let without = r.predict_noise(&z, 3, &cond.clone().without_design()).unwrap();
        assert!(with.max_abs() > 0.0);
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn control_paths_are_live_when_randomized() {
        let (mut d, enc) = tiny();
        d.randomize(&mut Rng::new(10), 0.3).unwrap();
        let z = latent(&d.config, 2, 5);
        let a = ConditioningBundle::from_prompt(&enc, "a sofa width 4 height 2").unwrap();
        let b = ConditioningBundle::from_prompt(&enc, "a sofa width 2 height 2").unwrap();
        let ea = d.predict_noise(&z, 5, &a).unwrap();
        let eb = d.predict_noise(&z, 5, &b).unwrap();
        assert!(ea.sub(&eb).unwrap().norm() > 0.0);
        let with_ref = a.clone().with_reference(Some(latent(&d.config, 3, 5)));
        let er = d.predict_noise(&z, 5, &with_ref).unwrap();
        assert!(ea.sub(&er).unwrap().norm() > 0.0);
    }

    #[test]
    fn reference_branch_is_frozen_copy() {
        let (d, _) = tiny();
        let names = d.encoder_param_names();
        assert!(names.iter().any(|n| n == "conv_in.w"));
        assert!(!names.iter().any(|n| n.contains("xattn") || n.starts_with("dec")));
        for n in names {
            let id = d.params.id(&format!("{REF}{n}")).unwrap();
            assert!(!d.params.is_trainable(id));
            assert_eq!(d.params.get(id), d.params.by_name(&n).unwrap());
        }
    }

    #[test]
    fn uniform_prompt_weights_match_no_weights() {
        let (mut d, enc) = tiny();
        d.randomize(&mut Rng::new(11), 0.3).unwrap();
        let z = latent(&d.config, 4, 2);
        let mut cond = ConditioningBundle::from_prompt(&enc, "a sofa and a table").unwrap();
        let n = cond.text.as_ref().unwrap().len();
        cond.text.as_mut().unwrap().weights = Some(vec![1.0 / n as f64; n]);
        let a = d.predict_noise(&z, 2, &cond).unwrap();
        cond.text.as_mut().unwrap().weights = None;
        let b = d.predict_noise(&z, 2, &cond).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (d, enc) = tiny();
        let cond = ConditioningBundle::null(&enc);
        let wrong = LatentGrid::new(Tensor::zeros(&[3, 4, 4]), 1);
        assert!(matches!(d.predict_noise(&wrong, 1, &cond), Err(Error::Shape(_))));
        assert!(ConditioningBundle::new(None, None, vec![]).is_err());
        let z = latent(&d.config, 1, 1);
        assert!(d.predict_noise(&z, 0, &cond).is_err());
    }
}
