//! Prompt tokenization, the fixed embedding table, and the keyword scorer
//! that up-weights interior-design terms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::designhelper::{FurnitureKind, SpaceType, Style};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::{gaussian, Rng, Tensor};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

const FILLER: &[&str] = &[
    "a", "an", "the", "with", "and", "in", "of", "for", "featuring", "including", "plus", "has",
    "have", "is", "are", "this", "that", "some", "very", "its", "on", "at", "by", "to", "near",
    "next", "beside", "there", "it", "which", "where", "while", "also", "as", "one", "two",
    "three", "each", "both", "from", "into", "over", "under", "along", "against", "around",
    "between", "here", "please", "show", "me", "make", "create", "design", "image", "picture",
    "view", "top", "down", "plan", "nice", "really", "quite", "just", "like", "we", "want",
    "our", "my", "your", "i", "would", "should", "be", "can", "could", "all", "any", "more",
    "most", "much", "many", "few", "other", "another", "such", "than", "then", "so", "but",
    "or", "not", "no", "yes", "if", "when", "what", "how", "who", "whose",
];

const DESIGN_EXTRA: &[&str] = &[
    "room", "hall", "lobby", "width", "height", "layout", "furniture", "floor", "wall", "walls",
    "ceiling", "window", "door", "lamp", "rug", "curtain", "painting", "mirror", "lighting",
    "pendant", "chandelier", "wood", "wooden", "marble", "glass", "fabric", "leather", "metal",
    "concrete", "stone", "velvet", "linen", "brick", "tile", "parquet", "carpet", "cushion",
    "pillow", "vase", "artwork", "shelf", "stool", "bench", "ottoman", "sideboard", "island",
    "fireplace", "palette", "color", "colour", "scheme", "decor", "decoration", "texture",
    "accent", "neutral", "warm", "cool", "bright", "dark", "light", "cozy", "spacious",
    "compact", "open", "elegant", "natural", "sleek", "matte", "glossy", "green", "blue", "red",
    "yellow", "orange", "pink", "purple",
];

const COLORS: &[&str] = &[
    "white", "gray", "black", "ivory", "silver", "charcoal", "birch", "slate", "navy", "rust",
    "graphite", "cream", "sepia", "brown", "oak", "moss", "walnut", "tatami", "ash", "ink",
    "sand", "terracotta", "cobalt", "gold", "onyx", "beige", "taupe", "espresso", "pearl",
    "burgundy", "mahogany", "chrome", "cyan", "midnight", "bamboo", "sage", "forest", "teal",
    "plum", "wheat", "olive", "pine",
];

/// Largest dimension numeral in the vocabulary.
pub const MAX_NUMERAL: usize = 16;

/// Lowercases and splits on anything that is not a letter, digit or hyphen.
/// Hyphens are kept inside words (`eco-friendly`) but stripped at the edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub token: String,
    pub design_term: bool,
}

/// Token table with a ground-truth design-term flag per entry. Id 0 is the
/// unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<LexiconEntry>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<LexiconEntry>) -> Result<Self> {
        if entries.first().map(|e| e.token.as_str()) != Some(UNK) {
            return Err(Error::Input(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {:?}", e.token)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Builds a vocabulary from word lists; duplicates keep the first flag.
    pub fn from_words<'a>(design: impl IntoIterator<Item = &'a str>, filler: &[&str]) -> Self {
        let mut entries = vec![LexiconEntry {
            token: UNK.into(),
            design_term: false,
        }];
        let mut seen: std::collections::HashSet<String> = [UNK.to_string()].into();
        let tagged = design
            .into_iter()
            .map(|w| (w, true))
            .chain(filler.iter().map(|w| (*w, false)));
        for (w, flag) in tagged {
            for tok in tokenize(w) {
                if seen.insert(tok.clone()) {
                    entries.push(LexiconEntry {
                        token: tok,
                        design_term: flag,
                    });
                }
            }
        }
        Self::from_entries(entries).expect("constructed vocabulary is valid")
    }

    /// Space types, styles, furniture nouns, numerals, colours, decor words
    /// and filler.
    pub fn builtin() -> Self {
        let numerals: Vec<String> = (1..=MAX_NUMERAL).map(|n| n.to_string()).collect();
        let design = SpaceType::ALL
            .iter()
            .map(|s| s.name())
            .chain(Style::ALL.iter().map(|s| s.name()))
            .chain(FurnitureKind::ALL.iter().map(|k| k.name()))
            .chain(numerals.iter().map(String::as_str))
            .chain(COLORS.iter().copied())
            .chain(DESIGN_EXTRA.iter().copied())
            .collect::<Vec<_>>();
        Self::from_words(design, FILLER)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.entries[id].token
    }

    pub fn is_design_term(&self, id: usize) -> bool {
        self.entries[id].design_term
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(s)?)
    }

    /// Per-token design flags for `text`, as used to train the scorer.
    pub fn design_flags(&self, text: &str) -> Vec<bool> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).is_some_and(|i| self.is_design_term(i)))
            .collect()
    }
}

/// Fixed seeded embedding table `[|V| × d]` with unit-variance entries.
pub fn embedding_table(vocab_size: usize, dim: usize, seed: u64) -> Result<Tensor> {
    gaussian(&mut Rng::new(seed), &[vocab_size, dim])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptFeatures {
    pub token_ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub embeddings: Tensor,
    /// Normalized keyword weights, set by [`weight_prompt`].
    pub weights: Option<Vec<f64>>,
}

impl PromptFeatures {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Weights, or uniform weights when none were computed.
    pub fn weights_or_uniform(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.len() as f64; self.len()])
    }
}

pub fn tokenize_and_embed(text: &str, vocab: &Vocabulary, table: &Tensor) -> Result<PromptFeatures> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Input("prompt has no tokens".into()));
    }
    embed_tokens(tokens, vocab, table)
}

fn embed_tokens(tokens: Vec<String>, vocab: &Vocabulary, table: &Tensor) -> Result<PromptFeatures> {
    let (v, d) = table.expect_rank2()?;
    if v != vocab.len() {
        return Err(shape_err!("embedding table has {v} rows for {} tokens", vocab.len()));
    }
    let token_ids: Vec<usize> = tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
    let mut data = Vec::with_capacity(token_ids.len() * d);
    for &id in &token_ids {
        data.extend_from_slice(table.row(id));
    }
    Ok(PromptFeatures {
        embeddings: Tensor::new(vec![token_ids.len(), d], data)?,
        token_ids,
        tokens,
        weights: None,
    })
}

/// Two-layer MLP mapping a token embedding to a design-term logit.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScorer {
    pub params: ParamStore,
}

impl PatchScorer {
    pub fn new(d_text: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        params.insert_init("w1", &[d_text, hidden], d_text, rng);
        params.insert_zeros("b1", &[hidden]);
        params.insert_init("w2", &[hidden, 1], hidden, rng);
        params.insert_zeros("b2", &[1]);
        Self { params }
    }

    pub fn d_text(&self) -> usize {
        self.params.by_name("w1").expect("w1").shape()[0]
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = |n: &str| self.params.id(n);
        let (w1, b1, w2, b2) = (g.param(p("w1")?), g.param(p("b1")?), g.param(p("w2")?), g.param(p("b2")?));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h);
        let z = g.matmul(h, w2)?;
        g.add_row(z, b2)
    }

    /// Sigmoid scores in (0, 1), one per embedding row.
    pub fn scores(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let (_, d) = embeddings.expect_rank2()?;
        if d != self.d_text() {
            return Err(shape_err!("scorer expects dim {}, got {d}", self.d_text()));
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(embeddings.clone());
        let z = self.logits(&mut g, x)?;
        Ok(g.value(z).data().iter().map(|&z| crate::graph::sigmoid(z)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, t, _)| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScorerTraining {
    pub scorer: PatchScorer,
    /// Full-corpus logistic loss after training.
    pub final_loss: f64,
    pub accuracy: f64,
    /// True when every label in the corpus had the same value.
    pub degenerate: bool,
}

/// Trains the scorer with minibatch Adam on per-token logistic loss.
pub fn train_patch_scorer(
    corpus: &[(String, Vec<bool>)],
    vocab: &Vocabulary,
    table: &Tensor,
    scorer: &PatchScorer,
    cfg: &ScorerTrainConfig,
) -> Result<ScorerTraining> {
    if corpus.is_empty() {
        return Err(Error::Input("scorer corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("scorer batch size must be positive".into()));
    }
    let mut rows: Vec<usize> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (text, flags) in corpus {
        let toks = tokenize(text);
        if toks.len() != flags.len() {
            return Err(Error::Input(format!(
                "{} flags for {} tokens in {text:?}",
                flags.len(),
                toks.len()
            )));
        }
        rows.extend(toks.iter().map(|t| vocab.id_or_unk(t)));
        labels.extend(flags.iter().map(|&f| f64::from(u8::from(f))));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let degenerate = positives == 0 || positives == labels.len();
    if degenerate {
        log::warn!("scorer corpus has a single class; training proceeds anyway");
    }

    let mut scorer = scorer.clone();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    adam.validate()?;
    let mut state = AdamState::new(&scorer.params);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&i| rows[i]).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new(&scorer.params);
                let t = g.input(table.clone());
                let x = g.gather_rows(t, &ids)?;
                let z = scorer.logits(&mut g, x)?;
                let loss = g.bce_with_logits(z, &ys)?;
                g.backward(loss)
            };
            adam_step(&mut scorer.params, &grads, &mut state, &adam)?;
        }
    }

    let emb = gather(table, &rows)?;
    let scores = scorer.scores(&emb)?;
    let n = labels.len() as f64;
    let final_loss = scores
        .iter()
        .zip(&labels)
        .map(|(&s, &y)| -(y * s.max(1e-300).ln() + (1.0 - y) * (1.0 - s).max(1e-300).ln()))
        .sum::<f64>()
        / n;
    let accuracy = scores
        .iter()
        .zip(&labels)
        .filter(|(&s, &y)| (s > 0.5) == (y > 0.5))
        .count() as f64
        / n;
    Ok(ScorerTraining {
        scorer,
        final_loss,
        accuracy,
        degenerate,
    })
}

fn gather(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (_, d) = table.expect_rank2()?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Attaches normalized scorer weights to `features`.
pub fn weight_prompt(mut features: PromptFeatures, scorer: &PatchScorer) -> Result<PromptFeatures> {
    let s = scorer.scores(&features.embeddings)?;
    let total: f64 = s.iter().sum();
    features.weights = Some(s.iter().map(|v| v / total).collect());
    Ok(features)
}

/// Vocabulary, embedding table and trained scorer bundled together.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub vocab: Vocabulary,
    pub table: Tensor,
    pub scorer: PatchScorer,
}

impl PromptEncoder {
    pub fn encode(&self, text: &str) -> Result<PromptFeatures> {
        weight_prompt(tokenize_and_embed(text, &self.vocab, &self.table)?, &self.scorer)
    }

    /// Encodes an already tokenized prompt (may be any nonempty list).
    pub fn encode_tokens(&self, tokens: Vec<String>) -> Result<PromptFeatures> {
        if tokens.is_empty() {
            return Err(Error::Input("prompt has no tokens".into()));
        }
        weight_prompt(embed_tokens(tokens, &self.vocab, &self.table)?, &self.scorer)
    }

    /// Builds the table and trains the scorer on `prompts`, labelling each
    /// token with its lexicon flag.
    pub fn train(
        vocab: Vocabulary,
        d_text: usize,
        hidden: usize,
        seed: u64,
        prompts: &[String],
        cfg: &ScorerTrainConfig,
    ) -> Result<(Self, ScorerTraining)> {
        let root = Rng::new(seed);
        let table = embedding_table(vocab.len(), d_text, root.split(0).next_u64())?;
        let scorer = PatchScorer::new(d_text, hidden, &mut root.split(1));
        let corpus: Vec<(String, Vec<bool>)> =
            prompts.iter().map(|p| (p.clone(), vocab.design_flags(p))).collect();
        let trained = train_patch_scorer(&corpus, &vocab, &table, &scorer, cfg)?;
        let enc = Self {
            vocab,
            table,
            scorer: trained.scorer.clone(),
        };
        Ok((enc, trained))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    #[test]
    fn builtin_vocabulary_size_and_flags() {
        let v = Vocabulary::builtin();
        assert!((200..=320).contains(&v.len()), "{}", v.len());
        assert_eq!(v.token(UNK_ID), UNK);
        assert!(v.is_design_term(v.id("sofa").unwrap()));
        assert!(v.is_design_term(v.id("eco-friendly").unwrap()));
        assert!(!v.is_design_term(v.id("with").unwrap()));
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn vocabulary_rejects_bad_tables() {
        let e = |t: &str| LexiconEntry {
            token: t.into(),
            design_term: false,
        };
        assert!(Vocabulary::from_entries(vec![e("a")]).is_err());
        assert!(Vocabulary::from_entries(vec![e(UNK), e("a"), e("a")]).is_err());
    }

    #[test]
    fn tokenization_normalizes_case_and_punctuation() {
        let v = Vocabulary::builtin();
        let table = embedding_table(v.len(), 8, 1).unwrap();
        let f = tokenize_and_embed("Sofa, sofa!", &v, &table).unwrap();
        assert_eq!(f.token_ids.len(), 2);
        assert_eq!(f.token_ids[0], f.token_ids[1]);
        assert!(f.weights.is_none());
        let f = tokenize_and_embed("zebra sofa", &v, &table).unwrap();
        assert_eq!(f.token_ids[0], UNK_ID);
        for (i, &id) in f.token_ids.iter().enumerate() {
            assert_eq!(f.embeddings.row(i), table.row(id));
        }
        assert!(matches!(tokenize_and_embed(" ,! ", &v, &table), Err(Error::Input(_))));
    }

    /// Tokens whose embeddings sit on either side of a fixed direction.
    fn toy_lexicon(n: usize, d: usize, seed: u64) -> (Vocabulary, Tensor) {
        let mut rng = Rng::new(seed);
        let mut entries = vec![LexiconEntry {
            token: UNK.into(),
            design_term: false,
        }];
        let mut data = gaussian(&mut rng, &[1, d]).unwrap().into_data();
        for i in 0..n {
            let design = i % 2 == 0;
            entries.push(LexiconEntry {
                token: format!("w{i}"),
                design_term: design,
            });
            let mut row = gaussian(&mut rng, &[d]).unwrap().into_data();
            row[0] += if design { 3.0 } else { -3.0 };
            data.extend(row);
        }
        let vocab = Vocabulary::from_entries(entries).unwrap();
        (vocab, Tensor::new(vec![n + 1, d], data).unwrap())
    }

    fn toy_corpus(vocab: &Vocabulary, ids: &[usize], n: usize, rng: &mut Rng) -> Vec<(String, Vec<bool>)> {
        (0..n)
            .map(|_| {
                let len = rng.range_inclusive(3, 8);
                let toks: Vec<usize> = (0..len).map(|_| ids[rng.index(ids.len())]).collect();
                let text = toks.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" ");
                (text, toks.iter().map(|&i| vocab.is_design_term(i)).collect())
            })
            .collect()
    }

    fn trained_toy() -> (Vocabulary, Tensor, ScorerTraining, Vec<usize>) {
        let (vocab, table) = toy_lexicon(60, 8, 11);
        let train_ids: Vec<usize> = (1..=40).collect();
        let held_out: Vec<usize> = (41..=60).collect();
        let corpus = toy_corpus(&vocab, &train_ids, 100, &mut Rng::new(2));
        let scorer = PatchScorer::new(8, 16, &mut Rng::new(3));
        let cfg = ScorerTrainConfig {
            epochs: 200,
            lr: 1e-2,
            batch_size: 64,
            seed: 4,
        };
        let t = train_patch_scorer(&corpus, &vocab, &table, &scorer, &cfg).unwrap();
        (vocab, table, t, held_out)
    }

    #[test]
    fn separable_lexicon_is_learned_and_generalizes() {
        let (vocab, table, t, held_out) = trained_toy();
        assert!(t.accuracy >= 0.95, "train accuracy {}", t.accuracy);
        assert!(!t.degenerate);
        let scores = t.scorer.scores(&gather(&table, &held_out).unwrap()).unwrap();
        let correct = held_out
            .iter()
            .zip(&scores)
            .filter(|(&i, &s)| (s > 0.5) == vocab.is_design_term(i))
            .count();
        assert!(correct as f64 / held_out.len() as f64 >= 0.95);
    }

    #[test]
    fn trained_scorer_upweights_design_terms() {
        let (vocab, table, t, _) = trained_toy();
        let ids: Vec<usize> = (1..=60).collect();
        let prompts = toy_corpus(&vocab, &ids, 100, &mut Rng::new(8));
        let (mut dsum, mut dn, mut osum, mut on) = (0.0, 0, 0.0, 0);
        for (text, flags) in &prompts {
            let f = weight_prompt(tokenize_and_embed(text, &vocab, &table).unwrap(), &t.scorer).unwrap();
            for (w, &flag) in f.weights.unwrap().iter().zip(flags) {
                if flag {
                    dsum += w;
                    dn += 1;
                } else {
                    osum += w;
                    on += 1;
                }
            }
        }
        let ratio = (dsum / dn as f64) / (osum / on as f64);
        assert!(ratio >= 1.5, "design/other weight ratio {ratio}");
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (vocab, table) = toy_lexicon(10, 4, 1);
        let corpus = toy_corpus(&vocab, &(1..=10).collect::<Vec<_>>(), 10, &mut Rng::new(1));
        let scorer = PatchScorer::new(4, 5, &mut Rng::new(1));
        let zero = ScorerTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let t = train_patch_scorer(&corpus, &vocab, &table, &scorer, &zero).unwrap();
        assert_eq!(t.scorer, scorer);
        let cfg = ScorerTrainConfig {
            epochs: 5,
            batch_size: 7,
            ..Default::default()
        };
        let a = train_patch_scorer(&corpus, &vocab, &table, &scorer, &cfg).unwrap();
        let b = train_patch_scorer(&corpus, &vocab, &table, &scorer, &cfg).unwrap();
        assert_eq!(a.scorer, b.scorer);
        assert_ne!(a.scorer, scorer);
    }

    #[test]
    fn corpus_errors_and_degenerate_warning() {
        let (vocab, table) = toy_lexicon(4, 4, 1);
        let scorer = PatchScorer::new(4, 3, &mut Rng::new(1));
        let cfg = ScorerTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(train_patch_scorer(&[], &vocab, &table, &scorer, &cfg).is_err());
        let bad = vec![("w0 w1".to_string(), vec![true])];
        assert!(matches!(
            train_patch_scorer(&bad, &vocab, &table, &scorer, &cfg),
            Err(Error::Input(_))
        ));
        let one_class = vec![("w0 w2".to_string(), vec![true, true])];
        let t = train_patch_scorer(&one_class, &vocab, &table, &scorer, &cfg).unwrap();
        assert!(t.degenerate);
    }

    #[test]
    fn single_token_gets_full_weight() {
        let v = Vocabulary::builtin();
        let table = embedding_table(v.len(), 8, 1).unwrap();
        let scorer = PatchScorer::new(8, 4, &mut Rng::new(0));
        let f = weight_prompt(tokenize_and_embed("sofa", &v, &table).unwrap(), &scorer).unwrap();
        assert_eq!(f.weights.unwrap(), vec![1.0]);
    }

    proptest! {
        #[test]
        fn weights_normalize_and_permute(seed in 0u64..1000, perm_seed in 0u64..1000, n in 1usize..12) {
            let mut rng = Rng::new(seed);
            let emb = gaussian(&mut rng, &[n, 6]).unwrap();
            let scorer = PatchScorer::new(6, 5, &mut rng);
            let feats = |e: Tensor| PromptFeatures {
                token_ids: vec![0; n],
                tokens: vec![String::new(); n],
                embeddings: e,
                weights: None,
            };
            let w = weight_prompt(feats(emb.clone()), &scorer).unwrap().weights.unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));

            let mut perm: Vec<usize> = (0..n).collect();
            Rng::new(perm_seed).shuffle(&mut perm);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| emb.row(i).to_vec()).collect();
            let wp = weight_prompt(feats(Tensor::from_rows(&rows).unwrap()), &scorer).unwrap().weights.unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((wp[k] - w[i]).abs() < 1e-12);
            }
            let again = weight_prompt(feats(emb), &scorer).unwrap().weights.unwrap();
            prop_assert_eq!(again, w);
        }
    }
}
