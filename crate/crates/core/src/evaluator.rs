//! Desk-scale metric suite: Fréchet distance over classifier features, an
//! inception-style score, paired embedding similarity and retrieval recall.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Image;
use crate::designhelper::SpaceType;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::prompt::{tokenize, Vocabulary};
use crate::tensor::{Rng, Tensor};

/// Feature width shared by the classifier and the dual encoder.
pub const FEATURE_DIM: usize = 32;
/// Contrastive softmax temperature.
pub const TEMPERATURE: f64 = 0.07;
/// Held-out accuracy below which classifier-based metrics are flagged.
pub const RELIABLE_ACCURACY: f64 = 0.9;
const PSD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Tensor,
    pub covariance: Tensor,
}

impl FeatureStats {
    pub fn new(mean: Tensor, covariance: Tensor) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != [d, d] {
            return Err(Error::Shape(format!(
                "evaluator: covariance {:?} does not match mean of length {d}",
                covariance.shape()
            )));
        }
        let s = Self { mean, covariance };
        s.check_psd()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance of feature rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Input("evaluator: need at least two feature rows".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("evaluator: ragged feature rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(Tensor::vector(mean), Tensor::new(vec![d, d], cov)?)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, self.covariance.data())
    }

    fn check_psd(&self) -> Result<()> {
        let m = self.matrix();
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > PSD_TOL * scale {
            return Err(Error::Domain("evaluator: covariance is not symmetric".into()));
        }
        let min = SymmetricEigen::new(m).eigenvalues.min();
        if min < -PSD_TOL * scale {
            return Err(Error::Domain(format!(
                "evaluator: covariance is not PSD (eigenvalue {min:e})"
            )));
        }
        Ok(())
    }
}

/// Principal square root of a symmetric PSD matrix; tiny negative
/// eigenvalues from rounding are treated as zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "evaluator: feature dims differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    a.check_psd()?;
    b.check_psd()?;
    let mean_term: f64 = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let root_a = psd_sqrt(sa.clone());
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(inner).trace();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` over rows of class probabilities.
pub fn inception_proxy(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Input("evaluator: no class probabilities".into()));
    }
    if probs.len() == 1 {
        log::warn!("inception proxy on a single image is degenerate; returning 1.0");
        return Ok(1.0);
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("evaluator: ragged probability rows".into()));
    }
    let n = probs.len() as f64;
    let mut marginal = vec![0.0; k];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let kl = |p: &Vec<f64>| -> f64 {
        p.iter()
            .zip(&marginal)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &mi)| pi * (pi / mi).ln())
            .sum()
    };
    let mean_kl = probs.iter().map(kl).sum::<f64>() / n;
    Ok(mean_kl.max(0.0).exp())
}

/// Mean cosine similarity of row-aligned embedding pairs.
pub fn paired_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "evaluator: {} image embeddings vs {} text embeddings",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Recall@k in percent for both retrieval directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

impl RetrievalTable {
    /// Aligned text table, one row per model.
    pub fn format(rows: &[(String, RetrievalTable)]) -> String {
        let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(5);
        let ks = rows.first().map(|(_, t)| t.ks.clone()).unwrap_or_default();
        let cell = 7;
        let group = ks.len() * (cell + 1) - 1;
        let mut out = format!(
            "{:<name_w$} | {:^group$} | {:^group$}\n",
            "Model", "Image → Text", "Text → Image"
        );
        let heads: Vec<String> = ks.iter().map(|k| format!("{:>cell$}", format!("R@{k}"))).collect();
        out += &format!("{:<name_w$} | {} | {}\n", "", heads.join(" "), heads.join(" "));
        out += &format!("{}-+-{}-+-{}\n", "-".repeat(name_w), "-".repeat(group), "-".repeat(group));
        for (name, t) in rows {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:>cell$.2}")).collect::<Vec<_>>().join(" ");
            out += &format!(
                "{name:<name_w$} | {} | {}\n",
                fmt(&t.image_to_text),
                fmt(&t.text_to_image)
            );
        }
        out
    }
}

/// Ranks every candidate by cosine similarity to each query, breaking ties
/// toward the lower index, and reports how often the aligned candidate lands
/// in the top `k`.
pub fn retrieval_recall(images: &[Vec<f64>], texts: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalTable> {
    let n = images.len();
    if texts.len() != n {
        return Err(Error::Input(format!(
            "evaluator: {n} image embeddings vs {} text embeddings",
            texts.len()
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if ks.is_empty() || ks.contains(&0) || n <= max_k {
        return Err(Error::Config(format!(
            "evaluator: retrieval needs n > max k and k ≥ 1 (n = {n}, ks = {ks:?})"
        )));
    }
    let sims: Vec<Vec<f64>> = images
        .par_iter()
        .map(|a| texts.iter().map(|b| cosine(a, b)).collect())
        .collect();
    let rank = |query: usize, sim: &dyn Fn(usize) -> f64| -> usize {
        let target = sim(query);
        (0..n)
            .filter(|&j| {
                let s = sim(j);
                s > target || (s == target && j < query)
            })
            .count()
    };
    let i2t: Vec<usize> = (0..n).map(|i| rank(i, &|j| sims[i][j])).collect();
    let t2i: Vec<usize> = (0..n).map(|i| rank(i, &|j| sims[j][i])).collect();
    let recall = |ranks: &[usize]| -> Vec<f64> {
        ks.iter()
            .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
            .collect()
    };
    Ok(RetrievalTable {
        ks: ks.to_vec(),
        image_to_text: recall(&i2t),
        text_to_image: recall(&t2i),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl EvalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("evaluator: invalid training settings {self:?}")));
        }
        Ok(())
    }
}

/// Loss after the last epoch and accuracy on the training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTraining {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn image_input(img: &Image) -> Result<Tensor> {
    if img.height() % 4 != 0 || img.width() % 4 != 0 {
        return Err(Error::Shape(format!(
            "evaluator: image {}x{} is not a multiple of 4",
            img.height(),
            img.width()
        )));
    }
    let px: Vec<f64> = img.data().iter().map(|v| v - 0.5).collect();
    Tensor::new(vec![img.height() * img.width(), 3], px)
}

fn insert_backbone(store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
    for (name, cin, cout) in [("c1", 3, 16), ("c2", 16, 32), ("c3", 32, FEATURE_DIM)] {
        store.insert_init(format!("{prefix}{name}.w"), &[9 * cin, cout], 9 * cin, rng);
        store.insert_zeros(format!("{prefix}{name}.b"), &[cout]);
    }
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store.id(&format!("{name}.w"))?);
    let b = g.param(store.id(&format!("{name}.b"))?);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Three 3×3 conv stages with two 2× poolings, then a global mean: `[1 × 32]`.
fn backbone(g: &mut Graph, store: &ParamStore, prefix: &str, img: &Image) -> Result<Var> {
    let (mut h, mut w) = (img.height(), img.width());
    let mut x = g.input(image_input(img)?);
    for (i, name) in ["c1", "c2", "c3"].iter().enumerate() {
        let cols = g.im2col3(x, h, w)?;
        x = linear(g, store, cols, &format!("{prefix}{name}"))?;
        x = g.silu(x);
        if i < 2 {
            x = g.avg_pool2(x, h, w)?;
            h /= 2;
            w /= 2;
        }
    }
    Ok(g.mean_rows(x))
}

fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

/// Small conv net predicting the space type of a rendered plan.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceClassifier {
    pub params: ParamStore,
}

impl SpaceClassifier {
    pub fn new(rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        insert_backbone(&mut params, "", rng);
        let k = SpaceType::ALL.len();
        params.insert_init("head.w", &[FEATURE_DIM, k], FEATURE_DIM, rng);
        params.insert_zeros("head.b", &[k]);
        Self { params }
    }

    pub fn classes(&self) -> usize {
        SpaceType::ALL.len()
    }

    fn logits(&self, g: &mut Graph, img: &Image) -> Result<(Var, Var)> {
        let f = backbone(g, &self.params, "", img)?;
        let z = linear(g, &self.params, f, "head")?;
        Ok((f, z))
    }

    pub fn train(&mut self, images: &[Image], labels: &[SpaceType], cfg: &EvalTrainConfig) -> Result<EvalTraining> {
        cfg.validate()?;
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Input("evaluator: classifier needs one label per image".into()));
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        };
        let mut state = AdamState::new(&self.params);
        let mut rng = Rng::new(cfg.seed);
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.epochs {
            let mut total = 0.0;
            for batch in batches(images.len(), cfg.batch_size, &mut rng) {
                let (loss, grads) = {
                    let mut g = Graph::new(&self.params);
                    let rows = batch
                        .iter()
                        .map(|&i| self.logits(&mut g, &images[i]).map(|(_, z)| z))
                        .collect::<Result<Vec<_>>>()?;
                    let z = g.concat_rows(&rows)?;
                    let ys: Vec<usize> = batch.iter().map(|&i| labels[i].index()).collect();
                    let loss = g.cross_entropy_rows(z, &ys)?;
                    (g.value(loss).data()[0], g.backward(loss))
                };
                total += loss * batch.len() as f64;
                adam_step(&mut self.params, &grads, &mut state, &adam)?;
            }
            final_loss = total / images.len() as f64;
        }
        Ok(EvalTraining {
            final_loss,
            train_accuracy: self.accuracy(images, labels)?,
        })
    }

    /// Penultimate features and class probabilities per image.
    pub fn forward(&self, images: &[Image]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        images
            .par_iter()
            .map(|img| {
                let mut g = Graph::inference(&self.params);
                let (f, z) = self.logits(&mut g, img)?;
                let p = g.softmax_rows(z);
                Ok((g.value(f).data().to_vec(), g.value(p).data().to_vec()))
            })
            .collect()
    }

    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(images)?.into_iter().map(|(f, _)| f).collect())
    }

    pub fn probabilities(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(images)?.into_iter().map(|(_, p)| p).collect())
    }

    pub fn accuracy(&self, images: &[Image], labels: &[SpaceType]) -> Result<f64> {
        let probs = self.probabilities(images)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, l)| argmax(p) == l.index())
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Inception-style score of `images` under a trained classifier.
pub fn inception_score(images: &[Image], classifier: &SpaceClassifier) -> Result<f64> {
    inception_proxy(&classifier.probabilities(images)?)
}

/// Image and text towers mapping into a shared unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl DualEncoder {
    pub fn new(vocab: Vocabulary, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        insert_backbone(&mut params, "img.", rng);
        params.insert_init("img.proj.w", &[FEATURE_DIM, FEATURE_DIM], FEATURE_DIM, rng);
        params.insert_zeros("img.proj.b", &[FEATURE_DIM]);
        params.insert_init("txt.emb", &[vocab.len(), FEATURE_DIM], 1, rng);
        params.insert_init("txt.proj.w", &[FEATURE_DIM, FEATURE_DIM], FEATURE_DIM, rng);
        params.insert_zeros("txt.proj.b", &[FEATURE_DIM]);
        Self { vocab, params }
    }

    fn image_var(&self, g: &mut Graph, img: &Image) -> Result<Var> {
        let f = backbone(g, &self.params, "img.", img)?;
        let z = linear(g, &self.params, f, "img.proj")?;
        Ok(g.l2_normalize_rows(z))
    }

    fn text_var(&self, g: &mut Graph, text: &str) -> Result<Var> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Input("evaluator: empty prompt".into()));
        }
        let ids: Vec<usize> = toks.iter().map(|t| self.vocab.id_or_unk(t)).collect();
        let table = g.param(self.params.id("txt.emb")?);
        let rows = g.gather_rows(table, &ids)?;
        let pooled = g.mean_rows(rows);
        let z = linear(g, &self.params, pooled, "txt.proj")?;
        Ok(g.l2_normalize_rows(z))
    }

    pub fn embed_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images
            .par_iter()
            .map(|img| {
                let mut g = Graph::inference(&self.params);
                let v = self.image_var(&mut g, img)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect()
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .par_iter()
            .map(|t| {
                let mut g = Graph::inference(&self.params);
                let v = self.text_var(&mut g, t)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect()
    }

    /// Symmetric in-batch contrastive training at [`TEMPERATURE`].
    pub fn train(&mut self, images: &[Image], texts: &[String], cfg: &EvalTrainConfig) -> Result<EvalTraining> {
        cfg.validate()?;
        if images.len() != texts.len() || images.len() < 2 {
            return Err(Error::Input("evaluator: dual encoder needs ≥ 2 aligned pairs".into()));
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        };
        let mut state = AdamState::new(&self.params);
        let mut rng = Rng::new(cfg.seed);
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.epochs {
            let mut total = 0.0;
            let mut seen = 0.0;
            for batch in batches(images.len(), cfg.batch_size, &mut rng) {
                if batch.len() < 2 {
                    continue;
                }
                let (loss, grads) = {
                    let mut g = Graph::new(&self.params);
                    let iv = batch
                        .iter()
                        .map(|&i| self.image_var(&mut g, &images[i]))
                        .collect::<Result<Vec<_>>>()?;
                    let tv = batch
                        .iter()
                        .map(|&i| self.text_var(&mut g, &texts[i]))
                        .collect::<Result<Vec<_>>>()?;
                    let iv = g.concat_rows(&iv)?;
                    let tv = g.concat_rows(&tv)?;
                    let targets: Vec<usize> = (0..batch.len()).collect();
                    let li = g.matmul_nt(iv, tv)?;
                    let li = g.scale(li, 1.0 / TEMPERATURE);
                    let lt = g.matmul_nt(tv, iv)?;
                    let lt = g.scale(lt, 1.0 / TEMPERATURE);
                    let a = g.cross_entropy_rows(li, &targets)?;
                    let b = g.cross_entropy_rows(lt, &targets)?;
                    let sum = g.add(a, b)?;
                    let loss = g.scale(sum, 0.5);
                    (g.value(loss).data()[0], g.backward(loss))
                };
                total += loss * batch.len() as f64;
                seen += batch.len() as f64;
                adam_step(&mut self.params, &grads, &mut state, &adam)?;
            }
            final_loss = total / seen.max(1.0);
        }
        let ie = self.embed_images(images)?;
        let te = self.embed_texts(texts)?;
        let hits = (0..ie.len())
            .filter(|&i| {
                let sims: Vec<f64> = te.iter().map(|t| cosine(&ie[i], t)).collect();
                argmax(&sims) == i
            })
            .count();
        Ok(EvalTraining {
            final_loss,
            train_accuracy: hits as f64 / ie.len() as f64,
        })
    }
}

/// Mean cosine similarity between each image and its prompt.
pub fn similarity_score(images: &[Image], prompts: &[String], encoder: &DualEncoder) -> Result<f64> {
    if images.len() != prompts.len() {
        return Err(Error::Input(format!(
            "evaluator: {} images vs {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    paired_cosine(&encoder.embed_images(images)?, &encoder.embed_texts(prompts)?)
}
