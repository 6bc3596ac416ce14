//! Decoupled image/sentence pretraining against label-similarity targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    augment, extract_labels, gt_similarity, sentence_filter, splitmix64, GtTargets, LabelVector,
    ObservationVocabulary, SampleRecord, Split, MIN_SENTENCE_TOKENS,
};
use crate::encoders::{EncoderStack, Session, Tokenizer, TAU};
use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamConfig, Graph, OptimizerState, ParamStore, Scalar, Tensor, Var};

/// Floor applied inside the log of the semantic loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Images per step.
    pub batch: usize,
    /// Sentences per step. `None` spreads the whole sentence pool over the
    /// steps of one epoch, so every sentence is seen once per epoch.
    pub texts_per_step: Option<usize>,
    pub epochs: usize,
    /// Initial temperature. The desk-scale default is 1.0; 0.07 collapses
    /// the embeddings on the near-uniform targets of this corpus.
    pub tau_init: f64,
    pub augment: bool,
    pub retrieval_batch: usize,
    /// Held-out pretraining-style samples used for retrieval checks.
    pub retrieval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_fraction: 0.1,
            weight_decay: 1e-4,
            batch: 64,
            texts_per_step: None,
            epochs: 10,
            tau_init: 1.0,
            augment: true,
            retrieval_batch: 32,
            retrieval_samples: 320,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("pretrain.warmup_fraction", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("pretrain.weight_decay", "must be non-negative"));
        }
        if self.batch < 2 {
            return Err(Error::config("pretrain.batch", "must be at least 2"));
        }
        if self.texts_per_step.is_some_and(|n| n < 2) {
            return Err(Error::config("pretrain.texts_per_step", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("pretrain.epochs", "must be positive"));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::config("pretrain.tau_init", "must be positive"));
        }
        if self.retrieval_batch < 2 {
            return Err(Error::config("pretrain.retrieval_batch", "must be at least 2"));
        }
        Ok(())
    }
}

/// Graph nodes of the predicted similarity.
#[derive(Debug, Clone, Copy)]
pub struct PredictedSimilarity {
    /// Cosines `[n_img, n_text]`.
    pub cosine: Var,
    /// Row softmax of `cosine / tau`.
    pub img_to_txt: Var,
    /// Column softmax of `cosine / tau`, same orientation.
    pub txt_to_img: Var,
}

/// Cosine similarity of image and text embeddings and both softmax directions
/// at temperature `tau` (a scalar node).
pub fn predicted_similarity<T: Scalar>(g: &mut Graph<T>, ie: Var, te: Var, tau: Var) -> Result<PredictedSimilarity> {
    let t = g.value(tau);
    if t.numel() != 1 || !(t.data()[0] > T::zero()) {
        return Err(Error::Invalid("temperature must be a positive scalar".into()));
    }
    let i = g.l2_normalize_rows(ie)?;
    let tn = g.l2_normalize_rows(te)?;
    let tt = g.transpose(tn)?;
    let cosine = g.matmul(i, tt)?;
    let logits = g.div(cosine, tau)?;
    let img_to_txt = g.softmax_rows(logits, T::one())?;
    let lt = g.transpose(logits)?;
    let col = g.softmax_rows(lt, T::one())?;
    let txt_to_img = g.transpose(col)?;
    Ok(PredictedSimilarity { cosine, img_to_txt, txt_to_img })
}

/// Symmetric semantic matching loss:
/// `-1/2 [ mean_i sum_j y_ij ln p_ij + mean_j sum_i y'_ij ln p'_ij ]`
/// where `p`/`y` are row-normalised over texts and `p'`/`y'` column-normalised
/// over images.
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, pred: &PredictedSimilarity, target: &GtTargets<T>) -> Result<Var> {
    let shape = g.shape(pred.img_to_txt).to_vec();
    if shape.len() != 2 || target.img_to_txt.shape() != shape.as_slice() || target.txt_to_img.shape() != shape.as_slice() {
        return Err(Error::Invalid(format!(
            "semantic loss shapes differ: prediction {shape:?}, target {:?}",
            target.img_to_txt.shape()
        )));
    }
    let (n_img, n_txt) = (shape[0], shape[1]);
    let term = |g: &mut Graph<T>, p: Var, y: &Tensor<T>, n: usize| -> Result<Var> {
        let lp = g.ln_floor(p, T::c(LOG_FLOOR))?;
        let y = g.constant(y.clone());
        let prod = g.mul(lp, y)?;
        let s = g.sum(prod)?;
        Ok(g.scale(s, T::c(-0.5 / n as f64))?)
    };
    let a = term(g, pred.img_to_txt, &target.img_to_txt, n_img)?;
    let b = term(g, pred.txt_to_img, &target.txt_to_img, n_txt)?;
    Ok(g.add(a, b)?)
}

/// A report sentence with its source report's extracted labels.
#[derive(Debug, Clone)]
pub struct SentenceItem {
    pub ids: Vec<u32>,
    pub labels: LabelVector,
}

/// Training view of the pretraining split: images with extracted labels and
/// the pool of filtered sentences.
pub struct PretrainData<'a> {
    pub images: Vec<(&'a Tensor<f32>, LabelVector)>,
    pub sentences: Vec<SentenceItem>,
}

impl<'a> PretrainData<'a> {
    pub fn build(samples: &'a [SampleRecord], tokenizer: &Tokenizer, vocab: &ObservationVocabulary) -> Result<Self> {
        let mut images = Vec::new();
        let mut sentences = Vec::new();
        for s in samples.iter().filter(|s| s.split == Split::Pretrain) {
            let labels = extract_labels(&s.report, vocab);
            images.push((&s.image, labels));
            for sent in sentence_filter(&s.report, MIN_SENTENCE_TOKENS) {
                sentences.push(SentenceItem { ids: tokenizer.tokenize(&sent), labels });
            }
        }
        if images.len() < 2 || sentences.len() < 2 {
            return Err(Error::Corpus(format!(
                "pretraining needs at least 2 images and 2 sentences, found {} and {}",
                images.len(),
                sentences.len()
            )));
        }
        Ok(Self { images, sentences })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
}

pub struct PretrainOutput {
    pub params: ParamStore<f32>,
    pub log: Vec<LossRow>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

pub fn tau_value(params: &ParamStore<f32>) -> Result<f64> {
    let t = params.get(TAU).ok_or_else(|| Error::Invalid(format!("missing parameter `{TAU}`")))?;
    Ok((t.item() as f64).exp())
}

/// Semantic loss of one decoupled batch under `params`; records gradients for
/// every parameter when `train` is set.
fn batch_loss(
    stack: &EncoderStack,
    params: &ParamStore<f32>,
    images: &[&Tensor<f32>],
    texts: &[Vec<u32>],
    target: &GtTargets<f32>,
    train: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor<f32>>>)> {
    let mut s = Session::new(params, move |_| train);
    let ie = stack.encode_images(&mut s, images)?;
    let te = stack.encode_tokens(&mut s, texts)?;
    let lt = s.p(TAU)?;
    let tau = s.g.exp(lt)?;
    let pred = predicted_similarity(&mut s.g, ie, te, tau)?;
    let loss = semantic_loss(&mut s.g, &pred, target)?;
    let value = s.value(loss).item() as f64;
    if !train || !value.is_finite() {
        return Ok((value, None));
    }
    Ok((value, Some(s.g.backward(loss)?)))
}

/// Trains encoders, projections and temperature from scratch.
pub fn pretrain_run(
    stack: &EncoderStack,
    data: &PretrainData<'_>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let mut params = stack.init(seed, cfg.tau_init)?;
    let n_img = data.images.len();
    let batch = cfg.batch.min(n_img);
    let steps_per_epoch = n_img / batch;
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: total,
        ..AdamConfig::default()
    });
    let n_text = cfg.texts_per_step.unwrap_or_else(|| data.sentences.len().div_ceil(steps_per_epoch)).max(2);
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let eseed = splitmix64(seed ^ splitmix64(0x5052_4554 + epoch as u64));
        let img_order = shuffled(n_img, eseed);
        let txt_order = shuffled(data.sentences.len(), eseed ^ 0x7478_74);
        let mut sum = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &img_order[b * batch..(b + 1) * batch];
            let mut imgs = Vec::with_capacity(batch);
            for &i in idx {
                let img = data.images[i].0;
                imgs.push(if cfg.augment { augment(img, splitmix64(eseed ^ i as u64))? } else { img.clone() });
            }
            let img_refs: Vec<&Tensor<f32>> = imgs.iter().collect();
            let tidx: Vec<usize> = (0..n_text).map(|k| txt_order[(b * n_text + k) % txt_order.len()]).collect();
            let texts: Vec<Vec<u32>> = tidx.iter().map(|&t| data.sentences[t].ids.clone()).collect();
            let il: Vec<LabelVector> = idx.iter().map(|&i| data.images[i].1).collect();
            let tl: Vec<LabelVector> = tidx.iter().map(|&t| data.sentences[t].labels).collect();
            let target = gt_similarity::<f32>(&il, &tl)?;
            step += 1;
            // Overflow inside the forward pass is divergence too.
            let (loss, grads) = batch_loss(stack, &params, &img_refs, &texts, &target, true).map_err(|e| match e {
                Error::Grad(crate::grad::GradError::Domain { .. }) => Error::Diverged { stage: "pretrain", step, loss: f64::NAN },
                e => e,
            })?;
            let grads = match grads {
                Some(g) => g,
                None => return Err(Error::Diverged { stage: "pretrain", step, loss }),
            };
            adam_step(&mut params, &grads, &mut opt).map_err(|e| match e {
                crate::grad::GradError::NonFiniteGrad(_) => Error::Diverged { stage: "pretrain", step, loss },
                e => e.into(),
            })?;
            let tau = tau_value(&params)?;
            log.push(LossRow { epoch, step, loss, tau });
            sum += loss;
        }
        let mean = sum / steps_per_epoch as f64;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.4}, tau {:.4}", tau_value(&params)?);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutput { params, log, epoch_losses })
}

/// `epoch,step,loss,tau` lines.
pub fn loss_csv(log: &[LossRow]) -> String {
    let mut out = String::from("epoch,step,loss,tau\n");
    for r in log {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.step, r.loss, r.tau));
    }
    out
}

/// Samples drawn from the pretraining generator past the training range, so
/// they are never seen during training.
pub fn heldout_samples(config: &crate::corpus::CorpusConfig, vocab: &ObservationVocabulary, n: usize) -> Vec<SampleRecord> {
    (config.pretrain..config.pretrain + n)
        .map(|i| crate::corpus::generate_sample(config, vocab, Split::Pretrain, i))
        .collect()
}

/// Fraction of images whose highest-cosine report in their batch is their
/// own. Batches are consecutive runs of `batch` samples; a trailing partial
/// batch is dropped.
pub fn retrieval_top1(
    stack: &EncoderStack,
    params: &ParamStore<f32>,
    tokenizer: &Tokenizer,
    samples: &[SampleRecord],
    batch: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks_exact(batch.max(2)) {
        let mut s = Session::frozen(params);
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|r| &r.image).collect();
        let texts: Vec<Vec<u32>> = chunk.iter().map(|r| tokenizer.tokenize(&r.report)).collect();
        let ie = stack.encode_images(&mut s, &imgs)?;
        let te = stack.encode_tokens(&mut s, &texts)?;
        let one = s.g.scalar(1.0);
        let pred = predicted_similarity(&mut s.g, ie, te, one)?;
        let cos = s.value(pred.cosine);
        for i in 0..chunk.len() {
            let row = cos.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid(format!("retrieval needs at least {batch} samples")));
    }
    Ok(hits as f64 / total as f64)
}
