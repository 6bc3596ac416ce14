//! Instance-conditioned prompt generator: shared context vectors, a Meta-Net
//! that shifts them per image, and one embedding per class. The encoders stay
//! frozen; only `prompt.*` tensors are ever updated here.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{splitmix64, ObservationVocabulary, SampleRecord};
use crate::encoders::{normal, EncoderStack, Session, Tokenizer, TAU, TEXT_EMBEDDING, UNK};
use crate::error::{Error, Result};
use crate::grad::{adam_step, AdamConfig, OptimizerState, ParamStore, Scalar, Tensor, Var};

pub const PROMPT_PREFIX: &str = "prompt.";
pub const CONTEXT: &str = "prompt.ctx";
pub const META_PREFIX: &str = "prompt.meta.";
pub const META_W1: &str = "prompt.meta.w1";
pub const META_B1: &str = "prompt.meta.b1";
pub const META_W2: &str = "prompt.meta.w2";
pub const META_B2: &str = "prompt.meta.b2";
pub const CLASS_PREFIX: &str = "prompt.class.";

/// Shot counts accepted by the few-shot protocol.
pub const FEW_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

pub fn class_param(k: usize) -> String {
    format!("{CLASS_PREFIX}{k:02}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Number of context vectors.
    pub m: usize,
    /// Meta-Net bottleneck is `d / reduction` wide.
    pub reduction: usize,
    pub ctx_std: f64,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Epochs of base-class prompt training.
    pub epochs: usize,
    /// Optimizer steps of few-shot fine-tuning, whatever the shot count.
    pub fewshot_steps: usize,
    pub fewshot_lr: f64,
    pub fullshot_epochs: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            m: 16,
            reduction: 16,
            ctx_std: 0.02,
            lr: 2e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            batch: 32,
            epochs: 20,
            fewshot_steps: 40,
            fewshot_lr: 2e-3,
            fullshot_epochs: 20,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("prompt.m", "needs at least one context vector"));
        }
        if self.reduction == 0 || d / self.reduction == 0 {
            return Err(Error::config("prompt.reduction", format!("must leave a bottleneck of at least 1 (d = {d})")));
        }
        for (field, v) in [("prompt.lr", self.lr), ("prompt.fewshot_lr", self.fewshot_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.ctx_std >= 0.0) || !self.ctx_std.is_finite() {
            return Err(Error::config("prompt.ctx_std", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("prompt.warmup_fraction", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("prompt.weight_decay", "must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("prompt.batch", "must be positive"));
        }
        if self.epochs == 0 || self.fullshot_epochs == 0 || self.fewshot_steps == 0 {
            return Err(Error::config("prompt.epochs", "epoch and step counts must be positive"));
        }
        Ok(())
    }
}

/// Which parameter groups a training stage may update. Class embeddings are
/// always trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub train_metanet: bool,
    pub train_context: bool,
    pub train_class: bool,
}

impl TrainableMask {
    pub fn new(train_metanet: bool, train_context: bool) -> Self {
        Self { train_metanet, train_context, train_class: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.train_class {
            return Err(Error::Invalid("class embeddings must stay trainable".into()));
        }
        Ok(())
    }
}

/// The four ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    Class,
    ContextClass,
    MetanetClass,
    Full,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 4] = [MaskVariant::Class, MaskVariant::ContextClass, MaskVariant::MetanetClass, MaskVariant::Full];

    pub fn mask(self) -> TrainableMask {
        match self {
            MaskVariant::Class => TrainableMask::new(false, false),
            MaskVariant::ContextClass => TrainableMask::new(false, true),
            MaskVariant::MetanetClass => TrainableMask::new(true, false),
            MaskVariant::Full => TrainableMask::new(true, true),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            MaskVariant::Class => "class",
            MaskVariant::ContextClass => "context-class",
            MaskVariant::MetanetClass => "metanet-class",
            MaskVariant::Full => "full",
        }
    }
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
            Error::Invalid(format!("unknown mask `{s}` (expected one of {})", valid.join(", ")))
        })
    }
}

/// Labelled samples per unseen class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotSpec {
    Zero,
    Few(usize),
    Full,
}

impl ShotSpec {
    /// The evaluation grid: zero, every few-shot count, full.
    pub fn grid() -> Vec<ShotSpec> {
        let mut v = vec![ShotSpec::Zero];
        v.extend(FEW_SHOTS.iter().map(|&n| ShotSpec::Few(n)));
        v.push(ShotSpec::Full);
        v
    }

    pub fn few(n: usize) -> Result<Self> {
        if n == 0 {
            return Ok(ShotSpec::Zero);
        }
        if !FEW_SHOTS.contains(&n) {
            return Err(Error::Invalid(format!("unsupported shot count {n}: expected one of {{1, 2, 4, 8, 16}}")));
        }
        Ok(ShotSpec::Few(n))
    }

    pub fn tag(self) -> String {
        match self {
            ShotSpec::Zero => "zero".into(),
            ShotSpec::Few(n) => format!("few:{n}"),
            ShotSpec::Full => "full".into(),
        }
    }

    /// Shot count for tables; `None` for the full split.
    pub fn shots(self) -> Option<usize> {
        match self {
            ShotSpec::Zero => Some(0),
            ShotSpec::Few(n) => Some(n),
            ShotSpec::Full => None,
        }
    }
}

impl fmt::Display for ShotSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for ShotSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ShotSpec::Zero),
            "full" => Ok(ShotSpec::Full),
            _ => match s.strip_prefix("few:").map(str::parse::<usize>) {
                Some(Ok(n)) if n > 0 => ShotSpec::few(n),
                _ => Err(Error::Invalid(format!("unknown protocol `{s}` (expected zero, few:<n> or full)"))),
            },
        }
    }
}

/// `prompt.*` tensors plus whether the Meta-Net contributes. With the
/// Meta-Net bypassed its weights still exist but `π ≡ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenerator {
    pub params: ParamStore<f32>,
    pub metanet: bool,
}

impl PromptGenerator {
    /// Fresh context and Meta-Net, class rows as given.
    pub fn init(
        stack: &EncoderStack,
        cfg: &PromptConfig,
        metanet: bool,
        class_rows: &[(usize, Tensor<f32>)],
        seed: u64,
    ) -> Result<Self> {
        let (d, dm) = (stack.config.d, stack.config.d_model);
        cfg.validate(d)?;
        let h = d / cfg.reduction;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5052_4f4d));
        let mut p = ParamStore::new();
        p.insert(CONTEXT, normal(&mut rng, &[cfg.m, dm], cfg.ctx_std));
        p.insert(META_W1, normal(&mut rng, &[d, h], 1.0 / (d as f64).sqrt()));
        p.insert(META_B1, Tensor::zeros(&[h]));
        p.insert(META_W2, normal(&mut rng, &[h, dm], 0.02));
        p.insert(META_B2, Tensor::zeros(&[dm]));
        let mut gen = Self { params: p, metanet };
        for (k, row) in class_rows {
            gen.set_class(*k, row.clone())?;
        }
        Ok(gen)
    }

    /// Pulls the `prompt.*` tensors out of a checkpoint store.
    pub fn from_store(store: &ParamStore<f32>, metanet: bool) -> Result<Self> {
        let mut params = ParamStore::new();
        params.extend_prefix(store, PROMPT_PREFIX);
        for name in [CONTEXT, META_W1, META_B1, META_W2, META_B2] {
            if !params.contains(name) {
                return Err(Error::Invalid(format!("checkpoint has no prompt tensor `{name}`")));
            }
        }
        Ok(Self { params, metanet })
    }

    pub fn m(&self) -> usize {
        self.context().shape()[0]
    }

    pub fn context(&self) -> &Tensor<f32> {
        self.params.get(CONTEXT).expect("context is always present")
    }

    pub fn class_row(&self, k: usize) -> Option<&Tensor<f32>> {
        self.params.get(&class_param(k))
    }

    /// Classes with an embedding, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.params.names().filter_map(|n| n.strip_prefix(CLASS_PREFIX)?.parse().ok()).collect()
    }

    pub fn set_class(&mut self, k: usize, row: Tensor<f32>) -> Result<()> {
        let dm = self.context().shape()[1];
        if row.shape() != [dm] {
            return Err(Error::Invalid(format!("class embedding for {k} has shape {:?}, expected [{dm}]", row.shape())));
        }
        self.params.insert(class_param(k), row);
        Ok(())
    }
}

/// `π = W2 · ReLU(W1 · I_e + b1) + b2` for a batch `[B, d]`.
pub fn metanet_forward<T: Scalar>(s: &mut Session<'_, T>, ie: Var) -> Result<Var> {
    let w1 = s.get(META_W1).ok_or_else(|| Error::Invalid(format!("missing parameter `{META_W1}`")))?;
    let sh = s.g.shape(ie);
    if sh.len() != 2 || sh[1] != w1.shape()[0] {
        return Err(Error::Invalid(format!("Meta-Net expects [batch, {}] inputs, got {sh:?}", w1.shape()[0])));
    }
    let h = s.linear(ie, META_W1, Some(META_B1))?;
    let h = s.g.relu(h)?;
    s.linear(h, META_W2, Some(META_B2))
}

/// Prompt sequences for every (image, class) pair, image-major:
/// `[B·K, m+1, d_model]` with `π [B, d_model]`, or `[K, m+1, d_model]` when
/// `pi` is `None`. Each is `[v_1+π, …, v_m+π, C_k]`.
pub fn build_prompts<T: Scalar>(s: &mut Session<'_, T>, pi: Option<Var>, classes: &[usize]) -> Result<Var> {
    if classes.is_empty() {
        return Err(Error::Invalid("empty class set".into()));
    }
    let ctx = s.p(CONTEXT)?;
    let (m, dm) = (s.g.shape(ctx)[0], s.g.shape(ctx)[1]);
    let mut rows = Vec::with_capacity(classes.len());
    for &k in classes {
        let name = class_param(k);
        if s.get(&name).is_none() {
            return Err(Error::Invalid(format!("class {k} has no class embedding")));
        }
        let c = s.p(&name)?;
        rows.push(s.g.reshape(c, &[1, dm])?);
    }
    let (ctx_rows, b) = match pi {
        None => (ctx, 1),
        Some(pi) => {
            let b = s.g.shape(pi)[0];
            let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, m)).collect();
            let pi = s.g.gather(pi, &rep)?;
            let pi = s.g.reshape(pi, &[b, m, dm])?;
            let shifted = s.g.add(pi, ctx)?;
            (s.g.reshape(shifted, &[b * m, dm])?, b)
        }
    };
    let mut parts = vec![ctx_rows];
    parts.extend(rows);
    let table = s.g.concat(&parts, 0)?;
    let k = classes.len();
    let mut idx = Vec::with_capacity(b * k * (m + 1));
    for i in 0..b {
        for c in 0..k {
            idx.extend(i * m..(i + 1) * m);
            idx.push(b * m + c);
        }
    }
    let seq = s.g.gather(table, &idx)?;
    Ok(s.g.reshape(seq, &[b * k, m + 1, dm])?)
}

/// One prompt `[m+1, d_model]` for one image embedding and class.
pub fn build_prompt(gen: &PromptGenerator, image_embedding: &[f32], k: usize) -> Result<Tensor<f32>> {
    let mut s = Session::frozen(&gen.params);
    let pi = if gen.metanet {
        let ie = s.constant(Tensor::new(vec![1, image_embedding.len()], image_embedding.to_vec())?);
        Some(metanet_forward(&mut s, ie)?)
    } else {
        None
    };
    let seq = build_prompts(&mut s, pi, &[k])?;
    let sh = s.g.shape(seq)[1..].to_vec();
    Ok(s.value(seq).clone().reshape(&sh)?)
}

/// Cosine between each image and each of its class prompts, `[B, K]`.
pub fn class_cosines<T: Scalar>(
    stack: &EncoderStack,
    s: &mut Session<'_, T>,
    metanet: bool,
    ie: Var,
    classes: &[usize],
) -> Result<Var> {
    let (b, d) = (s.g.shape(ie)[0], stack.config.d);
    let k = classes.len();
    let pi = if metanet { Some(metanet_forward(s, ie)?) } else { None };
    let prompts = build_prompts(s, pi, classes)?;
    let n = s.g.shape(prompts)[1];
    let rows = s.g.shape(prompts)[0];
    let te = stack.encode_embeddings(s, prompts, &vec![n; rows])?;
    let te = s.g.l2_normalize_rows(te)?;
    let ie = s.g.l2_normalize_rows(ie)?;
    if metanet {
        let te = s.g.reshape(te, &[b, k, d])?;
        let ie = s.g.reshape(ie, &[b, 1, d])?;
        let cos = s.g.bmm(te, ie, true)?;
        Ok(s.g.reshape(cos, &[b, k])?)
    } else {
        let tt = s.g.transpose(te)?;
        Ok(s.g.matmul(ie, tt)?)
    }
}

fn temperature<T: Scalar>(s: &Session<'_, T>) -> Result<T> {
    let t = s.get(TAU).ok_or_else(|| Error::Invalid(format!("missing parameter `{TAU}`")))?;
    Ok(t.item().exp())
}

/// Class logits `cos / τ`, `[B, K]`.
pub fn class_logits<T: Scalar>(
    stack: &EncoderStack,
    s: &mut Session<'_, T>,
    metanet: bool,
    ie: Var,
    classes: &[usize],
) -> Result<Var> {
    let cos = class_cosines(stack, s, metanet, ie, classes)?;
    let tau = temperature(s)?;
    Ok(s.g.scale(cos, T::one() / tau)?)
}

const EVAL_CHUNK: usize = 32;

/// Class probabilities for precomputed image embeddings, one row per image
/// in `classes` order.
pub fn classify(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    image_embeddings: &[Vec<f32>],
    classes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if classes.is_empty() {
        return Err(Error::Invalid("empty class set".into()));
    }
    let d = stack.config.d;
    let mut out = Vec::with_capacity(image_embeddings.len());
    for chunk in image_embeddings.chunks(EVAL_CHUNK) {
        let mut s = Session::layered(vec![&gen.params, encoders], |_| false);
        let flat: Vec<f32> = chunk.iter().flat_map(|e| e.iter().copied()).collect();
        let ie = s.constant(Tensor::new(vec![chunk.len(), d], flat)?);
        let logits = class_logits(stack, &mut s, gen.metanet, ie, classes)?;
        let p = s.g.softmax_rows(logits, 1.0)?;
        out.extend(s.value(p).data().chunks(classes.len()).map(|r| r.iter().map(|&x| x as f64).collect()));
    }
    Ok(out)
}

/// Classifies raw images, embedding them first.
pub fn classify_images(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    images: &[&Tensor<f32>],
    classes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let emb = stack.embed_images(encoders, images, EVAL_CHUNK)?;
    classify(stack, encoders, gen, &emb, classes)
}

pub fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b })
}

/// Mean of the token embeddings of the in-vocabulary words of a class name.
pub fn name_embedding(
    tokenizer: &Tokenizer,
    vocab: &ObservationVocabulary,
    table: &Tensor<f32>,
    k: usize,
) -> Result<Tensor<f32>> {
    let dm = table.last_dim();
    let ids: Vec<usize> =
        vocab.name_words(k).iter().map(|w| tokenizer.id(w) as usize).filter(|&id| id != UNK as usize).collect();
    if ids.is_empty() {
        return Err(Error::Invalid(format!("class name `{}` is entirely out of vocabulary", vocab.name(k))));
    }
    let mut acc = vec![0f32; dm];
    for &id in &ids {
        for (a, &v) in acc.iter_mut().zip(table.row(id)) {
            *a += v;
        }
    }
    let n = ids.len() as f32;
    Ok(Tensor::new(vec![dm], acc.into_iter().map(|a| a / n).collect())?)
}

fn token_table(encoders: &ParamStore<f32>) -> Result<&Tensor<f32>> {
    encoders.get(TEXT_EMBEDDING).ok_or_else(|| Error::Invalid(format!("missing parameter `{TEXT_EMBEDDING}`")))
}

/// Gives each class a name-initialised embedding, overwriting any existing
/// row. Context and Meta-Net are untouched.
pub fn zero_shot_setup(
    gen: &PromptGenerator,
    classes: &[usize],
    tokenizer: &Tokenizer,
    vocab: &ObservationVocabulary,
    encoders: &ParamStore<f32>,
) -> Result<PromptGenerator> {
    let table = token_table(encoders)?;
    let mut out = gen.clone();
    for &k in classes {
        out.set_class(k, name_embedding(tokenizer, vocab, table, k)?)?;
    }
    Ok(out)
}

/// Labelled image embeddings for prompt training.
#[derive(Debug, Clone)]
pub struct Labelled {
    pub embeddings: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Labelled {
    pub fn embed(stack: &EncoderStack, encoders: &ParamStore<f32>, samples: &[&SampleRecord]) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|r| &r.image).collect();
        Ok(Self {
            embeddings: stack.embed_images(encoders, &images, EVAL_CHUNK)?,
            labels: samples.iter().map(|r| r.class_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How long and how fast one training stage runs.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
}

/// Mean cross-entropy per epoch, where an epoch is `ceil(n / batch)` steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training of the `prompt.*` tensors selected by `trainable`
/// over `classes`. Every other tensor, encoders included, enters the graph as
/// a constant.
pub fn train_prompts(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &mut PromptGenerator,
    data: &Labelled,
    classes: &[usize],
    trainable: &dyn Fn(&str) -> bool,
    sched: Schedule,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let col: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    for &l in &data.labels {
        if !col.contains_key(&l) {
            return Err(Error::Invalid(format!("label {l} is not in the class set {classes:?}")));
        }
    }
    let names: Vec<String> = gen.params.names().filter(|n| trainable(n)).cloned().collect();
    if names.is_empty() {
        return Err(Error::Invalid("nothing is trainable".into()));
    }
    let d = stack.config.d;
    let batch = sched.batch.min(data.len()).max(1);
    let per_epoch = data.len().div_ceil(batch);
    let mut opt = OptimizerState::new(AdamConfig {
        lr: sched.lr,
        weight_decay: sched.weight_decay,
        warmup_fraction: sched.warmup_fraction,
        total_steps: sched.steps as u64,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let (mut sum, mut count) = (0.0, 0usize);
    for step in 0..sched.steps {
        let e = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(e as u64))));
        }
        let off = (step % per_epoch) * batch;
        let idx = &order[off..(off + batch).min(order.len())];
        let flat: Vec<f32> = idx.iter().flat_map(|&i| data.embeddings[i].iter().copied()).collect();
        let mut target = vec![0f32; idx.len() * classes.len()];
        for (r, &i) in idx.iter().enumerate() {
            target[r * classes.len() + col[&data.labels[i]]] = 1.0;
        }
        let target = Tensor::new(vec![idx.len(), classes.len()], target)?;
        let grads = {
            let mut s = Session::layered(vec![&gen.params, encoders], |n| names.iter().any(|t| t == n));
            let ie = s.constant(Tensor::new(vec![idx.len(), d], flat)?);
            let logits = class_logits(stack, &mut s, gen.metanet, ie, classes)?;
            let loss = s.g.softmax_cross_entropy(logits, &target)?;
            let value = s.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { stage: "prompt", step: step as u64 + 1, loss: value });
            }
            sum += value;
            count += 1;
            s.g.backward(loss)?
        };
        adam_step(&mut gen.params, &grads, &mut opt)?;
        if (step + 1) % per_epoch == 0 || step + 1 == sched.steps {
            log.epoch_losses.push(sum / count as f64);
            (sum, count) = (0.0, 0);
        }
    }
    Ok(log)
}

fn mask_predicate(mask: TrainableMask, metanet: bool, classes: &[usize]) -> impl Fn(&str) -> bool {
    let class_names: Vec<String> = classes.iter().map(|&k| class_param(k)).collect();
    move |n: &str| {
        (mask.train_context && n == CONTEXT)
            || (mask.train_metanet && metanet && n.starts_with(META_PREFIX))
            || (mask.train_class && class_names.iter().any(|c| c == n))
    }
}

fn stage_schedule(cfg: &PromptConfig, n: usize, epochs: usize, lr: f64) -> Schedule {
    let batch = cfg.batch.min(n).max(1);
    Schedule {
        steps: epochs * n.div_ceil(batch),
        batch,
        lr,
        warmup_fraction: cfg.warmup_fraction,
        weight_decay: cfg.weight_decay,
    }
}

/// Trains a fresh generator on the base classes. Class rows start from their
/// name embeddings; the Meta-Net is bypassed unless the mask trains it.
pub fn prompt_train(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    tokenizer: &Tokenizer,
    vocab: &ObservationVocabulary,
    data: &Labelled,
    classes: &[usize],
    mask: TrainableMask,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<(PromptGenerator, TrainLog)> {
    mask.validate()?;
    let table = token_table(encoders)?;
    let rows = classes.iter().map(|&k| Ok((k, name_embedding(tokenizer, vocab, table, k)?))).collect::<Result<Vec<_>>>()?;
    let mut gen = PromptGenerator::init(stack, cfg, mask.train_metanet, &rows, seed)?;
    let sched = stage_schedule(cfg, data.len(), cfg.epochs, cfg.lr);
    let pred = mask_predicate(mask, gen.metanet, classes);
    let log = train_prompts(stack, encoders, &mut gen, data, classes, &pred, sched, seed)?;
    Ok((gen, log))
}

/// Seeded per-class draw of `shots` samples, in class order. Returns indices
/// into `samples`.
pub fn select_shots(samples: &[SampleRecord], classes: &[usize], shots: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(shots * classes.len());
    for &k in classes {
        let mut pool: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class_id == k).collect();
        if pool.len() < shots {
            return Err(Error::Invalid(format!(
                "class {k} has {} training samples, fewer than the {shots} shots requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0x5348_4f54 + k as u64))));
        out.extend_from_slice(&pool[..shots]);
    }
    Ok(out)
}

/// Fine-tunes only the class rows of `classes` on `shots` samples per class.
/// Zero shots returns the generator unchanged. Also returns the ids of the
/// selected samples.
pub fn fewshot_finetune(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    shots: usize,
    samples: &[SampleRecord],
    classes: &[usize],
    cfg: &PromptConfig,
    seed: u64,
) -> Result<(PromptGenerator, Vec<String>)> {
    if shots == 0 {
        return Ok((gen.clone(), Vec::new()));
    }
    let picked = select_shots(samples, classes, shots, seed)?;
    let chosen: Vec<&SampleRecord> = picked.iter().map(|&i| &samples[i]).collect();
    let data = Labelled::embed(stack, encoders, &chosen)?;
    let mut out = gen.clone();
    let sched = Schedule {
        steps: cfg.fewshot_steps,
        batch: cfg.batch.min(data.len()),
        lr: cfg.fewshot_lr,
        warmup_fraction: 0.0,
        weight_decay: 0.0,
    };
    let pred = mask_predicate(TrainableMask::new(false, false), false, classes);
    train_prompts(stack, encoders, &mut out, &data, classes, &pred, sched, seed)?;
    Ok((out, chosen.iter().map(|r| r.id.clone()).collect()))
}

/// Trains every mask-enabled group of the generator on a full labelled split.
pub fn fullshot_train(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    data: &Labelled,
    classes: &[usize],
    mask: TrainableMask,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<(PromptGenerator, TrainLog)> {
    mask.validate()?;
    let mut out = gen.clone();
    let sched = stage_schedule(cfg, data.len(), cfg.fullshot_epochs, cfg.lr);
    let pred = mask_predicate(mask, out.metanet, classes);
    let log = train_prompts(stack, encoders, &mut out, data, classes, &pred, sched, seed)?;
    Ok((out, log))
}
