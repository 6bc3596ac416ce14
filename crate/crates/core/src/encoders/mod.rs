//! Tiny image and text encoders sharing an embedding dimension.
//!
//! Parameter names are prefixed `image.`, `text.` and `proj.`; the learnable
//! temperature lives at [`TAU`] as a log value.

mod session;
mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use session::{Session, LN_EPS};
pub use tokenizer::{unpadded_len, Tokenizer, BOS, DEFAULT_MAX_LEN, EOS, PAD, SPECIAL_TOKENS, UNK};

use crate::error::{Error, Result};
use crate::grad::{ParamStore, Scalar, Tensor, Var};

/// Log-temperature parameter name.
pub const TAU: &str = "tau.log";
pub const TEXT_EMBEDDING: &str = "text.tok_emb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageVariant {
    Conv,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: ImageVariant,
    pub d_model: usize,
    /// Shared output dimension of both projections.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Output channels of each conv stage.
    pub conv_channels: Vec<usize>,
    pub patch: usize,
    pub max_len: usize,
    /// Pixels enter the image encoder as `(x - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: ImageVariant::Conv,
            d_model: 64,
            d: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            conv_channels: vec![8, 16, 32],
            patch: 4,
            max_len: DEFAULT_MAX_LEN,
            pixel_mean: crate::corpus::BACKGROUND as f64,
            pixel_std: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("encoder.{name}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("d_model", self.d_model)?;
        pos("d", self.d)?;
        pos("layers", self.layers)?;
        pos("heads", self.heads)?;
        pos("mlp_hidden", self.mlp_hidden)?;
        pos("patch", self.patch)?;
        if self.d_model % self.heads != 0 {
            return Err(Error::config("encoder.heads", format!("{} does not divide d_model {}", self.heads, self.d_model)));
        }
        if !self.pixel_mean.is_finite() {
            return Err(Error::config("encoder.pixel_mean", "must be finite"));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_std.is_finite() {
            return Err(Error::config("encoder.pixel_std", "must be positive"));
        }
        if self.max_len < 2 {
            return Err(Error::config("encoder.max_len", "must be at least 2"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("encoder.conv_channels", "need at least one positive channel count"));
        }
        match self.variant {
            ImageVariant::Conv => {
                let div = 1usize << self.conv_channels.len();
                if image_side % div != 0 {
                    return Err(Error::config(
                        "encoder.conv_channels",
                        format!("{} pooling stages need an image side divisible by {div}", self.conv_channels.len()),
                    ));
                }
            }
            ImageVariant::Attention => {
                if image_side % self.patch != 0 {
                    return Err(Error::config("encoder.patch", format!("does not divide image side {image_side}")));
                }
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Encoder architecture bound to a vocabulary size and image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub image_side: usize,
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape")
}

fn init_block(p: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, prefix: &str, dm: usize, hidden: usize) {
    let s = 1.0 / (dm as f64).sqrt();
    p.insert(format!("{prefix}.ln1.g"), Tensor::full(&[dm], 1.0));
    p.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[dm]));
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.attn.w{w}"), normal(rng, &[dm, dm], s));
        p.insert(format!("{prefix}.attn.b{w}"), Tensor::zeros(&[dm]));
    }
    p.insert(format!("{prefix}.ln2.g"), Tensor::full(&[dm], 1.0));
    p.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[dm]));
    p.insert(format!("{prefix}.mlp.w1"), normal(rng, &[dm, hidden], s));
    p.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]));
    p.insert(format!("{prefix}.mlp.w2"), normal(rng, &[hidden, dm], 1.0 / (hidden as f64).sqrt()));
    p.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[dm]));
}

impl EncoderStack {
    pub fn new(config: EncoderConfig, vocab_size: usize, image_side: usize) -> Result<Self> {
        config.validate(image_side)?;
        if vocab_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Invalid("tokenizer vocabulary is empty".into()));
        }
        Ok(Self { config, vocab_size, image_side })
    }

    fn n_patches(&self) -> usize {
        let g = self.image_side / self.config.patch;
        g * g
    }

    /// Width of the image representation before projection.
    pub fn image_width(&self) -> usize {
        match self.config.variant {
            ImageVariant::Conv => *self.config.conv_channels.last().expect("validated"),
            ImageVariant::Attention => self.config.d_model,
        }
    }

    /// Fresh encoder, projection and temperature parameters.
    pub fn init(&self, seed: u64, tau_init: f64) -> Result<ParamStore<f32>> {
        if !(tau_init > 0.0) || !tau_init.is_finite() {
            return Err(Error::config("tau_init", "must be positive"));
        }
        let c = &self.config;
        let dm = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        match c.variant {
            ImageVariant::Conv => {
                let mut cin = 1;
                for (i, &cout) in c.conv_channels.iter().enumerate() {
                    let std = (2.0 / (cin * 9) as f64).sqrt();
                    p.insert(format!("image.conv{i}.w"), normal(&mut rng, &[cout, cin, 3, 3], std));
                    p.insert(format!("image.conv{i}.b"), Tensor::zeros(&[cout]));
                    cin = cout;
                }
            }
            ImageVariant::Attention => {
                let pd = c.patch * c.patch;
                p.insert("image.patch.w", normal(&mut rng, &[pd, dm], 1.0 / (pd as f64).sqrt()));
                p.insert("image.patch.b", Tensor::zeros(&[dm]));
                p.insert("image.pos_emb", normal(&mut rng, &[self.n_patches(), dm], 0.02));
                for l in 0..c.layers {
                    init_block(&mut p, &mut rng, &format!("image.block{l}"), dm, c.mlp_hidden);
                }
                p.insert("image.ln_f.g", Tensor::full(&[dm], 1.0));
                p.insert("image.ln_f.b", Tensor::zeros(&[dm]));
            }
        }
        p.insert(TEXT_EMBEDDING, normal(&mut rng, &[self.vocab_size, dm], 0.02));
        p.insert("text.pos_emb", normal(&mut rng, &[c.max_len, dm], 0.01));
        for l in 0..c.layers {
            init_block(&mut p, &mut rng, &format!("text.block{l}"), dm, c.mlp_hidden);
        }
        p.insert("text.ln_f.g", Tensor::full(&[dm], 1.0));
        p.insert("text.ln_f.b", Tensor::zeros(&[dm]));
        let iw = self.image_width();
        p.insert("proj.image", normal(&mut rng, &[iw, c.d], 1.0 / (iw as f64).sqrt()));
        p.insert("proj.text", normal(&mut rng, &[dm, c.d], 1.0 / (dm as f64).sqrt()));
        p.insert(TAU, Tensor::scalar(tau_init.ln() as f32));
        Ok(p)
    }

    /// Stacks `H x W x 1` images into a `[B,1,H,W]` constant.
    fn image_batch<T: Scalar>(&self, s: &mut Session<'_, T>, images: &[&Tensor<f32>]) -> Result<Var> {
        let side = self.image_side;
        if images.is_empty() {
            return Err(Error::Invalid("empty image batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * side * side);
        for img in images {
            if img.shape() != [side, side, 1] {
                return Err(Error::Invalid(format!(
                    "image encoder expects a {side}x{side}x1 image, got {:?}",
                    img.shape()
                )));
            }
            let (m, sd) = (self.config.pixel_mean, self.config.pixel_std);
            data.extend(img.data().iter().map(|&v| T::c((v as f64 - m) / sd)));
        }
        Ok(s.constant(Tensor::new(vec![images.len(), 1, side, side], data)?))
    }

    /// Conv stages; returns the pooled features `[B, C]` and the last
    /// post-ReLU feature map before its pooling, `[B, C, h, w]`.
    pub fn conv_features<T: Scalar>(&self, s: &mut Session<'_, T>, images: &[&Tensor<f32>]) -> Result<(Var, Var)> {
        if self.config.variant != ImageVariant::Conv {
            return Err(Error::Invalid("conv_features needs the conv image encoder".into()));
        }
        let mut x = self.image_batch(s, images)?;
        let mut last = x;
        for i in 0..self.config.conv_channels.len() {
            let w = s.p(&format!("image.conv{i}.w"))?;
            let b = s.p(&format!("image.conv{i}.b"))?;
            x = s.g.conv2d(x, w, b, 1)?;
            x = s.g.relu(x)?;
            last = x;
            x = s.g.max_pool2(x)?;
        }
        let sh = s.g.shape(x).to_vec();
        let flat = s.g.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
        let pooled = s.g.mean_axis(flat, 2)?;
        Ok((pooled, last))
    }

    /// Patch tokens after the final layer norm, `[B, patches, d_model]`.
    pub fn patch_tokens<T: Scalar>(&self, s: &mut Session<'_, T>, images: &[&Tensor<f32>]) -> Result<Var> {
        if self.config.variant != ImageVariant::Attention {
            return Err(Error::Invalid("patch_tokens needs the attention image encoder".into()));
        }
        let x = self.image_batch(s, images)?;
        let (b, side, p) = (images.len(), self.image_side, self.config.patch);
        let g = side / p;
        let src = s.value(x).data().to_vec();
        let mut patches = Vec::with_capacity(src.len());
        for bi in 0..b {
            let img = &src[bi * side * side..(bi + 1) * side * side];
            for pi in 0..g {
                for pj in 0..g {
                    for y in 0..p {
                        let row = (pi * p + y) * side + pj * p;
                        patches.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
        let np = g * g;
        let dm = self.config.d_model;
        let patches = s.constant(Tensor::new(vec![b * np, p * p], patches)?);
        let t = s.linear(patches, "image.patch.w", Some("image.patch.b"))?;
        let t = s.g.reshape(t, &[b, np, dm])?;
        let pos = s.p("image.pos_emb")?;
        let mut t = s.g.add(t, pos)?;
        for l in 0..self.config.layers {
            t = self.block(s, &format!("image.block{l}"), t, None)?;
        }
        Ok(s.layer_norm(t, "image.ln_f")?)
    }

    /// Image embeddings `[B, d]` (unnormalised).
    pub fn encode_images<T: Scalar>(&self, s: &mut Session<'_, T>, images: &[&Tensor<f32>]) -> Result<Var> {
        let feats = match self.config.variant {
            ImageVariant::Conv => self.conv_features(s, images)?.0,
            ImageVariant::Attention => {
                let t = self.patch_tokens(s, images)?;
                s.g.mean_axis(t, 1)?
            }
        };
        s.linear(feats, "proj.image", None)
    }

    /// Pre-LN transformer block over `x [B, n, d_model]`. `lengths` masks
    /// keys past each sequence's length.
    fn block<T: Scalar>(&self, s: &mut Session<'_, T>, prefix: &str, x: Var, lengths: Option<&[usize]>) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        let (b, n, dm) = (sh[0], sh[1], sh[2]);
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let x2 = s.g.reshape(x, &[b * n, dm])?;
        let a = s.layer_norm(x2, &format!("{prefix}.ln1"))?;
        let heads = |s: &mut Session<'_, T>, w: &str| -> Result<Var> {
            let y = s.linear(a, &format!("{prefix}.attn.w{w}"), Some(&format!("{prefix}.attn.b{w}")))?;
            let y = s.g.reshape(y, &[b, n, h, dh])?;
            let y = s.g.permute(y, &[0, 2, 1, 3])?;
            Ok(s.g.reshape(y, &[b * h, n, dh])?)
        };
        let q = heads(s, "q")?;
        let k = heads(s, "k")?;
        let v = heads(s, "v")?;
        let scores = s.g.bmm(q, k, true)?;
        let mut scores = s.g.scale(scores, T::c(1.0 / (dh as f64).sqrt()))?;
        if let Some(lens) = lengths.filter(|l| l.iter().any(|&len| len < n)) {
            let mut mask = vec![T::zero(); b * h * n * n];
            for (bi, &len) in lens.iter().enumerate() {
                for hi in 0..h {
                    let base = (bi * h + hi) * n * n;
                    for i in 0..n {
                        for j in len..n {
                            mask[base + i * n + j] = T::c(-1e9);
                        }
                    }
                }
            }
            let mask = s.constant(Tensor::new(vec![b * h, n, n], mask)?);
            scores = s.g.add(scores, mask)?;
        }
        let attn = s.g.softmax_rows(scores, T::one())?;
        let o = s.g.bmm(attn, v, false)?;
        let o = s.g.reshape(o, &[b, h, n, dh])?;
        let o = s.g.permute(o, &[0, 2, 1, 3])?;
        let o = s.g.reshape(o, &[b * n, dm])?;
        let o = s.linear(o, &format!("{prefix}.attn.wo"), Some(&format!("{prefix}.attn.bo")))?;
        let x2 = s.g.add(x2, o)?;
        let m = s.layer_norm(x2, &format!("{prefix}.ln2"))?;
        let m = s.linear(m, &format!("{prefix}.mlp.w1"), Some(&format!("{prefix}.mlp.b1")))?;
        let m = s.g.relu(m)?;
        let m = s.linear(m, &format!("{prefix}.mlp.w2"), Some(&format!("{prefix}.mlp.b2")))?;
        let x2 = s.g.add(x2, m)?;
        Ok(s.g.reshape(x2, &[b, n, dm])?)
    }

    /// Text embeddings `[B, d]` from embedding sequences `x [B, n, d_model]`.
    /// Sequence `b` occupies its first `lengths[b]` positions and is pooled at
    /// its last one.
    pub fn encode_embeddings<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != self.config.d_model {
            return Err(Error::Invalid(format!(
                "text encoder expects [batch, len, {}] embeddings, got {sh:?}",
                self.config.d_model
            )));
        }
        let (b, n) = (sh[0], sh[1]);
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > n) || n > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sequence lengths {lengths:?} do not fit a batch of {b} x {n} (max length {})",
                self.config.max_len
            )));
        }
        let pos = s.p("text.pos_emb")?;
        let pos = s.g.narrow(pos, 0, 0, n)?;
        let mut t = s.g.add(x, pos)?;
        for l in 0..self.config.layers {
            t = self.block(s, &format!("text.block{l}"), t, Some(lengths))?;
        }
        let t = s.g.reshape(t, &[b * n, self.config.d_model])?;
        let idx: Vec<usize> = lengths.iter().enumerate().map(|(i, &l)| i * n + l - 1).collect();
        let pooled = s.g.gather(t, &idx)?;
        let pooled = s.layer_norm(pooled, "text.ln_f")?;
        s.linear(pooled, "proj.text", None)
    }

    /// Looks token ids up in the embedding table: `[B, n, d_model]` plus the
    /// unpadded lengths, where `n` is the longest unpadded sequence.
    pub fn embed_tokens<T: Scalar>(&self, s: &mut Session<'_, T>, seqs: &[Vec<u32>]) -> Result<(Var, Vec<usize>)> {
        let lengths: Vec<usize> = seqs.iter().map(|q| unpadded_len(q)).collect();
        let n = lengths.iter().copied().max().unwrap_or(0);
        if seqs.is_empty() || lengths.contains(&0) {
            return Err(Error::Invalid("cannot encode an empty token sequence".into()));
        }
        let mut idx = Vec::with_capacity(seqs.len() * n);
        for q in seqs {
            for i in 0..n {
                let id = q.get(i).copied().unwrap_or(PAD) as usize;
                if id >= self.vocab_size {
                    return Err(Error::Invalid(format!("token id {id} outside vocabulary of {}", self.vocab_size)));
                }
                idx.push(id);
            }
        }
        let table = s.p(TEXT_EMBEDDING)?;
        let e = s.g.gather(table, &idx)?;
        let e = s.g.reshape(e, &[seqs.len(), n, self.config.d_model])?;
        Ok((e, lengths))
    }

    pub fn encode_tokens<T: Scalar>(&self, s: &mut Session<'_, T>, seqs: &[Vec<u32>]) -> Result<Var> {
        let (e, lengths) = self.embed_tokens(s, seqs)?;
        self.encode_embeddings(s, e, &lengths)
    }

    /// One image to its `d`-dimensional embedding.
    pub fn encode_image(&self, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut s = Session::frozen(params);
        let v = self.encode_images(&mut s, &[image])?;
        Ok(s.value(v).clone().reshape(&[self.config.d])?)
    }

    /// One token sequence to its `d`-dimensional embedding.
    pub fn encode_text(&self, params: &ParamStore<f32>, ids: &[u32]) -> Result<Tensor<f32>> {
        let mut s = Session::frozen(params);
        let v = self.encode_tokens(&mut s, &[ids.to_vec()])?;
        Ok(s.value(v).clone().reshape(&[self.config.d])?)
    }

    /// One embedding sequence `[n, d_model]` to its `d`-dimensional embedding.
    pub fn encode_text_embeddings(&self, params: &ParamStore<f32>, seq: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = seq.shape()[0];
        let mut s = Session::frozen(params);
        let x = s.constant(seq.clone());
        let x = s.g.reshape(x, &[1, n, seq.last_dim()]).map_err(|_| {
            Error::Invalid(format!("text encoder expects [len, {}] embeddings, got {:?}", self.config.d_model, seq.shape()))
        })?;
        let v = self.encode_embeddings(&mut s, x, &[n])?;
        Ok(s.value(v).clone().reshape(&[self.config.d])?)
    }

    /// Embeds many images in chunks without recording gradients.
    pub fn embed_images(&self, params: &ParamStore<f32>, images: &[&Tensor<f32>], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(chunk.max(1)) {
            let mut s = Session::frozen(params);
            let v = self.encode_images(&mut s, c)?;
            out.extend(s.value(v).data().chunks(self.config.d).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

/// `true` for parameters owned by the encoders, projections or temperature.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("image.") || name.starts_with("text.") || name.starts_with("proj.") || name == TAU
}
