//! Read-only analyses of trained weights: nearest words to learned vectors,
//! per-image context similarity, parameter and FLOP accounting, and
//! last-layer activation maps.

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, EncoderStack, ImageVariant, Session, Tokenizer, TAU};
use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tensor};
use crate::promptgen::{metanet_forward, PromptGenerator, CLASS_PREFIX, CONTEXT, META_PREFIX};

/// Published footprint of the full-scale prompt generator, quoted as-is.
pub const REFERENCE_PARAMS: u64 = 86_016;
pub const REFERENCE_FLOPS: u64 = 86_112;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordNeighbor {
    pub token: String,
    pub distance: f64,
    pub rank: usize,
}

/// The `k` vocabulary words whose token embeddings are closest to `query`
/// in Euclidean distance, ties to the lower id. Special tokens are skipped.
pub fn nearest_words(query: &[f32], table: &Tensor<f32>, tokenizer: &Tokenizer, k: usize) -> Result<Vec<WordNeighbor>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if table.rank() != 2 || table.shape()[1] != query.len() {
        return Err(Error::Invalid(format!("query of width {} against table {:?}", query.len(), table.shape())));
    }
    let rows = table.shape()[0].min(tokenizer.vocab_size());
    let mut cands: Vec<(f64, usize)> = (0..rows)
        .filter(|&id| !Tokenizer::is_special(id as u32))
        .map(|id| {
            let d2: f64 = table.row(id).iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (d2.sqrt(), id)
        })
        .collect();
    if k > cands.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds the {} searchable words", cands.len())));
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cands
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (distance, id))| WordNeighbor { token: tokenizer.word(id as u32).unwrap_or("<unk>").to_string(), distance, rank: i + 1 })
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Flattened `[v_1+π, …, v_m+π]` of one image embedding.
pub fn conditioned_context(gen: &PromptGenerator, image_embedding: &[f32]) -> Result<Vec<f64>> {
    let ctx = gen.context();
    let dm = ctx.shape()[1];
    let pi = if gen.metanet {
        let mut s = Session::frozen(&gen.params);
        let ie = s.constant(Tensor::new(vec![1, image_embedding.len()], image_embedding.to_vec())?);
        let v = metanet_forward(&mut s, ie)?;
        s.value(v).data().iter().map(|&x| x as f64).collect()
    } else {
        vec![0.0; dm]
    };
    Ok(ctx.data().iter().enumerate().map(|(i, &v)| v as f64 + pi[i % dm]).collect())
}

/// Pairwise cosine between the flattened conditioned contexts of `images`.
pub fn context_similarity_matrix(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    images: &[&Tensor<f32>],
) -> Result<Vec<Vec<f64>>> {
    if images.len() < 2 {
        return Err(Error::Invalid("context similarity needs at least 2 images".into()));
    }
    let emb = stack.embed_images(encoders, images, 32)?;
    let ctx = emb.iter().map(|e| conditioned_context(gen, e)).collect::<Result<Vec<_>>>()?;
    Ok(ctx.iter().map(|a| ctx.iter().map(|b| cosine(a, b)).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFootprint {
    pub component: String,
    pub params: u64,
    pub flops: u64,
    /// Share of the whole model's parameters.
    pub fraction: f64,
}

/// What one forward pass classifies: one image against `classes` prompts of
/// `prompt_len` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintInput {
    pub image_side: usize,
    pub classes: usize,
    pub prompt_len: usize,
}

pub const COMPONENTS: [&str; 7] =
    ["image-encoder", "text-encoder", "projection", "temperature", "meta-net", "context", "class-embeddings"];

/// Components that make up the prompt generator.
pub const PROMPT_COMPONENTS: [&str; 3] = ["meta-net", "context", "class-embeddings"];

fn component_of(name: &str) -> Result<&'static str> {
    Ok(match name {
        n if n.starts_with("image.") => "image-encoder",
        n if n.starts_with("text.") => "text-encoder",
        n if n.starts_with("proj.") => "projection",
        n if n == TAU => "temperature",
        n if n.starts_with(META_PREFIX) => "meta-net",
        n if n == CONTEXT => "context",
        n if n.starts_with(CLASS_PREFIX) => "class-embeddings",
        n => return Err(Error::Invalid(format!("tensor `{n}` belongs to no known component"))),
    })
}

/// `2·in·out` per token for the weights, plus `out` when there is a bias.
fn affine(tokens: usize, inp: usize, out: usize, bias: bool) -> u64 {
    (tokens * (2 * inp * out + if bias { out } else { 0 })) as u64
}

fn transformer_flops(c: &EncoderConfig, n: usize) -> u64 {
    let dm = c.d_model;
    let per_block = 4 * affine(n, dm, dm, true)
        + 2 * (2 * n * n * dm) as u64
        + affine(n, dm, c.mlp_hidden, true)
        + affine(n, c.mlp_hidden, dm, true);
    per_block * c.layers as u64
}

fn image_flops(c: &EncoderConfig, side: usize) -> u64 {
    match c.variant {
        ImageVariant::Conv => {
            let (mut cin, mut s, mut total) = (1usize, side, 0u64);
            for &cout in &c.conv_channels {
                total += ((2 * cin * cout * 9 + cout) * s * s) as u64;
                cin = cout;
                s /= 2;
            }
            total
        }
        ImageVariant::Attention => {
            let np = (side / c.patch).pow(2);
            affine(np, c.patch * c.patch, c.d_model, true) + transformer_flops(c, np)
        }
    }
}

/// Exact parameter counts per component of `store`, with FLOPs for one
/// forward pass under the convention: 2 × multiply-accumulates for affine
/// and attention products, one per bias add, everything else free.
pub fn count_footprint(
    store: &ParamStore<f32>,
    config: &EncoderConfig,
    input: FootprintInput,
) -> Result<Vec<ComponentFootprint>> {
    let mut params = [0u64; COMPONENTS.len()];
    for (name, t) in store.iter() {
        let c = component_of(name)?;
        params[COMPONENTS.iter().position(|&x| x == c).expect("listed")] += t.numel() as u64;
    }
    let total: u64 = params.iter().sum();
    let meta_flops = match (store.get(&format!("{META_PREFIX}w1")), store.get(&format!("{META_PREFIX}w2"))) {
        (Some(w1), Some(w2)) => affine(1, w1.shape()[0], w1.shape()[1], true) + affine(1, w2.shape()[0], w2.shape()[1], true),
        _ => 0,
    };
    let image_width = match config.variant {
        ImageVariant::Conv => config.conv_channels.last().copied().unwrap_or(1),
        ImageVariant::Attention => config.d_model,
    };
    let flops = [
        image_flops(config, input.image_side),
        input.classes as u64 * transformer_flops(config, input.prompt_len),
        affine(1, image_width, config.d, false) + affine(input.classes, config.d_model, config.d, false),
        0,
        meta_flops,
        0,
        0,
    ];
    Ok(COMPONENTS
        .iter()
        .zip(params.iter().zip(flops))
        .map(|(&component, (&p, f))| ComponentFootprint {
            component: component.to_string(),
            params: p,
            flops: f,
            fraction: if total == 0 { 0.0 } else { p as f64 / total as f64 },
        })
        .collect())
}

/// Summed parameters and FLOPs of the prompt-generator components.
pub fn prompt_generator_total(rows: &[ComponentFootprint]) -> (u64, u64) {
    rows.iter()
        .filter(|r| PROMPT_COMPONENTS.contains(&r.component.as_str()))
        .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
}

pub fn footprint_csv(rows: &[ComponentFootprint], config_hash: &str) -> String {
    let mut out = format!("# config-hash: {config_hash}\ncomponent,params,flops,fraction\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.9}\n", r.component, r.params, r.flops, r.fraction));
    }
    let (p, f) = prompt_generator_total(rows);
    let whole: u64 = rows.iter().map(|r| r.params).sum();
    let whole_flops: u64 = rows.iter().map(|r| r.flops).sum();
    out.push_str(&format!("prompt-generator,{p},{f},{:.9}\n", if whole == 0 { 0.0 } else { p as f64 / whole as f64 }));
    out.push_str(&format!("whole-model,{whole},{whole_flops},1.000000000\n"));
    out.push_str(&format!(
        "# reference-scale prompt generator (published figure, not recomputed): {} parameters, {} FLOPs\n",
        group_thousands(REFERENCE_PARAMS),
        group_thousands(REFERENCE_FLOPS)
    ));
    out
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Min-max scales to [0, 1]; a constant input maps to all zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Nearest-neighbour upsampling of an `h x w` grid to `out_h x out_w`.
pub fn upsample_nearest(v: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let si = i * h / out_h;
        for j in 0..out_w {
            out.push(v[si * w + j * w / out_w]);
        }
    }
    out
}

/// Heatmap `side x side` in [0, 1]: the channel mean of the last conv
/// feature map, or the per-patch token norm for the attention encoder.
pub fn activation_map(stack: &EncoderStack, encoders: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f64>> {
    let side = stack.image_side;
    let mut s = Session::frozen(encoders);
    let (grid, h, w) = match stack.config.variant {
        ImageVariant::Conv => {
            let (_, last) = stack.conv_features(&mut s, &[image])?;
            let sh = s.g.shape(last).to_vec();
            let (c, h, w) = (sh[1], sh[2], sh[3]);
            let data = s.value(last).data();
            let mean: Vec<f64> =
                (0..h * w).map(|p| (0..c).map(|ch| data[ch * h * w + p] as f64).sum::<f64>() / c as f64).collect();
            (mean, h, w)
        }
        ImageVariant::Attention => {
            let t = stack.patch_tokens(&mut s, &[image])?;
            let sh = s.g.shape(t).to_vec();
            let g = (sh[1] as f64).sqrt() as usize;
            let norms: Vec<f64> = s
                .value(t)
                .data()
                .chunks(sh[2])
                .map(|r| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
                .collect();
            (norms, g, g)
        }
    };
    let up = upsample_nearest(&min_max(&grid), h, w, side, side);
    Ok(Tensor::new(vec![side, side], up)?)
}

/// Rows of comma-separated values.
pub fn grid_csv(rows: &[Vec<f64>]) -> String {
    rows.iter().map(|r| r.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",") + "\n").collect()
}

/// Binary 8-bit PGM of values in [0, 1].
pub fn pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn neighbors_csv(label: &str, neighbors: &[WordNeighbor]) -> String {
    let mut out = String::new();
    for n in neighbors {
        out.push_str(&format!("{label},{},{},{:.6}\n", n.rank, n.token, n.distance));
    }
    out
}
