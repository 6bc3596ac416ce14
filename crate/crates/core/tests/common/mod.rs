//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlprompt::grad::{GradError, Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, either sign.
pub fn rand_nonzero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>;

fn weighted_loss(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Var {
    if g.shape(out).is_empty() {
        return out;
    }
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv).unwrap();
    g.sum(p).unwrap()
}

fn out_shape(inputs: &[Tensor<f64>], build: &Build) -> Vec<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars).unwrap();
    g.shape(out).to_vec()
}

fn eval(inputs: &[Tensor<f64>], build: &Build, w: &Tensor<f64>, track: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = weighted_loss(&mut g, out, w);
    let value = g.value(loss).item();
    if !track {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.grad(v).cloned()).collect())
}

/// Largest relative error between the analytic gradient of
/// `sum(build(inputs) * W)` (W random) and central finite differences, over
/// all inputs. Relative error is `|a - n| / max(|a|, |n|, 1e-3)` per entry.
pub fn grad_check(r: &mut ChaCha8Rng, inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let shape = out_shape(inputs, build);
    let w = if shape.is_empty() { Tensor::scalar(1.0) } else { rand_tensor(r, &shape, -1.0, 1.0) };
    let (_, grads) = eval(inputs, build, &w, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(x.shape());
        let a = grads[k].clone().unwrap_or(zeros);
        for e in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let n = (eval(&plus, build, &w, false).0 - eval(&minus, build, &w, false).0) / (2.0 * h);
            let ad = a.data()[e];
            let rel = (ad - n).abs() / ad.abs().max(n.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

// ---- scalar-loop oracles --------------------------------------------------

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &x in xs {
        if x > mx {
            mx = x;
        }
    }
    let mut out = Vec::new();
    let mut z = 0.0;
    for &x in xs {
        let e = (x - mx).exp();
        out.push(e);
        z += e;
    }
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}

/// Label-similarity matrix and both target directions, entry by entry.
pub fn oracle_gt(img: &[Vec<f64>], txt: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let s: Vec<Vec<f64>> = img.iter().map(|a| txt.iter().map(|b| cosine(a, b)).collect()).collect();
    let (oracle_i2t, oracle_t2i) = oracle_directions(&s, 1.0);
    (s, oracle_i2t, oracle_t2i)
}

/// Row softmax and column softmax of `s / tau`, both indexed `[i][j]`.
pub fn oracle_directions(s: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = s.len();
    let m = s[0].len();
    let rows: Vec<Vec<f64>> = s.iter().map(|r| softmax(&r.iter().map(|v| v / tau).collect::<Vec<_>>())).collect();
    let mut cols = vec![vec![0.0; m]; n];
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|i| s[i][j] / tau).collect();
        let p = softmax(&col);
        for i in 0..n {
            cols[i][j] = p[i];
        }
    }
    (rows, cols)
}

/// The symmetric semantic loss written as two explicit double loops.
pub fn oracle_semantic_loss(y_i2t: &[Vec<f64>], y_t2i: &[Vec<f64>], p_i2t: &[Vec<f64>], p_t2i: &[Vec<f64>]) -> f64 {
    let n = y_i2t.len();
    let m = y_i2t[0].len();
    let mut a = 0.0;
    for i in 0..n {
        for j in 0..m {
            a += y_i2t[i][j] * p_i2t[i][j].max(1e-12).ln();
        }
    }
    let mut b = 0.0;
    for j in 0..m {
        for i in 0..n {
            b += y_t2i[i][j] * p_t2i[i][j].max(1e-12).ln();
        }
    }
    -0.5 * (a / n as f64 + b / m as f64)
}

pub fn entropy_mean(y_i2t: &[Vec<f64>], y_t2i: &[Vec<f64>]) -> f64 {
    oracle_semantic_loss(y_i2t, y_t2i, y_i2t, y_t2i)
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

// ---- gradient suite ---------------------------------------------------------

use vlprompt::corpus::{gt_similarity, LabelVector};
use vlprompt::pretrain::{predicted_similarity, semantic_loss};

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)>;

fn case(f: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) + 'static) -> Case {
    Box::new(f)
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<LabelVector> {
    (0..n)
        .map(|_| {
            let k = r.random_range(0..3);
            let f: Vec<usize> = (0..k).map(|_| r.random_range(1..14)).collect();
            LabelVector::from_findings(&f)
        })
        .collect()
}

fn distribution(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut d = Vec::new();
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| r.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        d.extend(raw.iter().map(|v| v / z));
    }
    Tensor::new(vec![rows, cols], d).unwrap()
}

/// Every differentiable primitive plus the two composed losses.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    let u = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s, -1.5, 1.5);
    vec![
        ("matmul", case(move |r| (vec![u(r, &[3, 4]), u(r, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))))),
        ("bmm", case(move |r| (vec![u(r, &[2, 3, 4]), u(r, &[2, 4, 2])], Box::new(|g, v| g.bmm(v[0], v[1], false))))),
        ("bmm_transposed", case(move |r| (vec![u(r, &[2, 3, 4]), u(r, &[2, 5, 4])], Box::new(|g, v| g.bmm(v[0], v[1], true))))),
        ("add", case(move |r| (vec![u(r, &[3, 4]), u(r, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))))),
        ("add_broadcast", case(move |r| (vec![u(r, &[2, 3, 4]), u(r, &[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))))),
        ("sub", case(move |r| (vec![u(r, &[3, 4]), u(r, &[4])], Box::new(|g, v| g.sub(v[0], v[1]))))),
        ("mul", case(move |r| (vec![u(r, &[3, 4]), u(r, &[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))))),
        ("mul_scalar_broadcast", case(move |r| (vec![u(r, &[3, 4]), u(r, &[])], Box::new(|g, v| g.mul(v[0], v[1]))))),
        ("div", case(move |r| (vec![u(r, &[3, 4]), rand_nonzero(r, &[3, 4])], Box::new(|g, v| g.div(v[0], v[1]))))),
        ("div_scalar_broadcast", case(move |r| (vec![u(r, &[3, 4]), rand_nonzero(r, &[])], Box::new(|g, v| g.div(v[0], v[1]))))),
        ("scale", case(move |r| {
            let s = r.random_range(-2.0..2.0);
            (vec![u(r, &[3, 4])], Box::new(move |g, v| g.scale(v[0], s)))
        })),
        ("relu", case(move |r| (vec![rand_nonzero(r, &[3, 4])], Box::new(|g, v| g.relu(v[0]))))),
        ("exp", case(move |r| (vec![u(r, &[3, 4])], Box::new(|g, v| g.exp(v[0]))))),
        ("ln", case(move |r| (vec![rand_tensor(r, &[3, 4], 0.2, 3.0)], Box::new(|g, v| g.ln(v[0]))))),
        ("ln_floor", case(move |r| {
            let mut t = rand_tensor(r, &[3, 4], 0.2, 3.0);
            t.data_mut()[0] = 0.01;
            (vec![t], Box::new(|g, v| g.ln_floor(v[0], 0.1)))
        })),
        ("softmax_rows", case(move |r| {
            let temp = r.random_range(0.3..2.0);
            (vec![u(r, &[3, 5])], Box::new(move |g, v| g.softmax_rows(v[0], temp)))
        })),
        ("l2_normalize_rows", case(move |r| (vec![u(r, &[3, 4])], Box::new(|g, v| g.l2_normalize_rows(v[0]))))),
        ("layer_norm", case(move |r| {
            (vec![u(r, &[3, 5]), u(r, &[5]), u(r, &[5])], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)))
        })),
        ("softmax_cross_entropy", case(move |r| {
            let t = distribution(r, 3, 4);
            (vec![u(r, &[3, 4])], Box::new(move |g, v| g.softmax_cross_entropy(v[0], &t)))
        })),
        ("gather", case(move |r| {
            let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            (vec![u(r, &[5, 3])], Box::new(move |g, v| g.gather(v[0], &idx)))
        })),
        ("sum", case(move |r| (vec![u(r, &[3, 4])], Box::new(|g, v| g.sum(v[0]))))),
        ("mean", case(move |r| (vec![u(r, &[3, 4])], Box::new(|g, v| g.mean(v[0]))))),
        ("sum_axis", case(move |r| (vec![u(r, &[2, 3, 4])], Box::new(|g, v| g.sum_axis(v[0], 1))))),
        ("mean_axis", case(move |r| (vec![u(r, &[2, 3, 4])], Box::new(|g, v| g.mean_axis(v[0], 0))))),
        ("transpose", case(move |r| (vec![u(r, &[3, 4])], Box::new(|g, v| g.transpose(v[0]))))),
        ("permute", case(move |r| (vec![u(r, &[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))))),
        ("reshape", case(move |r| (vec![u(r, &[2, 3, 4])], Box::new(|g, v| g.reshape(v[0], &[6, 4]))))),
        ("narrow", case(move |r| (vec![u(r, &[2, 5, 3])], Box::new(|g, v| g.narrow(v[0], 1, 1, 3))))),
        ("concat", case(move |r| (vec![u(r, &[2, 3]), u(r, &[2, 2])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))))),
        ("conv2d", case(move |r| {
            (vec![u(r, &[2, 2, 5, 5]), u(r, &[3, 2, 3, 3]), u(r, &[3])], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1)))
        })),
        ("max_pool2", case(move |r| (vec![u(r, &[1, 2, 4, 4])], Box::new(|g, v| g.max_pool2(v[0]))))),
        ("semantic_loss", case(move |r| {
            let (il, tl) = (random_labels(r, 4), random_labels(r, 5));
            let target = gt_similarity::<f64>(&il, &tl).unwrap();
            let log_tau = Tensor::scalar(r.random_range(-2.7..0.0));
            (
                vec![u(r, &[4, 3]), u(r, &[5, 3]), log_tau],
                Box::new(move |g, v| {
                    let tau = g.exp(v[2])?;
                    let p = predicted_similarity(g, v[0], v[1], tau).map_err(|e| GradError::Invalid(e.to_string()))?;
                    semantic_loss(g, &p, &target).map_err(|e| GradError::Invalid(e.to_string()))
                }),
            )
        })),
        ("class_probability_loss", case(move |r| {
            let mut t = vec![0.0; 4 * 3];
            for i in 0..4 {
                t[i * 3 + r.random_range(0..3)] = 1.0;
            }
            let t = Tensor::new(vec![4, 3], t).unwrap();
            let log_tau = Tensor::scalar(r.random_range(-2.7..0.0));
            (
                vec![u(r, &[4, 3]), u(r, &[3, 3]), log_tau],
                Box::new(move |g, v| {
                    let tau = g.exp(v[2])?;
                    let i = g.l2_normalize_rows(v[0])?;
                    let c = g.l2_normalize_rows(v[1])?;
                    let ct = g.transpose(c)?;
                    let cos = g.matmul(i, ct)?;
                    let logits = g.div(cos, tau)?;
                    g.softmax_cross_entropy(logits, &t)
                }),
            )
        })),
    ]
}

/// Worst relative error of each case over `n` random instances.
pub fn gradient_suite(n: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    gradient_cases()
        .into_iter()
        .map(|(name, make)| {
            let worst = (0..n).map(|_| {
                let (inputs, build) = make(&mut r);
                grad_check(&mut r, &inputs, &*build)
            });
            (name, worst.fold(0.0, f64::max))
        })
        .collect()
}

// ---- loss identities ---------------------------------------------------------

use vlprompt::corpus::GtTargets;
use vlprompt::pretrain::PredictedSimilarity;

/// Semantic loss of fixed prediction tensors against fixed targets.
pub fn loss_of(target: &GtTargets<f64>, p_i2t: &Tensor<f64>, p_t2i: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(p_i2t.clone());
    let b = g.constant(p_t2i.clone());
    let pred = PredictedSimilarity { cosine: a, img_to_txt: a, txt_to_img: b };
    let l = semantic_loss(&mut g, &pred, target).unwrap();
    g.value(l).item()
}

#[derive(Debug, Clone, Copy)]
pub struct LossIdentities {
    /// Worst |L(y, y) - mean target entropy|.
    pub equal_err: f64,
    /// Worst |L(uniform, uniform) - ln N| over square N x N batches.
    pub uniform_err: f64,
    /// Smallest L(y, ŷ) - mean target entropy over random instances.
    pub min_gibbs_gap: f64,
    pub gibbs_instances: usize,
}

pub fn loss_identities(instances: usize, seed: u64) -> LossIdentities {
    let mut r = rng(seed);
    let mut equal_err: f64 = 0.0;
    let mut uniform_err: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    for n in 2..=16 {
        let u = Tensor::full(&[n, n], 1.0 / n as f64);
        let target = GtTargets { similarity: u.clone(), img_to_txt: u.clone(), txt_to_img: u.clone() };
        uniform_err = uniform_err.max((loss_of(&target, &u, &u) - (n as f64).ln()).abs());
    }
    for _ in 0..instances {
        let (n, m) = (r.random_range(2..=8), r.random_range(2..=8));
        let target = gt_similarity::<f64>(&random_labels(&mut r, n), &random_labels(&mut r, m)).unwrap();
        let (yi, yt) = (rows(&target.img_to_txt), rows(&target.txt_to_img));
        let h = entropy_mean(&yi, &yt);
        equal_err = equal_err.max((loss_of(&target, &target.img_to_txt, &target.txt_to_img) - h).abs());

        let d = r.random_range(2..=8);
        let mut g = Graph::new();
        let ie = g.constant(rand_tensor(&mut r, &[n, d], -1.0, 1.0));
        let te = g.constant(rand_tensor(&mut r, &[m, d], -1.0, 1.0));
        let tau = g.constant(Tensor::scalar(r.random_range(0.05..2.0)));
        let pred = predicted_similarity(&mut g, ie, te, tau).unwrap();
        let l = semantic_loss(&mut g, &pred, &target).unwrap();
        min_gap = min_gap.min(g.value(l).item() - h);
    }
    LossIdentities { equal_err, uniform_err, min_gibbs_gap: min_gap, gibbs_instances: instances }
}

// ---- oracle equivalence -------------------------------------------------------

use vlprompt::corpus::ObservationVocabulary;
use vlprompt::encoders::{EncoderStack, Session, Tokenizer, TAU};
use vlprompt::introspect::nearest_words;
use vlprompt::promptgen::{class_logits, classify, PromptConfig, PromptGenerator, CONTEXT, META_B1, META_B2, META_W1, META_W2};

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// Worst deviation of `gt_similarity` (S and both directions) from the
/// scalar-loop oracle.
pub fn gt_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, m) = (r.random_range(1..=8), r.random_range(1..=8));
        let (il, tl) = (random_labels(&mut r, n), random_labels(&mut r, m));
        let t = gt_similarity::<f64>(&il, &tl).unwrap();
        let iv: Vec<Vec<f64>> = il.iter().map(|l| l.as_f64().to_vec()).collect();
        let tv: Vec<Vec<f64>> = tl.iter().map(|l| l.as_f64().to_vec()).collect();
        let (s, yi, yt) = oracle_gt(&iv, &tv);
        worst = worst
            .max(max_abs_diff(&rows(&t.similarity), &s))
            .max(max_abs_diff(&rows(&t.img_to_txt), &yi))
            .max(max_abs_diff(&rows(&t.txt_to_img), &yt));
    }
    worst
}

/// Worst deviation of `predicted_similarity` (cosines and both softmax
/// directions at random τ) from the scalar-loop oracle.
pub fn predicted_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, m, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let a = rand_nonzero(&mut r, &[n, d]);
        let b = rand_nonzero(&mut r, &[m, d]);
        let tau = r.random_range(0.02..2.0);
        let mut g = Graph::new();
        let (ie, te) = (g.constant(a.clone()), g.constant(b.clone()));
        let t = g.constant(Tensor::scalar(tau));
        let p = predicted_similarity(&mut g, ie, te, t).unwrap();
        let s: Vec<Vec<f64>> = rows(&a).iter().map(|x| rows(&b).iter().map(|y| cosine(x, y)).collect()).collect();
        let (pi, pt) = oracle_directions(&s, tau);
        worst = worst
            .max(max_abs_diff(&rows(g.value(p.cosine)), &s))
            .max(max_abs_diff(&rows(g.value(p.img_to_txt)), &pi))
            .max(max_abs_diff(&rows(g.value(p.txt_to_img)), &pt));
    }
    worst
}

/// Worst deviation of `semantic_loss` from the double-loop oracle on random
/// label targets and random predicted distributions.
pub fn loss_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, m) = (r.random_range(2..=8), r.random_range(2..=8));
        let target = gt_similarity::<f64>(&random_labels(&mut r, n), &random_labels(&mut r, m)).unwrap();
        let pi = distribution(&mut r, n, m);
        let cols = distribution(&mut r, m, n);
        let mut pt = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                pt[i * m + j] = cols.data()[j * n + i];
            }
        }
        let pt = Tensor::new(vec![n, m], pt).unwrap();
        let want = oracle_semantic_loss(&rows(&target.img_to_txt), &rows(&target.txt_to_img), &rows(&pi), &rows(&pt));
        worst = worst.max((loss_of(&target, &pi, &pt) - want).abs());
    }
    worst
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// Class probabilities written out per (image, class): the Meta-Net as
/// explicit loops, each prompt encoded on its own, cosine and softmax by hand.
fn classify_oracle(stack: &EncoderStack, enc64: &vlprompt::grad::ParamStore<f64>, gen: &PromptGenerator, ie: &[f64], classes: &[usize]) -> Vec<f64> {
    let p = gen.params.cast::<f64>();
    let ctx = p.get(CONTEXT).unwrap();
    let (m, dm) = (ctx.shape()[0], ctx.shape()[1]);
    let mut pi = vec![0.0; dm];
    if gen.metanet {
        let (w1, b1, w2, b2) = (p.get(META_W1).unwrap(), p.get(META_B1).unwrap(), p.get(META_W2).unwrap(), p.get(META_B2).unwrap());
        let h = w1.shape()[1];
        let mut hid = vec![0.0; h];
        for a in 0..h {
            let mut acc = b1.data()[a];
            for (i, x) in ie.iter().enumerate() {
                acc += x * w1.data()[i * h + a];
            }
            hid[a] = acc.max(0.0);
        }
        for j in 0..dm {
            let mut acc = b2.data()[j];
            for a in 0..h {
                acc += hid[a] * w2.data()[a * dm + j];
            }
            pi[j] = acc;
        }
    }
    let tau = (enc64.get(TAU).unwrap().item()).exp();
    let mut logits = Vec::new();
    for &k in classes {
        let mut seq = Vec::with_capacity((m + 1) * dm);
        for r in 0..m {
            for j in 0..dm {
                seq.push(ctx.data()[r * dm + j] + pi[j]);
            }
        }
        seq.extend_from_slice(p.get(&vlprompt::promptgen::class_param(k)).unwrap().data());
        let mut s = Session::frozen(enc64);
        let x = s.constant(Tensor::new(vec![1, m + 1, dm], seq).unwrap());
        let te = stack.encode_embeddings(&mut s, x, &[m + 1]).unwrap();
        logits.push(cosine(ie, s.value(te).data()) / tau);
    }
    softmax(&logits)
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyOracle {
    /// Worst probability deviation of the batched float64 path.
    pub prob_err: f64,
    /// Images where the float32 `classify` argmax differs from the oracle's.
    pub argmax_mismatches: usize,
    pub images: usize,
}

/// Random encoders and generators, up to 8 images against up to 8 classes,
/// with and without the Meta-Net.
pub fn classify_oracle_check(instances: usize, seed: u64) -> ClassifyOracle {
    let mut r = rng(seed);
    let vocab = ObservationVocabulary::standard();
    let tok = Tokenizer::standard(&vocab, 32).unwrap();
    let stack = EncoderStack::new(Default::default(), tok.vocab_size(), 32).unwrap();
    let d = stack.config.d;
    let mut out = ClassifyOracle { prob_err: 0.0, argmax_mismatches: 0, images: 0 };
    for inst in 0..instances {
        let enc = stack.init(seed + inst as u64, r.random_range(0.05..1.0)).unwrap();
        let enc64 = enc.cast::<f64>();
        let k = r.random_range(2..=8);
        let mut classes: Vec<usize> = (0..14).collect();
        classes.shuffle(&mut r);
        classes.truncate(k);
        let rows_: Vec<(usize, Tensor<f32>)> = classes
            .iter()
            .map(|&c| (c, rand_tensor(&mut r, &[stack.config.d_model], -0.5, 0.5).cast::<f32>()))
            .collect();
        let cfg = PromptConfig { m: r.random_range(1..=8), ..PromptConfig::default() };
        let mut gen = PromptGenerator::init(&stack, &cfg, inst % 2 == 0, &rows_, seed ^ inst as u64).unwrap();
        // Larger Meta-Net weights so π visibly shifts the contexts.
        let w2 = gen.params.get_mut(META_W2).unwrap();
        w2.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let b = r.random_range(1..=8);
        let emb: Vec<Vec<f32>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();

        let gen64 = gen.params.cast::<f64>();
        let mut s = Session::layered(vec![&gen64, &enc64], |_| false);
        let flat: Vec<f64> = emb.iter().flatten().map(|&x| x as f64).collect();
        let ie = s.constant(Tensor::new(vec![b, d], flat).unwrap());
        let logits = class_logits(&stack, &mut s, gen.metanet, ie, &classes).unwrap();
        let probs = s.g.softmax_rows(logits, 1.0).unwrap();
        let batched = rows(s.value(probs));
        let single = classify(&stack, &enc, &gen, &emb, &classes).unwrap();
        for i in 0..b {
            let e: Vec<f64> = emb[i].iter().map(|&x| x as f64).collect();
            let want = classify_oracle(&stack, &enc64, &gen, &e, &classes);
            out.prob_err = out.prob_err.max(max_abs_diff(&[batched[i].clone()], &[want.clone()]));
            out.argmax_mismatches += usize::from(argmax(&single[i]) != argmax(&want));
            out.images += 1;
        }
    }
    out
}

/// Exhaustive nearest-word scan: every non-special id, distances in f64,
/// repeated minimum extraction with the lower id winning ties.
pub fn nearest_oracle(query: &[f32], table: &Tensor<f32>, k: usize) -> Vec<(u32, f64)> {
    let mut left: Vec<(u32, f64)> = Vec::new();
    for id in 4..table.shape()[0] {
        let mut d2 = 0.0;
        for (j, &q) in query.iter().enumerate() {
            let diff = table.row(id)[j] as f64 - q as f64;
            d2 += diff * diff;
        }
        left.push((id as u32, d2.sqrt()));
    }
    let mut out = Vec::new();
    while out.len() < k {
        let mut best = 0;
        for i in 1..left.len() {
            if left[i].1 < left[best].1 || (left[i].1 == left[best].1 && left[i].0 < left[best].0) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Tokenizer over `n` synthetic words `w000..`, in id order after the
/// special tokens.
pub fn synthetic_tokenizer(n: usize) -> Tokenizer {
    let words: Vec<String> = (0..n).map(|i| format!("w{i:03}")).collect();
    Tokenizer::from_texts(words.iter().map(String::as_str), 8).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct NearestOracle {
    pub mismatched_lists: usize,
    pub distance_err: f64,
    pub lists: usize,
}

/// `nearest_words` against the exhaustive scan on random tables, some with
/// duplicated rows to force ties. Small cases use up to 8 words and 8
/// dimensions; the last cases use a 100-word table with k = 30.
pub fn nearest_oracle_check(instances: usize, seed: u64) -> NearestOracle {
    let mut r = rng(seed);
    let mut out = NearestOracle { mismatched_lists: 0, distance_err: 0.0, lists: 0 };
    for inst in 0..instances {
        let big = inst % 10 == 9;
        let (n, dm) = if big { (100, 16) } else { (r.random_range(1..=8), r.random_range(1..=8)) };
        let tok = synthetic_tokenizer(n);
        let mut table = rand_tensor(&mut r, &[n + 4, dm], -1.0, 1.0).cast::<f32>();
        if n >= 2 && r.random::<bool>() {
            let (a, b) = (4 + r.random_range(0..n), 4 + r.random_range(0..n));
            let row = table.row(a).to_vec();
            table.data_mut()[b * dm..(b + 1) * dm].copy_from_slice(&row);
        }
        let query: Vec<f32> = if r.random::<bool>() {
            table.row(4 + r.random_range(0..n)).to_vec()
        } else {
            (0..dm).map(|_| r.random_range(-1.0f32..1.0)).collect()
        };
        let k = if big { 30 } else { r.random_range(1..=n) };
        let got = nearest_words(&query, &table, &tok, k).unwrap();
        let want = nearest_oracle(&query, &table, k);
        let same = got.len() == want.len()
            && got.iter().zip(&want).enumerate().all(|(i, (g, w))| g.rank == i + 1 && g.token == tok.word(w.0).unwrap());
        out.mismatched_lists += usize::from(!same);
        for (g, w) in got.iter().zip(&want) {
            out.distance_err = out.distance_err.max((g.distance - w.1).abs());
        }
        out.lists += 1;
    }
    out
}
