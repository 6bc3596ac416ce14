use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{base_classes, unseen_classes, LabelVector, ObservationVocabulary, NUM_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const CORPUS_META: &str = "corpus.json";

/// Grid layout for motif cells.
pub const GRID: usize = 4;
/// Mean background level before noise.
pub const BACKGROUND: f32 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    BaseTrain,
    UnseenTrain,
    UnseenTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::BaseTrain, Split::UnseenTrain, Split::UnseenTest];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::BaseTrain => "base-train",
            Split::UnseenTrain => "unseen-train",
            Split::UnseenTest => "unseen-test",
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }

    /// Classes a classification split draws from; `None` for pretraining.
    pub fn class_set(self) -> Option<Vec<usize>> {
        match self {
            Split::Pretrain => None,
            Split::BaseTrain => Some(base_classes()),
            Split::UnseenTrain | Split::UnseenTest => Some(unseen_classes()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pretrain: usize,
    pub base_train: usize,
    pub unseen_train: usize,
    pub unseen_test: usize,
    pub image_side: usize,
    /// Relative weights for drawing 1, 2, 3, ... findings per pretraining image.
    pub findings_per_image: Vec<f64>,
    /// Probability that a pretraining image is a "No Finding" image.
    pub no_finding_prob: f64,
    /// Relative prior of each observation 1..=13; empty means uniform.
    pub finding_priors: Vec<f64>,
    pub noise_sigma: f64,
    /// Probability that an absent finding gets an explicit negated mention.
    pub negation_prob: f64,
    /// Probability that an absent finding gets a hedged mention the extractor
    /// reads as positive.
    pub ambiguity_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            base_train: 360,
            unseen_train: 200,
            unseen_test: 250,
            image_side: 32,
            findings_per_image: vec![0.5, 0.3, 0.2],
            no_finding_prob: 0.1,
            finding_priors: Vec::new(),
            noise_sigma: 0.05,
            negation_prob: 0.1,
            ambiguity_prob: 0.01,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("corpus.{name}"), format!("{p} is not a probability")))
            }
        };
        for (name, n) in [
            ("pretrain", self.pretrain),
            ("base_train", self.base_train),
            ("unseen_train", self.unseen_train),
            ("unseen_test", self.unseen_test),
        ] {
            if n == 0 {
                return Err(Error::config(format!("corpus.{name}"), "count must be positive"));
            }
        }
        if self.image_side < 8 || self.image_side % GRID != 0 {
            return Err(Error::config("corpus.image_side", "must be a multiple of 4 and at least 8"));
        }
        if self.findings_per_image.is_empty()
            || self.findings_per_image.len() > NUM_OBSERVATIONS - 1
            || self.findings_per_image.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.findings_per_image.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("corpus.findings_per_image", "need 1..=13 non-negative weights with positive sum"));
        }
        if !self.finding_priors.is_empty()
            && (self.finding_priors.len() != NUM_OBSERVATIONS - 1
                || self.finding_priors.iter().any(|w| !(*w > 0.0) || !w.is_finite()))
        {
            return Err(Error::config("corpus.finding_priors", "need 13 positive weights or none"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("corpus.noise_sigma", "must be non-negative"));
        }
        prob("no_finding_prob", self.no_finding_prob)?;
        prob("negation_prob", self.negation_prob)?;
        prob("ambiguity_prob", self.ambiguity_prob)?;
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::BaseTrain => self.base_train,
            Split::UnseenTrain => self.unseen_train,
            Split::UnseenTest => self.unseen_test,
        }
    }

    fn prior(&self, k: usize) -> f64 {
        if self.finding_priors.is_empty() {
            1.0
        } else {
            self.finding_priors[k - 1]
        }
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `H x W x 1`, values in [0, 1].
    pub image: Tensor<f32>,
    pub report: String,
    /// Labels the generator rendered (not the extractor's reading of the report).
    pub labels: LabelVector,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    image: String,
    shape: Vec<usize>,
    report: String,
    labels: LabelVector,
    class_id: usize,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: CorpusConfig,
    pub config_hash: String,
    pub samples: usize,
}

/// Deterministic per-sample seed: two rounds of splitmix64 over the master
/// seed, the split, and the sample index.
pub fn sample_seed(master: u64, split: Split, index: usize) -> u64 {
    let a = splitmix64(master ^ splitmix64(split.salt()));
    splitmix64(a ^ splitmix64(index as u64 ^ 0xA076_1D64_78BD_642F))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const POSITIVE: [&str; 5] = [
    "There is evidence of {}.",
    "Findings are consistent with {}.",
    "{} is seen on this study.",
    "Interval development of {} is noted.",
    "There is moderate {} present.",
];

const NEGATIVE: [&str; 5] = [
    "There is no {} seen.",
    "No evidence of {} is identified.",
    "The study is negative for {}.",
    "The chest is free of {} today.",
    "Without {} on this exam.",
];

const HEDGED: [&str; 2] = ["Cannot exclude {} at this time.", "Possible {} is suggested clinically."];

const FILLER: [&str; 6] = [
    "Portable frontal view of the chest.",
    "Comparison is made to the prior study.",
    "The osseous structures are unremarkable.",
    "Clinical correlation is recommended.",
    "Stable appearance.",
    "Ok.",
];

const NORMAL: [&str; 2] = ["No acute cardiopulmonary process.", "No acute findings."];

/// Every sentence template the report generator can emit, with `{}` where a
/// finding phrase goes.
pub fn template_texts() -> Vec<&'static str> {
    POSITIVE.iter().chain(&NEGATIVE).chain(&HEDGED).chain(&FILLER).chain(&NORMAL).copied().collect()
}

fn fill(template: &str, phrase: &str) -> String {
    let s = template.replace("{}", phrase);
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

fn pick_synonym<'a>(rng: &mut ChaCha8Rng, syns: &[&'a str]) -> &'a str {
    if syns.len() == 1 || rng.random::<f64>() < 0.7 {
        syns[0]
    } else {
        syns[rng.random_range(1..syns.len())]
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws the positive findings of a pretraining image: "No Finding" with
/// probability `no_finding_prob`, otherwise a count from
/// `findings_per_image` and that many distinct observations by weighted
/// sampling without replacement.
pub fn draw_findings(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random::<f64>() < config.no_finding_prob {
        return Vec::new();
    }
    let count = weighted_index(rng, &config.findings_per_image) + 1;
    let mut pool: Vec<usize> = (1..NUM_OBSERVATIONS).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let w: Vec<f64> = pool.iter().map(|&k| config.prior(k)).collect();
        let i = weighted_index(rng, &w);
        out.push(pool.remove(i));
    }
    out.sort_unstable();
    out
}

pub fn compose_report(findings: &[usize], config: &CorpusConfig, vocab: &ObservationVocabulary, rng: &mut ChaCha8Rng) -> String {
    let mut positives: Vec<String> = findings
        .iter()
        .map(|&k| {
            let t = POSITIVE[rng.random_range(0..POSITIVE.len())];
            fill(t, pick_synonym(rng, &vocab.observations[k].synonyms))
        })
        .collect();
    positives.shuffle(rng);
    if positives.is_empty() {
        positives.push(NORMAL[rng.random_range(0..NORMAL.len())].to_string());
    }
    let mut sentences = positives;
    for k in 1..NUM_OBSERVATIONS {
        if findings.contains(&k) {
            continue;
        }
        let u = rng.random::<f64>();
        let syns = &vocab.observations[k].synonyms;
        if u < config.ambiguity_prob {
            let t = HEDGED[rng.random_range(0..HEDGED.len())];
            sentences.push(fill(t, pick_synonym(rng, syns)));
        } else if u < config.ambiguity_prob + config.negation_prob {
            let t = NEGATIVE[rng.random_range(0..NEGATIVE.len())];
            sentences.push(fill(t, pick_synonym(rng, syns)));
        }
    }
    sentences.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
    sentences.join(" ")
}

/// Pixel bounds `(row0, col0, side)` of the grid cell holding a motif.
pub fn cell_bounds(cell: (usize, usize), side: usize) -> (usize, usize, usize) {
    let c = side / GRID;
    (cell.0 * c, cell.1 * c, c)
}

/// Tight bounding box `(r0, c0, r1, c1)` (inclusive) of observation `k`'s motif.
pub fn motif_bbox(vocab: &ObservationVocabulary, k: usize, side: usize) -> Option<(usize, usize, usize, usize)> {
    let m = vocab.observations[k].motif?;
    let (r0, c0, c) = cell_bounds(m.cell, side);
    let (mut a, mut b, mut e, mut f) = (usize::MAX, usize::MAX, 0, 0);
    for i in 0..c {
        for j in 0..c {
            if m.shape.covers(i, j, c) {
                a = a.min(r0 + i);
                b = b.min(c0 + j);
                e = e.max(r0 + i);
                f = f.max(c0 + j);
            }
        }
    }
    (a != usize::MAX).then_some((a, b, e, f))
}

pub fn render_image(findings: &[usize], side: usize, sigma: f64, vocab: &ObservationVocabulary, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut base = vec![BACKGROUND; side * side];
    for &k in findings {
        let Some(m) = vocab.observations[k].motif else { continue };
        let (r0, c0, c) = cell_bounds(m.cell, side);
        for i in 0..c {
            for j in 0..c {
                if m.shape.covers(i, j, c) {
                    base[(r0 + i) * side + c0 + j] = m.intensity;
                }
            }
        }
    }
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma validated");
    let data = base
        .into_iter()
        .map(|v| {
            let n = if sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![side, side, 1], data).expect("shape matches")
}

/// Generates sample `index` of `split`. Depends only on (config, split, index).
pub fn generate_sample(config: &CorpusConfig, vocab: &ObservationVocabulary, split: Split, index: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, split, index));
    let findings = match split.class_set() {
        None => draw_findings(config, &mut rng),
        Some(classes) => {
            let k = classes[index % classes.len()];
            if k == 0 {
                Vec::new()
            } else {
                vec![k]
            }
        }
    };
    let labels = LabelVector::from_findings(&findings);
    let image = render_image(&findings, config.image_side, config.noise_sigma, vocab, &mut rng);
    let report = compose_report(&findings, config, vocab, &mut rng);
    SampleRecord {
        id: format!("{}-{:05}", split.tag(), index),
        image,
        report,
        labels,
        class_id: labels.primary(),
        split,
    }
}

pub fn generate_split(config: &CorpusConfig, vocab: &ObservationVocabulary, split: Split) -> Vec<SampleRecord> {
    (0..config.count(split)).map(|i| generate_sample(config, vocab, split, i)).collect()
}

pub fn generate_all(config: &CorpusConfig, vocab: &ObservationVocabulary) -> Vec<SampleRecord> {
    Split::ALL.iter().flat_map(|&s| generate_split(config, vocab, s)).collect()
}

fn image_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `manifest.jsonl`, `corpus.json` and `images/<id>.f32` under `dir`.
pub fn generate_corpus(config: &CorpusConfig, dir: &Path, config_hash: &str) -> Result<usize> {
    config.validate()?;
    let vocab = ObservationVocabulary::standard();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST);
    let f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(f);
    let mut n = 0;
    for split in Split::ALL {
        for i in 0..config.count(split) {
            let s = generate_sample(config, &vocab, split, i);
            let rel = format!("images/{}.f32", s.id);
            let path = dir.join(&rel);
            fs::write(&path, image_bytes(&s.image)).map_err(|e| Error::io(&path, e))?;
            let line = ManifestLine {
                id: s.id,
                image: rel,
                shape: s.image.shape().to_vec(),
                report: s.report,
                labels: s.labels,
                class_id: s.class_id,
                split: s.split,
            };
            let json = serde_json::to_string(&line).map_err(|e| Error::Json { context: "manifest".into(), source: e })?;
            writeln!(w, "{json}").map_err(|e| Error::io(&manifest, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    let meta = CorpusMeta { config: config.clone(), config_hash: config_hash.to_string(), samples: n };
    let meta_path = dir.join(CORPUS_META);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json { context: "corpus meta".into(), source: e })?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(n)
}

/// Reads a corpus directory back into memory.
pub fn load_corpus(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = dir.join(MANIFEST);
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Json { context: format!("{}:{}", manifest.display(), lineno + 1), source: e })?;
        let path = dir.join(&rec.image);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Corpus(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
        }
        let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let image = Tensor::new(rec.shape.clone(), data)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        if rec.shape.len() != 3 || rec.shape[2] != 1 {
            return Err(Error::Corpus(format!("{}: expected HxWx1 image, got {:?}", rec.id, rec.shape)));
        }
        if rec.class_id >= NUM_OBSERVATIONS || !rec.labels.get(rec.class_id) {
            return Err(Error::Corpus(format!("{}: class_id {} is not a positive label", rec.id, rec.class_id)));
        }
        out.push(SampleRecord {
            id: rec.id,
            image,
            report: rec.report,
            labels: rec.labels,
            class_id: rec.class_id,
            split: rec.split,
        });
    }
    Ok(out)
}
