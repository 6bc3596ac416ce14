//! Zero-, few- and full-shot protocols over the unseen classes, and the
//! metrics they report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{ObservationVocabulary, SampleRecord};
use crate::encoders::{EncoderStack, Tokenizer};
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::promptgen::{
    argmax, classify, fewshot_finetune, fullshot_train, zero_shot_setup, Labelled, MaskVariant, PromptConfig,
    PromptGenerator, ShotSpec,
};

pub const CSV_HEADER: &str = "protocol,seed,shots,class,precision,recall,specificity,f1,accuracy,auc,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    /// Test samples of this class.
    pub support: usize,
    pub precision: f64,
    /// Sensitivity.
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    /// One-vs-rest AUC of this class's probability.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub variant: MaskVariant,
    pub seed: u64,
    pub shots: Option<usize>,
    pub classes: Vec<usize>,
    /// `confusion[true][predicted]` in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
    /// Classes with no test samples; their per-class metrics are NaN.
    pub missing_classes: Vec<usize>,
    pub seconds: f64,
    /// Ids of the few-shot samples drawn for this run.
    pub shot_ids: Vec<String>,
}

/// Area under the ROC curve by the rank statistic, ties sharing their
/// midrank. `None` when either class is empty.
pub fn auc_midrank(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank: f64 = (0..scores.len()).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    let np = n_pos as f64;
    Some((pos_rank - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_finite(v: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Identifies a report before its numbers are known.
#[derive(Debug, Clone)]
pub struct ReportKey {
    pub protocol: ShotSpec,
    pub variant: MaskVariant,
    pub seed: u64,
}

impl MetricsReport {
    /// Aggregates class probabilities (rows in `classes` order) against true
    /// class ids.
    pub fn from_predictions(
        key: &ReportKey,
        classes: &[usize],
        vocab: &ObservationVocabulary,
        labels: &[usize],
        probs: &[Vec<f64>],
    ) -> Result<Self> {
        if labels.is_empty() || labels.len() != probs.len() {
            return Err(Error::Invalid(format!("{} labels for {} predictions", labels.len(), probs.len())));
        }
        let k = classes.len();
        let col = |c: usize| classes.iter().position(|&x| x == c);
        let mut confusion = vec![vec![0usize; k]; k];
        for (&l, p) in labels.iter().zip(probs) {
            let t = col(l).ok_or_else(|| Error::Invalid(format!("label {l} is not in the class set {classes:?}")))?;
            if p.len() != k {
                return Err(Error::Invalid(format!("probability row has {} entries for {k} classes", p.len())));
            }
            confusion[t][argmax(p)] += 1;
        }
        let total = labels.len();
        let mut per_class = Vec::with_capacity(k);
        let mut missing = Vec::new();
        for (i, &c) in classes.iter().enumerate() {
            let support: usize = confusion[i].iter().sum();
            let name = vocab.name(c).to_string();
            if support == 0 {
                log::warn!("class {c} ({name}) has no test samples");
                missing.push(c);
                let nan = f64::NAN;
                per_class.push(ClassMetrics { class: c, name, support, precision: nan, recall: nan, specificity: nan, f1: nan, auc: nan });
                continue;
            }
            let tp = confusion[i][i];
            let predicted: usize = confusion.iter().map(|r| r[i]).sum();
            let fp = predicted - tp;
            let fneg = support - tp;
            let tn = total - tp - fp - fneg;
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            let scores: Vec<f64> = probs.iter().map(|p| p[i]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            per_class.push(ClassMetrics {
                class: c,
                name,
                support,
                precision,
                recall,
                specificity: ratio(tn, tn + fp),
                f1,
                auc: auc_midrank(&scores, &positive).unwrap_or(f64::NAN),
            });
        }
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        Ok(Self {
            protocol: key.protocol.tag(),
            variant: key.variant,
            seed: key.seed,
            shots: key.protocol.shots(),
            classes: classes.to_vec(),
            confusion,
            accuracy: trace as f64 / total as f64,
            macro_auc: mean_finite(per_class.iter().map(|c| c.auc)),
            macro_f1: mean_finite(per_class.iter().map(|c| c.f1)),
            per_class,
            missing_classes: missing,
            seconds: 0.0,
            shot_ids: Vec::new(),
        })
    }
}

/// Classifies `test` with `gen` and aggregates the result.
pub fn evaluate(
    stack: &EncoderStack,
    encoders: &ParamStore<f32>,
    gen: &PromptGenerator,
    test: &Labelled,
    classes: &[usize],
    vocab: &ObservationVocabulary,
    key: &ReportKey,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Invalid("empty evaluation split".into()));
    }
    let probs = classify(stack, encoders, gen, &test.embeddings, classes)?;
    MetricsReport::from_predictions(key, classes, vocab, &test.labels, &probs)
}

/// Everything a protocol run needs besides the base-trained generator.
pub struct EvalContext<'a> {
    pub stack: &'a EncoderStack,
    pub encoders: &'a ParamStore<f32>,
    pub tokenizer: &'a Tokenizer,
    pub vocab: &'a ObservationVocabulary,
    pub prompt: &'a PromptConfig,
    /// Unseen classes, in evaluation column order.
    pub classes: Vec<usize>,
    pub unseen_train: &'a [SampleRecord],
    pub unseen_train_embedded: Labelled,
    pub unseen_test: Labelled,
}

impl<'a> EvalContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stack: &'a EncoderStack,
        encoders: &'a ParamStore<f32>,
        tokenizer: &'a Tokenizer,
        vocab: &'a ObservationVocabulary,
        prompt: &'a PromptConfig,
        classes: Vec<usize>,
        unseen_train: &'a [SampleRecord],
        unseen_test: &[SampleRecord],
    ) -> Result<Self> {
        let train: Vec<&SampleRecord> = unseen_train.iter().collect();
        let test: Vec<&SampleRecord> = unseen_test.iter().collect();
        Ok(Self {
            stack,
            encoders,
            tokenizer,
            vocab,
            prompt,
            classes,
            unseen_train,
            unseen_train_embedded: Labelled::embed(stack, encoders, &train)?,
            unseen_test: Labelled::embed(stack, encoders, &test)?,
        })
    }

    /// One protocol for one seed, starting from a base-trained generator.
    pub fn run_one(&self, base: &PromptGenerator, key: &ReportKey) -> Result<MetricsReport> {
        let t0 = Instant::now();
        let zero = zero_shot_setup(base, &self.classes, self.tokenizer, self.vocab, self.encoders)?;
        let (gen, shot_ids) = match key.protocol {
            ShotSpec::Zero => (zero, Vec::new()),
            ShotSpec::Few(n) => {
                fewshot_finetune(self.stack, self.encoders, &zero, n, self.unseen_train, &self.classes, self.prompt, key.seed)?
            }
            ShotSpec::Full => {
                let (g, _) = fullshot_train(
                    self.stack,
                    self.encoders,
                    &zero,
                    &self.unseen_train_embedded,
                    &self.classes,
                    key.variant.mask(),
                    self.prompt,
                    key.seed,
                )?;
                (g, Vec::new())
            }
        };
        let mut report = evaluate(self.stack, self.encoders, &gen, &self.unseen_test, &self.classes, self.vocab, key)?;
        report.seconds = t0.elapsed().as_secs_f64();
        report.shot_ids = shot_ids;
        Ok(report)
    }
}

/// Median over seeds of one (variant, protocol) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: MaskVariant,
    pub protocol: String,
    pub shots: Option<usize>,
    pub seeds: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub seconds: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Reports plus one summary row per (variant, protocol), in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<SummaryRow>,
}

impl ReportSet {
    pub fn from_reports(reports: Vec<MetricsReport>) -> Self {
        let mut cells: Vec<(MaskVariant, String)> = Vec::new();
        for r in &reports {
            let c = (r.variant, r.protocol.clone());
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        let summary = cells
            .into_iter()
            .map(|(variant, protocol)| {
                let rs: Vec<&MetricsReport> =
                    reports.iter().filter(|r| r.variant == variant && r.protocol == protocol).collect();
                let med = |f: fn(&MetricsReport) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                SummaryRow {
                    variant,
                    shots: rs[0].shots,
                    protocol,
                    seeds: rs.len(),
                    accuracy: med(|r| r.accuracy),
                    macro_auc: med(|r| r.macro_auc),
                    macro_f1: med(|r| r.macro_f1),
                    seconds: med(|r| r.seconds),
                }
            })
            .collect();
        Self { reports, summary }
    }

    /// Mean accuracy of one variant and seed across its protocols.
    pub fn mean_accuracy(&self, variant: MaskVariant, seed: u64) -> Option<f64> {
        let xs: Vec<f64> =
            self.reports.iter().filter(|r| r.variant == variant && r.seed == seed).map(|r| r.accuracy).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn accuracy(&self, variant: MaskVariant, protocol: ShotSpec, seed: u64) -> Option<f64> {
        let tag = protocol.tag();
        self.reports.iter().find(|r| r.variant == variant && r.seed == seed && r.protocol == tag).map(|r| r.accuracy)
    }
}

/// Runs every protocol for every seed. `base_for_seed` supplies the
/// base-trained generator of a seed; it is called once per seed.
pub fn run_protocol(
    ctx: &EvalContext<'_>,
    variant: MaskVariant,
    protocols: &[ShotSpec],
    seeds: &[u64],
    base_for_seed: &mut dyn FnMut(u64) -> Result<PromptGenerator>,
) -> Result<ReportSet> {
    if protocols.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("need at least one protocol and one seed".into()));
    }
    let mut reports = Vec::new();
    for &seed in seeds {
        let base = base_for_seed(seed)?;
        for &protocol in protocols {
            let r = ctx.run_one(&base, &ReportKey { protocol, variant, seed })?;
            log::info!("{variant} {} seed {seed}: accuracy {:.4}", r.protocol, r.accuracy);
            reports.push(r);
        }
    }
    // Reports come out seed-major; regroup protocol-major for the tables.
    reports.sort_by_key(|r| (r.variant, protocols.iter().position(|p| p.tag() == r.protocol), r.seed));
    Ok(ReportSet::from_reports(reports))
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.6}")
    }
}

/// Per-class rows plus a `macro` row per report. One file holds one mask
/// variant; the variant is not a column. The `seconds` column is
/// left empty so reruns compare byte-for-byte; timings live in the JSON
/// summary.
pub fn metrics_csv(reports: &[MetricsReport], config_hash: &str) -> String {
    let mut out = format!("# config-hash: {config_hash}\n{CSV_HEADER}\n");
    for r in reports {
        let proto = &r.protocol;
        let shots = r.shots.map_or("full".to_string(), |n| n.to_string());
        for c in &r.per_class {
            out.push_str(&format!(
                "{proto},{},{shots},{},{},{},{},{},{},{},\n",
                r.seed,
                c.name.replace(' ', "_"),
                num(c.precision),
                num(c.recall),
                num(c.specificity),
                num(c.f1),
                num(r.accuracy),
                num(c.auc)
            ));
        }
        let present: Vec<&ClassMetrics> = r.per_class.iter().filter(|c| c.support > 0).collect();
        let avg = |f: fn(&ClassMetrics) -> f64| mean_finite(present.iter().map(|c| f(c)));
        out.push_str(&format!(
            "{proto},{},{shots},macro,{},{},{},{},{},{},\n",
            r.seed,
            num(avg(|c| c.precision)),
            num(avg(|c| c.recall)),
            num(avg(|c| c.specificity)),
            num(r.macro_f1),
            num(r.accuracy),
            num(r.macro_auc)
        ));
    }
    out
}

#[derive(Serialize)]
struct JsonOut<'a> {
    config_hash: &'a str,
    summary: &'a [SummaryRow],
    reports: &'a [MetricsReport],
}

pub fn metrics_json(set: &ReportSet, config_hash: &str) -> Result<String> {
    serde_json::to_string_pretty(&JsonOut { config_hash, summary: &set.summary, reports: &set.reports })
        .map_err(|source| Error::Json { context: "metrics summary".into(), source })
}
