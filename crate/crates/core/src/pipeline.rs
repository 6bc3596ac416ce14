//! Run orchestration shared by the command line and the end-to-end tests.
//! Every stage reads and writes files under one output directory:
//!
//! ```text
//! corpus/                      manifest.jsonl, corpus.json, images/
//! checkpoints/pretrain.mpck    encoders, projections, temperature
//! checkpoints/prompt-<variant>-seed<n>.mpck
//! pretrain_loss.csv
//! metrics/<run-id>.csv, metrics/<run-id>.json
//! inspect/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus::{
    base_classes, generate_corpus, load_corpus, unseen_classes, ObservationVocabulary, SampleRecord, Split,
};
use crate::encoders::{EncoderStack, Tokenizer, TEXT_EMBEDDING};
use crate::error::{Error, Result};
use crate::evalharness::{metrics_csv, metrics_json, run_protocol, EvalContext, ReportSet};
use crate::grad::ParamStore;
use crate::introspect::{
    activation_map, context_similarity_matrix, count_footprint, footprint_csv, grid_csv, nearest_words,
    neighbors_csv, pgm, ComponentFootprint, FootprintInput,
};
use crate::pretrain::{heldout_samples, loss_csv, pretrain_run, retrieval_top1, PretrainData};
use crate::promptgen::{prompt_train, zero_shot_setup, Labelled, MaskVariant, PromptGenerator, ShotSpec};

const EXTRA_STAGE: &str = "stage";
const EXTRA_VARIANT: &str = "variant";
const EXTRA_METANET: &str = "metanet";

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
    pub tau: f64,
    pub retrieval_top1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PromptSummary {
    pub variant: MaskVariant,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub base_train_accuracy: f64,
    pub seconds: f64,
}

/// Which analyses `inspect` writes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InspectRequest {
    pub nearest_words: bool,
    pub context_sim: bool,
    pub footprint: bool,
    pub activation_map: bool,
}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
    pub vocab: ObservationVocabulary,
    pub tokenizer: Tokenizer,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Run {
    /// Validates `cfg`; `out` overrides its output directory.
    pub fn new(cfg: RunConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let vocab = ObservationVocabulary::standard();
        let tokenizer = Tokenizer::standard(&vocab, cfg.encoder.max_len)?;
        let out = out.unwrap_or_else(|| cfg.output.clone());
        let hash = cfg.hash();
        Ok(Self { cfg, out, hash, vocab, tokenizer })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    pub fn pretrain_path(&self) -> PathBuf {
        self.out.join("checkpoints").join("pretrain.mpck")
    }

    pub fn prompt_path(&self, variant: MaskVariant, seed: u64) -> PathBuf {
        self.out.join("checkpoints").join(format!("prompt-{variant}-seed{seed}.mpck"))
    }

    pub fn metrics_path(&self, run_id: &str, ext: &str) -> PathBuf {
        self.out.join("metrics").join(format!("{run_id}.{ext}"))
    }

    pub fn inspect_dir(&self) -> PathBuf {
        self.out.join("inspect")
    }

    pub fn stack(&self) -> Result<EncoderStack> {
        EncoderStack::new(self.cfg.encoder.clone(), self.tokenizer.vocab_size(), self.cfg.corpus.image_side)
    }

    fn meta(&self, seed: u64, epoch: u64, extra: &[(&str, String)]) -> CheckpointMeta {
        CheckpointMeta {
            config_hash: self.hash.clone(),
            seed,
            epoch,
            extra: extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    fn load(&self, path: &Path, what: &str) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::Invalid(format!("missing {what} checkpoint {}", path.display())));
        }
        let ckpt = load_checkpoint(path)?;
        if ckpt.meta.config_hash != self.hash {
            log::warn!(
                "{} was written under config {}, current config is {}",
                path.display(),
                ckpt.meta.config_hash,
                self.hash
            );
        }
        Ok(ckpt)
    }

    fn split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        let dir = self.corpus_dir();
        if !dir.join(crate::corpus::MANIFEST).exists() {
            return Err(Error::Corpus(format!("no corpus at {}; run gen-corpus first", dir.display())));
        }
        Ok(load_corpus(&dir)?.into_iter().filter(|s| s.split == split).collect())
    }

    pub fn gen_corpus(&self) -> Result<usize> {
        let n = generate_corpus(&self.cfg.corpus, &self.corpus_dir(), &self.hash)?;
        log::info!("wrote {n} samples to {}", self.corpus_dir().display());
        Ok(n)
    }

    pub fn pretrain(&self) -> Result<PretrainSummary> {
        let t0 = Instant::now();
        let samples = self.split(Split::Pretrain)?;
        let stack = self.stack()?;
        let data = PretrainData::build(&samples, &self.tokenizer, &self.vocab)?;
        let pc = &self.cfg.pretrain;
        let out = pretrain_run(&stack, &data, pc, self.cfg.seed)?;
        let held = heldout_samples(&self.cfg.corpus, &self.vocab, pc.retrieval_samples);
        let retrieval = retrieval_top1(&stack, &out.params, &self.tokenizer, &held, pc.retrieval_batch)?;
        let tau = crate::pretrain::tau_value(&out.params)?;
        let meta = self.meta(
            self.cfg.seed,
            pc.epochs as u64,
            &[(EXTRA_STAGE, "pretrain".into()), ("retrieval_top1", format!("{retrieval:.6}"))],
        );
        save_checkpoint(&Checkpoint::new(meta, out.params), &self.pretrain_path())?;
        write(&self.out.join("pretrain_loss.csv"), loss_csv(&out.log))?;
        log::info!("held-out retrieval top-1 {retrieval:.4}");
        Ok(PretrainSummary { epoch_losses: out.epoch_losses, tau, retrieval_top1: retrieval, seconds: t0.elapsed().as_secs_f64() })
    }

    /// Encoder tensors of the pretraining checkpoint.
    pub fn encoders(&self) -> Result<ParamStore<f32>> {
        Ok(self.load(&self.pretrain_path(), "pretraining")?.tensors)
    }

    /// Trains the base-class generator of one variant and seed, and saves it
    /// next to the encoders it was trained against.
    pub fn prompt_train(&self, variant: MaskVariant, seed: u64) -> Result<PromptSummary> {
        let t0 = Instant::now();
        let pre = self.load(&self.pretrain_path(), "pretraining")?;
        let stack = self.stack()?;
        let base = self.split(Split::BaseTrain)?;
        let refs: Vec<&SampleRecord> = base.iter().collect();
        let data = Labelled::embed(&stack, &pre.tensors, &refs)?;
        let classes = base_classes();
        let (gen, log) = prompt_train(
            &stack,
            &pre.tensors,
            &self.tokenizer,
            &self.vocab,
            &data,
            &classes,
            variant.mask(),
            &self.cfg.prompt,
            seed,
        )?;
        let probs = crate::promptgen::classify(&stack, &pre.tensors, &gen, &data.embeddings, &classes)?;
        let hits = probs.iter().zip(&data.labels).filter(|(p, &l)| classes[crate::promptgen::argmax(p)] == l).count();
        let mut tensors = pre.tensors.clone();
        tensors.extend_prefix(&gen.params, crate::promptgen::PROMPT_PREFIX);
        let meta = self.meta(
            seed,
            self.cfg.prompt.epochs as u64,
            &[
                (EXTRA_STAGE, "prompt".into()),
                (EXTRA_VARIANT, variant.tag().into()),
                (EXTRA_METANET, gen.metanet.to_string()),
            ],
        );
        save_checkpoint(&Checkpoint::new(meta, tensors), &self.prompt_path(variant, seed))?;
        Ok(PromptSummary {
            variant,
            seed,
            epoch_losses: log.epoch_losses,
            base_train_accuracy: hits as f64 / data.len() as f64,
            seconds: t0.elapsed().as_secs_f64(),
        })
    }

    /// Encoders and base-trained generator of a variant and seed, training
    /// them first when no checkpoint exists.
    pub fn prompt_state(&self, variant: MaskVariant, seed: u64) -> Result<(ParamStore<f32>, PromptGenerator)> {
        let path = self.prompt_path(variant, seed);
        if !path.exists() {
            self.prompt_train(variant, seed)?;
        }
        let ckpt = self.load(&path, "prompt")?;
        let metanet = match ckpt.meta.extra.get(EXTRA_METANET).map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            other => return Err(Error::Invalid(format!("{}: bad `metanet` entry {other:?}", path.display()))),
        };
        let gen = PromptGenerator::from_store(&ckpt.tensors, metanet)?;
        let mut encoders = ckpt.tensors;
        let names: Vec<String> =
            encoders.names().filter(|n| n.starts_with(crate::promptgen::PROMPT_PREFIX)).cloned().collect();
        for n in names {
            encoders.remove(&n);
        }
        Ok((encoders, gen))
    }

    /// Runs `protocols` for `seeds` and writes `metrics/<run_id>.csv/json`.
    pub fn eval(&self, variant: MaskVariant, protocols: &[ShotSpec], seeds: &[u64], run_id: &str) -> Result<ReportSet> {
        let encoders = self.encoders()?;
        let stack = self.stack()?;
        let utrain = self.split(Split::UnseenTrain)?;
        let utest = self.split(Split::UnseenTest)?;
        let ctx = EvalContext::new(
            &stack,
            &encoders,
            &self.tokenizer,
            &self.vocab,
            &self.cfg.prompt,
            unseen_classes(),
            &utrain,
            &utest,
        )?;
        let mut base_for_seed = |seed: u64| -> Result<PromptGenerator> {
            let (enc, gen) = self.prompt_state(variant, seed)?;
            if !enc.diff(&encoders).is_empty() {
                return Err(Error::Invalid(format!(
                    "prompt checkpoint for seed {seed} was trained against different encoders"
                )));
            }
            Ok(gen)
        };
        let set = run_protocol(&ctx, variant, protocols, seeds, &mut base_for_seed)?;
        write(&self.metrics_path(run_id, "csv"), metrics_csv(&set.reports, &self.hash))?;
        write(&self.metrics_path(run_id, "json"), metrics_json(&set, &self.hash)? + "\n")?;
        Ok(set)
    }

    /// The four mask variants over the full protocol grid.
    pub fn ablate(&self, seeds: &[u64]) -> Result<Vec<(MaskVariant, ReportSet)>> {
        let grid = ShotSpec::grid();
        let mut all = Vec::new();
        for variant in MaskVariant::ALL {
            let set = self.eval(variant, &grid, seeds, &format!("ablate-{variant}"))?;
            all.push((variant, set));
        }
        let mut table = format!("# config-hash: {}\nvariant,protocol,shots,seeds,accuracy,macro_auc,macro_f1\n", self.hash);
        for (_, set) in &all {
            for r in &set.summary {
                table.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6}\n",
                    r.variant,
                    r.protocol,
                    r.shots.map_or("full".into(), |n| n.to_string()),
                    r.seeds,
                    r.accuracy,
                    r.macro_auc,
                    r.macro_f1
                ));
            }
        }
        write(&self.metrics_path("ablation", "csv"), table)?;
        Ok(all)
    }

    /// Writes the requested analyses of one variant and seed under
    /// `inspect/`. Returns the footprint when it was requested.
    pub fn inspect(&self, variant: MaskVariant, seed: u64, req: InspectRequest) -> Result<Option<Vec<ComponentFootprint>>> {
        let (encoders, gen) = self.prompt_state(variant, seed)?;
        let gen = zero_shot_setup(&gen, &unseen_classes(), &self.tokenizer, &self.vocab, &encoders)?;
        let stack = self.stack()?;
        let dir = self.inspect_dir();
        let tag = format!("{variant}-seed{seed}");
        let header = format!("# config-hash: {}\n", self.hash);
        if req.nearest_words {
            let table = encoders.require(TEXT_EMBEDDING)?;
            let ctx = gen.context();
            let dm = ctx.shape()[1];
            let searchable = (0..self.tokenizer.vocab_size() as u32).filter(|&i| !Tokenizer::is_special(i)).count();
            let mut csv = header.clone() + "context,rank,token,distance\n";
            for j in 0..gen.m() {
                let n = nearest_words(&ctx.data()[j * dm..(j + 1) * dm], table, &self.tokenizer, 30.min(searchable))?;
                csv.push_str(&neighbors_csv(&format!("v{}", j + 1), &n));
            }
            write(&dir.join(format!("nearest_words-{tag}.csv")), csv)?;
        }
        let test = if req.context_sim || req.activation_map { self.split(Split::UnseenTest)? } else { Vec::new() };
        if req.context_sim {
            let images: Vec<_> = test.iter().take(8).map(|s| &s.image).collect();
            let m = context_similarity_matrix(&stack, &encoders, &gen, &images)?;
            write(&dir.join(format!("context_sim-{tag}.csv")), header.clone() + &grid_csv(&m))?;
            let flat: Vec<f64> = m.iter().flatten().map(|c| (c + 1.0) / 2.0).collect();
            write(&dir.join(format!("context_sim-{tag}.pgm")), pgm(&flat, m.len(), m.len()))?;
        }
        if req.activation_map {
            for s in test.iter().take(4) {
                let map = activation_map(&stack, &encoders, &s.image)?;
                let side = map.shape()[0];
                let rows: Vec<Vec<f64>> = map.data().chunks(side).map(<[f64]>::to_vec).collect();
                write(&dir.join(format!("activation-{}.csv", s.id)), header.clone() + &grid_csv(&rows))?;
                write(&dir.join(format!("activation-{}.pgm", s.id)), pgm(map.data(), side, side))?;
            }
        }
        if req.footprint {
            let mut store = encoders.clone();
            store.extend_prefix(&gen.params, crate::promptgen::PROMPT_PREFIX);
            let input = FootprintInput {
                image_side: self.cfg.corpus.image_side,
                classes: gen.classes().len(),
                prompt_len: gen.m() + 1,
            };
            let rows = count_footprint(&store, &self.cfg.encoder, input)?;
            write(&dir.join(format!("footprint-{tag}.csv")), footprint_csv(&rows, &self.hash))?;
            return Ok(Some(rows));
        }
        Ok(None)
    }
}
