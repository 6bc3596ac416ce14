//! Acceptance suite. Runs the default desk-scale pipeline once in a
//! temporary directory and prints one PASS/FAIL line per criterion, then
//! fails if any criterion failed.

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use vlprompt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
use vlprompt::config::RunConfig;
use vlprompt::corpus::{load_corpus, unseen_classes, Split};
use vlprompt::evalharness::ReportSet;
use vlprompt::grad::ParamStore;
use vlprompt::introspect::{count_footprint, footprint_csv, prompt_generator_total, FootprintInput};
use vlprompt::pipeline::Run;
use vlprompt::promptgen::{
    class_param, fewshot_finetune, fullshot_train, zero_shot_setup, Labelled, MaskVariant, PromptGenerator, ShotSpec,
    PROMPT_PREFIX,
};

struct Report {
    lines: Vec<String>,
    failed: Vec<usize>,
}

impl Report {
    fn check(&mut self, n: usize, ok: bool, what: &str, detail: String) {
        let line = format!("criterion {n:>2} [{}] {what}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !ok {
            self.failed.push(n);
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn encoder_part(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = store.clone();
    let names: Vec<String> = out.names().filter(|n| n.starts_with(PROMPT_PREFIX)).cloned().collect();
    for n in names {
        out.remove(&n);
    }
    out
}

fn with_prompt(encoders: &ParamStore<f32>, gen: &PromptGenerator) -> ParamStore<f32> {
    let mut s = encoders.clone();
    s.extend_prefix(&gen.params, PROMPT_PREFIX);
    s
}

fn roundtrip(dir: &Path, name: &str, store: &ParamStore<f32>) -> ParamStore<f32> {
    let path = dir.join(name);
    let meta = CheckpointMeta { config_hash: "acceptance".into(), seed: 0, epoch: 0, extra: Default::default() };
    save_checkpoint(&Checkpoint::new(meta, store.clone()), &path).unwrap();
    load_checkpoint(&path).unwrap().tensors
}

const TINY: &str = r#"{
  "corpus": {"pretrain": 96, "base_train": 45, "unseen_train": 40, "unseen_test": 20},
  "pretrain": {"epochs": 1, "batch": 32, "retrieval_samples": 64},
  "prompt": {"epochs": 1, "fewshot_steps": 2, "fullshot_epochs": 1},
  "seeds": [1, 2]
}"#;

/// Complete small pipeline; returns the metrics CSV and both checkpoints.
fn tiny_run(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let run = Run::new(RunConfig::from_json(TINY, "tiny").unwrap(), Some(dir.to_path_buf())).unwrap();
    run.gen_corpus().unwrap();
    run.pretrain().unwrap();
    // The tiny corpus has 8 training samples per unseen class, so stop at 4 shots.
    let protocols = [ShotSpec::Zero, ShotSpec::Few(1), ShotSpec::Few(4), ShotSpec::Full];
    run.eval(MaskVariant::Full, &protocols, &[1, 2], "tiny").unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    (
        read(&run.metrics_path("tiny", "csv")),
        read(&run.pretrain_path()),
        read(&run.prompt_path(MaskVariant::Full, 1)),
    )
}

#[test]
fn acceptance() {
    let mut rep = Report { lines: Vec::new(), failed: Vec::new() };

    // 1. Gradient suite.
    let t = Instant::now();
    let suite = common::gradient_suite(100, 11);
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let bad: Vec<&str> = suite.iter().filter(|(_, e)| !(*e < 1e-4)).map(|(n, _)| *n).collect();
    rep.check(
        1,
        bad.is_empty() && secs < 120.0,
        "gradient suite",
        format!("{} checks x 100 cases, worst relative error {worst:.2e}, {secs:.1}s, failing {bad:?}", suite.len()),
    );

    // 2. Loss identities.
    let li = common::loss_identities(1000, 21);
    rep.check(
        2,
        li.equal_err < 1e-6 && li.uniform_err < 1e-6 && li.min_gibbs_gap >= 0.0,
        "loss identities",
        format!(
            "|L(y,y) - H| <= {:.1e}, |L(u,u) - ln N| <= {:.1e}, min gap over {} instances {:.3e}",
            li.equal_err, li.uniform_err, li.gibbs_instances, li.min_gibbs_gap
        ),
    );

    // 3. Oracle equivalence.
    let gt = common::gt_oracle_error(500, 3);
    let pred = common::predicted_oracle_error(500, 4);
    let loss = common::loss_oracle_error(500, 5);
    let cls = common::classify_oracle_check(8, 17);
    let nn = common::nearest_oracle_check(300, 13);
    rep.check(
        3,
        gt < 1e-9
            && pred < 1e-9
            && loss < 1e-9
            && cls.prob_err < 1e-9
            && cls.argmax_mismatches == 0
            && nn.mismatched_lists == 0
            && nn.distance_err < 1e-9,
        "oracle equivalence",
        format!(
            "gt {gt:.1e}, predicted {pred:.1e}, loss {loss:.1e}, classify prob {:.1e} with {}/{} argmax mismatches, nearest words {}/{} lists differ (distance {:.1e})",
            cls.prob_err, cls.argmax_mismatches, cls.images, nn.mismatched_lists, nn.lists, nn.distance_err
        ),
    );

    // The desk-scale pipeline shared by criteria 4 to 10 and 12.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let seeds = cfg.seeds.clone();
    let run = Run::new(cfg, Some(tmp.path().to_path_buf())).unwrap();
    let pipeline = Instant::now();
    run.gen_corpus().unwrap();

    // 4. Pretraining learns.
    let pre = run.pretrain().unwrap();
    let (first, last) = (pre.epoch_losses[0], *pre.epoch_losses.last().unwrap());
    rep.check(
        4,
        last < first && pre.retrieval_top1 > 3.0 / 32.0 && pre.seconds < 600.0,
        "pretraining learns",
        format!(
            "{} epochs, loss {first:.4} -> {last:.4}, held-out retrieval top-1 {:.4} (need > {:.4}), {:.0}s",
            pre.epoch_losses.len(),
            pre.retrieval_top1,
            3.0 / 32.0,
            pre.seconds
        ),
    );

    let mut prompt_secs = 0.0;
    let mut base_acc = Vec::new();
    for &s in &seeds {
        let p = run.prompt_train(MaskVariant::Full, s).unwrap();
        prompt_secs += p.seconds;
        base_acc.push(p.base_train_accuracy);
    }
    let full = run.eval(MaskVariant::Full, &ShotSpec::grid(), &seeds, "eval-full").unwrap();
    let pipeline_secs = pipeline.elapsed().as_secs_f64();

    // 5. Zero-shot transfer.
    let acc = |set: &ReportSet, p: ShotSpec, s: u64| set.accuracy(MaskVariant::Full, p, s).unwrap();
    let zero: Vec<f64> = seeds.iter().map(|&s| acc(&full, ShotSpec::Zero, s)).collect();
    let zero_secs: f64 = prompt_secs + full.reports.iter().filter(|r| r.protocol == "zero").map(|r| r.seconds).sum::<f64>();
    rep.check(
        5,
        median(zero.clone()) > 0.30 && zero_secs < 300.0,
        "zero-shot transfer",
        format!(
            "unseen accuracy per seed {zero:.3?}, median {:.3} (need > 0.30), base-train accuracy {base_acc:.3?}, {zero_secs:.0}s",
            median(zero.clone())
        ),
    );

    // 6. Few-shot trend.
    let sixteen: Vec<f64> = seeds.iter().map(|&s| acc(&full, ShotSpec::Few(16), s)).collect();
    let fully: Vec<f64> = seeds.iter().map(|&s| acc(&full, ShotSpec::Full, s)).collect();
    let up16 = (0..seeds.len()).filter(|&i| sixteen[i] >= zero[i]).count();
    let upfull = (0..seeds.len()).filter(|&i| fully[i] >= sixteen[i]).count();
    rep.check(
        6,
        up16 >= 2 && upfull >= 2,
        "few-shot trend",
        format!("0-shot {zero:.3?}, 16-shot {sixteen:.3?}, full {fully:.3?}; 16 >= 0 in {up16}/3, full >= 16 in {upfull}/3"),
    );

    // 7. Ablation trend and table.
    let ablation = run.ablate(&seeds).unwrap();
    let table = std::fs::read_to_string(run.metrics_path("ablation", "csv")).unwrap();
    let table_rows = table.lines().filter(|l| !l.starts_with('#') && !l.starts_with("variant,")).count();
    let set_of = |v: MaskVariant| &ablation.iter().find(|(x, _)| *x == v).unwrap().1;
    let mean = |v: MaskVariant, s: u64| set_of(v).mean_accuracy(v, s).unwrap();
    let full_means: Vec<f64> = seeds.iter().map(|&s| mean(MaskVariant::Full, s)).collect();
    let class_means: Vec<f64> = seeds.iter().map(|&s| mean(MaskVariant::Class, s)).collect();
    let wins = (0..seeds.len()).filter(|&i| full_means[i] >= class_means[i]).count();
    let mut cells = String::new();
    for (v, set) in &ablation {
        let accs: Vec<String> = set.summary.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
        let _ = write!(cells, " {v}=[{}]", accs.join(" "));
    }
    rep.check(
        7,
        wins >= 2 && table_rows == 28,
        "ablation trend",
        format!(
            "mean accuracy full {full_means:.3?} vs class-only {class_means:.3?}, full >= class in {wins}/3; table rows {table_rows}/28;{cells}"
        ),
    );

    // Shared state for the contract checks: seed 1's full-variant generator.
    let pre_ckpt = load_checkpoint(&run.pretrain_path()).unwrap();
    let prompt_ckpt = load_checkpoint(&run.prompt_path(MaskVariant::Full, 1)).unwrap();
    let encoders = pre_ckpt.tensors.clone();
    let stack = run.stack().unwrap();
    let gen = PromptGenerator::from_store(&prompt_ckpt.tensors, true).unwrap();
    let classes = unseen_classes();
    let zs = zero_shot_setup(&gen, &classes, &run.tokenizer, &run.vocab, &encoders).unwrap();
    let corpus = load_corpus(&run.corpus_dir()).unwrap();
    let utrain: Vec<_> = corpus.into_iter().filter(|s| s.split == Split::UnseenTrain).collect();

    // 8. Few-shot isolation, audited on saved checkpoints.
    let (tuned, _) = fewshot_finetune(&stack, &encoders, &zs, 4, &utrain, &classes, &run.cfg.prompt, 1).unwrap();
    let before = roundtrip(tmp.path(), "audit-before.mpck", &with_prompt(&encoders, &zs));
    let after = roundtrip(tmp.path(), "audit-after.mpck", &with_prompt(&encoders, &tuned));
    let changed = before.diff(&after);
    let expected: Vec<String> = classes.iter().map(|&k| class_param(k)).collect();
    rep.check(
        8,
        changed == expected,
        "few-shot isolation",
        format!("changed tensors {changed:?} of {}, expected exactly the unseen class rows", before.len()),
    );

    // 9. Freeze contract.
    let refs: Vec<_> = utrain.iter().collect();
    let labelled = Labelled::embed(&stack, &encoders, &refs).unwrap();
    let (_, _) = fullshot_train(&stack, &encoders, &zs, &labelled, &classes, MaskVariant::Full.mask(), &run.cfg.prompt, 1)
        .unwrap();
    let prompt_train_diff = pre_ckpt.tensors.diff(&encoder_part(&prompt_ckpt.tensors));
    let fewshot_diff = encoder_part(&before).diff(&encoder_part(&after));
    let all_prompt_ckpts_match = MaskVariant::ALL.iter().all(|&v| {
        seeds.iter().all(|&s| {
            let c = load_checkpoint(&run.prompt_path(v, s)).unwrap();
            encoder_part(&c.tensors).diff(&pre_ckpt.tensors).is_empty()
        })
    });
    let fullshot_diff = pre_ckpt.tensors.diff(&encoders);
    rep.check(
        9,
        prompt_train_diff.is_empty() && fewshot_diff.is_empty() && fullshot_diff.is_empty() && all_prompt_ckpts_match,
        "freeze contract",
        format!(
            "encoder tensors changed: prompt_train {}, fewshot_finetune {}, fullshot_train {}; all 12 prompt checkpoints carry the pretrained encoders: {all_prompt_ckpts_match}",
            prompt_train_diff.len(),
            fewshot_diff.len(),
            fullshot_diff.len()
        ),
    );

    // 10. Footprint.
    let store = with_prompt(&encoders, &zs);
    let input = FootprintInput { image_side: 32, classes: zs.classes().len(), prompt_len: zs.m() + 1 };
    let rows = count_footprint(&store, &stack.config, input).unwrap();
    let (pg, _) = prompt_generator_total(&rows);
    let total: u64 = rows.iter().map(|r| r.params).sum();
    let per_component_exact = rows.iter().all(|r| {
        let want: usize = match r.component.as_str() {
            "meta-net" => store.iter().filter(|(n, _)| n.starts_with("prompt.meta.")).map(|(_, t)| t.numel()).sum(),
            "context" => store.get("prompt.ctx").unwrap().numel(),
            "class-embeddings" => store.iter().filter(|(n, _)| n.starts_with("prompt.class.")).map(|(_, t)| t.numel()).sum(),
            _ => return true,
        };
        want as u64 == r.params
    });
    let csv = footprint_csv(&rows, &run.hash);
    let cited = csv.contains("86,016") && csv.contains("86,112");
    rep.check(
        10,
        pg == 2500 && total == store.numel() as u64 && per_component_exact && cited,
        "footprint",
        format!(
            "prompt generator {pg} parameters (need 2500) over {} classes, whole model {total} = checkpoint sum {}, reference cited: {cited}",
            input.classes,
            store.numel()
        ),
    );

    // 11. Determinism and persistence.
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (tiny_run(a.path()), tiny_run(b.path()));
    let rerun_identical = ra == rb;
    let reread = load_checkpoint(&run.prompt_path(MaskVariant::Full, 1)).unwrap();
    let bit_exact = reread.tensors.diff(&prompt_ckpt.tensors).is_empty() && reread.meta == prompt_ckpt.meta;
    let bytes = std::fs::read(run.prompt_path(MaskVariant::Full, 1)).unwrap();
    let mut cuts_rejected = 0;
    let mut cuts = 0;
    let mut sample_msg = String::new();
    for cut in (0..bytes.len()).step_by((bytes.len() / 97).max(1)) {
        cuts += 1;
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(e @ (CheckpointError::Truncated { .. } | CheckpointError::BadMagic { .. })) => {
                cuts_rejected += 1;
                if sample_msg.is_empty() && cut > 100 {
                    sample_msg = e.to_string();
                }
            }
            _ => {}
        }
    }
    rep.check(
        11,
        rerun_identical && bit_exact && cuts_rejected == cuts,
        "determinism and persistence",
        format!(
            "rerun metrics CSV and checkpoints byte-identical: {rerun_identical}; reload bit-exact: {bit_exact}; truncations rejected {cuts_rejected}/{cuts} (e.g. \"{sample_msg}\")"
        ),
    );

    // 12. End-to-end budget.
    rep.check(
        12,
        pipeline_secs < 1800.0 && full.reports.len() == 21,
        "end-to-end budget",
        format!(
            "gen-corpus, pretrain, prompt-train and eval grid for {} seeds took {pipeline_secs:.0}s on this machine (budget 1800s), {} reports",
            seeds.len(),
            full.reports.len()
        ),
    );

    println!("\n{}", rep.lines.join("\n"));
    assert!(rep.failed.is_empty(), "failed criteria: {:?}", rep.failed);
}
