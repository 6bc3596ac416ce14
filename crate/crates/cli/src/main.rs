use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vlprompt::config::RunConfig;
use vlprompt::pipeline::{InspectRequest, Run};
use vlprompt::promptgen::{MaskVariant, ShotSpec};

/// Prompt learning for a small vision-language model on a synthetic chest
/// image corpus.
#[derive(Parser, Debug)]
#[command(name = "vlprompt", version)]
struct Cli {
    /// JSON run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pretraining seed, also the prompt seed when no --seeds is given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct SeedList {
    /// Comma-separated seeds; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Pretrain the encoders on the pretraining split.
    Pretrain,
    /// Learn base-class prompts on top of the pretrained encoders.
    PromptTrain {
        /// Trainable groups: class, context-class, metanet-class or full.
        #[arg(long, default_value = "full")]
        mask: String,
        #[command(flatten)]
        seeds: SeedList,
    },
    /// Evaluate on the unseen classes.
    Eval {
        #[arg(long, default_value = "full")]
        mask: String,
        /// zero, few:<n> or full; repeatable. Defaults to the whole grid.
        #[arg(long)]
        protocol: Vec<String>,
        #[command(flatten)]
        seeds: SeedList,
        /// Base name of the metrics files.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// All four mask variants over the whole protocol grid.
    Ablate {
        #[command(flatten)]
        seeds: SeedList,
    },
    /// Write interpretability artifacts. Without flags, all of them.
    Inspect {
        #[arg(long, default_value = "full")]
        mask: String,
        #[arg(long)]
        nearest_words: bool,
        #[arg(long)]
        context_sim: bool,
        #[arg(long)]
        footprint: bool,
        #[arg(long)]
        activation_map: bool,
    },
}

fn seeds(list: &SeedList, run: &Run, global: Option<u64>) -> Vec<u64> {
    if !list.seeds.is_empty() {
        list.seeds.clone()
    } else if let Some(s) = global {
        vec![s]
    } else {
        run.cfg.seeds.clone()
    }
}

fn mask(tag: &str) -> Result<MaskVariant> {
    Ok(tag.parse::<MaskVariant>()?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let run = Run::new(cfg, cli.out.clone())?;
    match &cli.command {
        Command::GenCorpus => {
            let n = run.gen_corpus()?;
            println!("{n} samples in {}", run.corpus_dir().display());
        }
        Command::Pretrain => {
            let s = run.pretrain()?;
            println!(
                "loss {:.4} -> {:.4}, tau {:.4}, held-out retrieval top-1 {:.4} ({:.0}s)",
                s.epoch_losses.first().copied().unwrap_or(f64::NAN),
                s.epoch_losses.last().copied().unwrap_or(f64::NAN),
                s.tau,
                s.retrieval_top1,
                s.seconds
            );
        }
        Command::PromptTrain { mask: m, seeds: list } => {
            let variant = mask(m)?;
            for seed in seeds(list, &run, cli.seed) {
                let s = run.prompt_train(variant, seed)?;
                println!("{variant} seed {seed}: base-train accuracy {:.4} ({:.0}s)", s.base_train_accuracy, s.seconds);
            }
        }
        Command::Eval { mask: m, protocol, seeds: list, run_id } => {
            let variant = mask(m)?;
            let protocols = if protocol.is_empty() {
                ShotSpec::grid()
            } else {
                protocol.iter().map(|p| p.parse::<ShotSpec>()).collect::<Result<Vec<_>, _>>()?
            };
            let id = run_id.clone().unwrap_or_else(|| format!("eval-{variant}"));
            let set = run.eval(variant, &protocols, &seeds(list, &run, cli.seed), &id)?;
            for r in &set.summary {
                println!("{:<8} accuracy {:.4} macro-AUC {:.4} ({} seeds)", r.protocol, r.accuracy, r.macro_auc, r.seeds);
            }
            println!("{} reports in {}", set.reports.len(), run.metrics_path(&id, "csv").display());
        }
        Command::Ablate { seeds: list } => {
            let all = run.ablate(&seeds(list, &run, cli.seed))?;
            for (variant, set) in &all {
                let accs: Vec<String> = set.summary.iter().map(|r| format!("{:.3}", r.accuracy)).collect();
                println!("{variant:<14} {}", accs.join(" "));
            }
            println!("table in {}", run.metrics_path("ablation", "csv").display());
        }
        Command::Inspect { mask: m, nearest_words, context_sim, footprint, activation_map } => {
            let variant = mask(m)?;
            let mut req = InspectRequest {
                nearest_words: *nearest_words,
                context_sim: *context_sim,
                footprint: *footprint,
                activation_map: *activation_map,
            };
            if req == InspectRequest::default() {
                req = InspectRequest { nearest_words: true, context_sim: true, footprint: true, activation_map: true };
            }
            let seed = cli.seed.unwrap_or(run.cfg.seed);
            if let Some(rows) = run.inspect(variant, seed, req).context("inspect")? {
                for r in rows {
                    println!("{:<18} {:>8} params {:>10} FLOPs", r.component, r.params, r.flops);
                }
            }
            println!("artifacts in {}", run.inspect_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
