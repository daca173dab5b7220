//! Command-line interface for the synthesis / labeling / training pipeline.
//!
//! Every subcommand is deterministic given its inputs and seeds: datasets,
//! checkpoints, and metrics rerun to byte-identical files.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use synrl::dataset::{load_dataset, save_dataset};
use synrl::experiment::{load_experiment_spec, run_experiment};
use synrl::labeling::label_offline;
use synrl::policy::{load_checkpoint, save_checkpoint, standard_vocab, PolicyParams};
use synrl::retrieval::{load_corpus, load_entities, save_corpus};
use synrl::synthesis::{
    synthesize, ExternalGenerator, Generator, GeneratorKind, SynthesisConfig,
};
use synrl::trainer::{load_plan, run_stage_plan, write_metrics_csv};

#[derive(Parser)]
#[command(name = "synrl", version, about = "Synthetic-question pipeline: synthesis, pseudo-labeling, group-relative RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fill missing embeddings in a corpus file with the hash embedder.
    IngestCorpus {
        /// Embedding dimension.
        #[arg(long)]
        dim: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic question dataset from seed questions.
    Synthesize {
        /// Knowledge-injection probability in [0, 1].
        #[arg(long)]
        alpha: f64,
        /// Number of questions to generate.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Retrieval depth for injected requests.
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Embedding dimension used when corpus/entity files lack embeddings.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// External generator endpoint; the local template composer is used
        /// when absent.
        #[arg(long)]
        endpoint: Option<String>,
        /// Bearer token for the external generator.
        #[arg(long)]
        auth_token: Option<String>,
    },
    /// Policy checkpoint management.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Assign offline majority-vote pseudo-labels with a frozen policy.
    Label {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "G", default_value_t = 8)]
        group_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a multi-stage training plan.
    Train {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Experiment harness.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Initialize a random policy checkpoint.
    Init {
        /// Total vocabulary size (answer letters first, then fillers).
        #[arg(long)]
        vocab_size: usize,
        /// Feature dimension.
        #[arg(long)]
        dim: usize,
        /// Response length in tokens.
        #[arg(long = "T", default_value_t = 4)]
        response_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Gaussian scale of the initial parameters.
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run an experiment spec (labeling dynamics, stage ablation, alpha
    /// sweep, or long run).
    Run {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::IngestCorpus { dim, input, out } => {
            let docs = load_corpus(&input, dim)
                .with_context(|| format!("loading corpus {}", input.display()))?;
            save_corpus(&docs, &out)?;
            println!("ingested {} docs -> {}", docs.len(), out.display());
        }
        Command::Synthesize {
            alpha,
            n,
            seeds,
            corpus,
            entities,
            out,
            k,
            seed,
            dim,
            endpoint,
            auth_token,
        } => {
            let seed_pool = load_dataset(&seeds)
                .with_context(|| format!("loading seeds {}", seeds.display()))?;
            let corpus_docs = match &corpus {
                Some(path) => load_corpus(path, dim)
                    .with_context(|| format!("loading corpus {}", path.display()))?,
                None => Vec::new(),
            };
            let entity_list = match &entities {
                Some(path) => load_entities(path, dim)
                    .with_context(|| format!("loading entities {}", path.display()))?,
                None => Vec::new(),
            };
            if alpha > 0.0 && (corpus.is_none() || entities.is_none()) {
                bail!("--corpus and --entities are required when alpha > 0");
            }
            let config = SynthesisConfig {
                alpha,
                k,
                n_target: n,
                rng_seed: seed,
                generator: if endpoint.is_some() {
                    GeneratorKind::ExternalClient
                } else {
                    GeneratorKind::LocalTemplate
                },
            };
            let external;
            let generator = match endpoint {
                Some(url) => {
                    external = ExternalGenerator::new(url, auth_token)?;
                    Generator::External(&external)
                }
                None => Generator::Local,
            };
            let dataset = synthesize(&config, &seed_pool, &corpus_docs, &entity_list, generator)?;
            save_dataset(&dataset, &out)?;
            let injected = synrl::synthesis::injected_fraction(&dataset);
            println!(
                "synthesized {} questions (injected fraction {:.4}, digest {}) -> {}",
                dataset.len(),
                injected,
                dataset.content_digest,
                out.display()
            );
        }
        Command::Policy(PolicyCommand::Init {
            vocab_size,
            dim,
            response_len,
            seed,
            temperature,
            scale,
            out,
        }) => {
            let params = PolicyParams::init_random(
                standard_vocab(vocab_size),
                dim,
                response_len,
                temperature,
                scale,
                seed,
            )?;
            save_checkpoint(&params, &out)?;
            println!("policy {} -> {}", params.digest(), out.display());
        }
        Command::Label {
            policy,
            input,
            group_size,
            seed,
            out,
            report,
        } => {
            let params = load_checkpoint(&policy)
                .with_context(|| format!("loading policy {}", policy.display()))?;
            let dataset = load_dataset(&input)
                .with_context(|| format!("loading dataset {}", input.display()))?;
            let (labeled, rep) = label_offline(&dataset, &params, group_size, seed)?;
            save_dataset(&labeled, &out)?;
            rep.save(&report)?;
            println!(
                "labeled {}/{} questions (dropped {}, digest {}) -> {}",
                rep.labeled,
                rep.total,
                rep.dropped,
                labeled.content_digest,
                out.display()
            );
        }
        Command::Train {
            plan,
            policy,
            out,
            metrics,
        } => {
            let plan_file = load_plan(&plan)
                .with_context(|| format!("loading plan {}", plan.display()))?;
            let base = load_checkpoint(&policy)
                .with_context(|| format!("loading policy {}", policy.display()))?;
            let mut datasets = BTreeMap::new();
            for stage in &plan_file.plan.stages {
                for binding in &stage.bindings {
                    if !datasets.contains_key(&binding.key) {
                        let ds = load_dataset(&binding.key)
                            .with_context(|| format!("loading dataset {}", binding.key))?;
                        datasets.insert(binding.key.clone(), ds);
                    }
                }
            }
            let holdout = match &plan_file.holdout {
                Some(path) => Some(
                    load_dataset(path)
                        .with_context(|| format!("loading holdout {path}"))?,
                ),
                None => None,
            };
            let outcome = run_stage_plan(&plan_file.plan, &datasets, &base, holdout.as_ref())?;
            save_checkpoint(&outcome.final_params, &out)?;
            write_metrics_csv(&outcome.metrics, &metrics)?;
            println!(
                "trained {} steps over {} stages; final policy {} -> {}",
                outcome.metrics.len(),
                plan_file.plan.stages.len(),
                outcome.final_params.digest(),
                out.display()
            );
        }
        Command::Experiment(ExperimentCommand::Run { spec }) => {
            let spec = load_experiment_spec(&spec)?;
            run_experiment(&spec)?;
            println!(
                "experiment `{}` complete -> {}",
                spec.name,
                spec.out_dir.join(&spec.name).display()
            );
        }
    }
    Ok(())
}
