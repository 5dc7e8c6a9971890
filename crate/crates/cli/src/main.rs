//! `lrmm` — operator surface for the shot-sequence multimodal pretraining
//! pipeline: corpus generation, pretraining, feature extraction, probes,
//! retrieval evaluation, ablations, gradient checking, and checkpoint
//! inspection.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lrmm", version, about = "Long-range multimodal pretraining on shot sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shot-sequence corpus (JSON Lines).
    GenCorpus(commands::GenCorpusArgs),
    /// Pretrain the backbone on a corpus.
    Pretrain(commands::PretrainArgs),
    /// Extract combined features for every window into a JSONL file.
    Encode(commands::EncodeArgs),
    /// Linear probes and editing tasks (class, engagement, shot-class, sso, nss).
    Probe(commands::ProbeArgs),
    /// Video <-> audio retrieval over a candidate pool.
    Retrieve(commands::RetrieveArgs),
    /// Loss-toggle matrix and sequence-length sweep.
    Ablate(commands::AblateArgs),
    /// Verify analytic gradients of the full loss against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Print checkpoint header and tensor shapes.
    InspectCkpt(commands::InspectArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(args) => commands::gen_corpus(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Encode(args) => commands::encode(args),
        Command::Probe(args) => commands::probe(args),
        Command::Retrieve(args) => commands::retrieve(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::InspectCkpt(args) => commands::inspect(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// LRMM_THREADS caps the worker count; unset leaves the default pool.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("LRMM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring invalid LRMM_THREADS={v}"),
        }
    }
}
