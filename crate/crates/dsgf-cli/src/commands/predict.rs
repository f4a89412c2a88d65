//! `dsgf predict`: per-turn state records from a trained checkpoint.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use dsgf_core::train::{predict_corpus, Checkpoint};

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    /// Trained checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Schema to track against (may differ from the training schema; the
    /// schema-agnostic path handles unseen domains)
    #[arg(long)]
    pub schema: PathBuf,
    /// Emit strictly per-turn states instead of carrying values forward
    #[arg(long)]
    pub no_carryover: bool,
    /// Override the configured history depth (`N` or `all`)
    #[arg(long)]
    pub history_turns: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the run manifest (default: the output's directory)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let (model, mut cfg, _train_fp) = Checkpoint::load(&args.model)?.into_model()?;
    if let Some(h) = super::parse_history_flag(&args.history_turns)? {
        cfg.history_turns = h;
    }
    let (elements, graph) = super::load_schema(&args.schema)?;
    let rt = model.runtime(&elements)?;
    let dialogues = super::load_dialogues(&args.corpus)?;
    let samples = super::assemble_samples(&dialogues, &graph, cfg.sample_options())?;
    let records = predict_corpus(&model, &rt, &samples, !args.no_carryover)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| args.out.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    ManifestBuilder::new("predict")
        .config(&serde_json::json!({
            "carryover": !args.no_carryover,
            "history_turns": cfg.history_turns.to_string(),
        }))?
        .input("model", &args.model)?
        .input("schema", &args.schema)?
        .input("corpus", &args.corpus)?
        .artifact(&args.out)
        .write(&out_dir)?;
    println!("predicted {} turns -> {}", records.len(), args.out.display());
    Ok(())
}
