//! `dsgf label`: rule-based dynamic relation labels plus a statistics table.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use dsgf_core::relations::{build_cooccurrence_table, label_corpus, relation_stats};

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    /// Corpus to label (also the source of the co-occurrence table)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Schema file covering the corpus
    #[arg(long)]
    pub schema: PathBuf,
    /// Co-occurrence frequency threshold
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    /// Output labels file (JSON lines, one labeled turn each)
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the stats report (default: next to the labels file)
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    /// Directory for the run manifest (default: the labels file's directory)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        bail!("--threshold must be in [0, 1], got {}", args.threshold);
    }
    let (_, graph) = super::load_schema(&args.schema)?;
    let dialogues = super::load_dialogues(&args.corpus)?;
    if dialogues.is_empty() {
        bail!("corpus {} has no dialogues", args.corpus.display());
    }
    let order = super::slot_order(&graph);
    let table = build_cooccurrence_table(&dialogues)?;
    let labeled = label_corpus(&order, &dialogues, &table, args.threshold);
    let stats = relation_stats(&labeled);

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for (turn, _) in &labeled {
        writeln!(file, "{}", serde_json::to_string(turn)?)?;
    }

    let stats_text = stats.render_text();
    let stats_path = args
        .stats_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("stats.txt"));
    std::fs::write(&stats_path, &stats_text)?;
    print!("{stats_text}");

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| args.out.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    ManifestBuilder::new("label")
        .config(&serde_json::json!({ "threshold": args.threshold }))?
        .input("schema", &args.schema)?
        .input("corpus", &args.corpus)?
        .artifact(&args.out)
        .artifact(&stats_path)
        .write(&out_dir)?;
    println!("labeled {} turns -> {}", labeled.len(), args.out.display());
    Ok(())
}
