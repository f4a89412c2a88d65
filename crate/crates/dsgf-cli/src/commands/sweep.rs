//! `dsgf sweep`: train across a one-axis grid (propagation layers, history
//! depth, relationMLP depth, or the loss balance) and emit a summary table
//! plus a plot-data series.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, ValueEnum};
use dsgf_core::corpus::HistoryTurns;
use dsgf_core::train::TrainConfig;

use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Membership reasoning depth (graph.layers)
    Layers,
    /// History utterances kept (history_turns)
    History,
    /// Relation classifier depth (graph.relation_mlp_depth)
    MlpDepth,
    /// Loss balance coefficient (lambda_balance)
    Lambda,
}

#[derive(Parser, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated grid values (integers, or floats for lambda)
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn apply(axis: Axis, value: &str, cfg: &mut TrainConfig) -> Result<()> {
    match axis {
        Axis::Layers => cfg.graph.layers = value.parse()?,
        Axis::MlpDepth => cfg.graph.relation_mlp_depth = value.parse()?,
        Axis::History => cfg.history_turns = HistoryTurns::parse(value)?,
        Axis::Lambda => {
            cfg.lambda_balance = value.parse()?;
        }
    }
    Ok(())
}

pub fn run(args: Args) -> Result<()> {
    let base = super::train::load_config(&args.config)?;
    let values: Vec<String> = args
        .grid
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        bail!("--grid has no values");
    }
    let (elements, graph) = super::load_schema(&args.schema)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for value in &values {
        let mut cfg = base.clone();
        apply(args.axis, value, &mut cfg)?;
        cfg.validate()?;
        let samples =
            super::train::prepare_samples(&cfg, &graph, &args.corpus, &args.labels)?;
        let child_dir = args
            .out_dir
            .join(format!("{:?}_{}", args.axis, value.replace('.', "p")).to_lowercase());
        let mut child_manifest = ManifestBuilder::new("sweep-child");
        child_manifest
            .config(&cfg)?
            .seed(cfg.seed)
            .input("schema", &args.schema)?
            .input("corpus", &args.corpus)?;
        let summary = super::train::run_training(cfg, &elements, &samples, &child_dir)?;
        child_manifest
            .artifact(&child_dir.join("model.ckpt"))
            .artifact(&child_dir.join("metrics.jsonl"))
            .write(&child_dir)?;
        println!(
            "{:?} = {:<8} joint GA {:.3}",
            args.axis, value, summary.joint_ga
        );
        rows.push((
            value.clone(),
            summary.joint_ga,
            summary.final_loss.unwrap_or(f64::NAN),
        ));
    }

    let mut table = String::new();
    writeln!(table, "{:<12}{:>12}{:>14}", "value", "joint_ga", "final_loss")?;
    for (v, ga, loss) in &rows {
        writeln!(table, "{v:<12}{ga:>12.4}{loss:>14.4}")?;
    }
    let table_path = args.out_dir.join("summary.txt");
    std::fs::write(&table_path, &table)?;
    print!("{table}");

    // x,y series for plotting
    let mut series = String::from("x\tjoint_ga\n");
    for (v, ga, _) in &rows {
        writeln!(series, "{v}\t{ga}")?;
    }
    let series_path = args.out_dir.join("sweep.tsv");
    std::fs::write(&series_path, series)?;

    ManifestBuilder::new("sweep")
        .config(&serde_json::json!({
            "axis": format!("{:?}", args.axis),
            "grid": values,
            "base_config": base,
        }))?
        .seed(base.seed)
        .input("schema", &args.schema)?
        .input("corpus", &args.corpus)?
        .artifact(&table_path)
        .artifact(&series_path)
        .write(&args.out_dir)?;
    Ok(())
}
