//! `dsgf train`: train a tracker, persist per-epoch metrics and a versioned
//! checkpoint.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use dsgf_core::corpus::DialogueSample;
use dsgf_core::eval::{gold_records, joint_goal_accuracy, relation_metrics};
use dsgf_core::relations::{build_cooccurrence_table, LabeledTurn, RelationMatrix};
use dsgf_core::schema::SchemaElement;
use dsgf_core::train::{
    apply_labels, label_samples, predict_corpus, train, TrainConfig, Trainer,
};

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    /// Training configuration (TOML); defaults apply for missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Precomputed labels (from `dsgf label`); computed on the fly otherwise
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Override the configured history depth (`N` or `all`)
    #[arg(long)]
    pub history_turns: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(TrainConfig::from_toml_str(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledTurn>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Load, assemble and label the training samples per the config.
pub fn prepare_samples(
    cfg: &TrainConfig,
    schema_graph: &dsgf_core::schema::SchemaGraph,
    corpus_path: &Path,
    labels_path: &Option<PathBuf>,
) -> Result<Vec<DialogueSample>> {
    let dialogues = super::load_dialogues(corpus_path)?;
    let mut samples = super::assemble_samples(&dialogues, schema_graph, cfg.sample_options())?;
    let order = super::slot_order(schema_graph);
    match labels_path {
        Some(p) => apply_labels(&mut samples, &order, &read_labels(p)?)?,
        None => {
            let table = build_cooccurrence_table(&dialogues)?;
            label_samples(&mut samples, &order, &table, cfg.cooccurrence_threshold);
        }
    }
    Ok(samples)
}

/// Training-set metrics computed after the run.
#[derive(serde::Serialize)]
pub struct TrainSummary {
    pub joint_ga: f64,
    pub relation_accuracy: Option<f64>,
    pub relation_f1: Option<f64>,
    pub final_loss: Option<f64>,
    pub epochs: usize,
    pub samples: usize,
}

pub fn summarize(trainer: &Trainer, samples: &[DialogueSample], final_loss: Option<f64>) -> Result<TrainSummary> {
    let preds = predict_corpus(trainer.model(), trainer.runtime(), samples, true)?;
    let gold = gold_records(samples);
    let joint_ga = joint_goal_accuracy(&preds, &gold)?;
    let gold_rel: Vec<RelationMatrix> = samples.iter().map(|s| s.gold_relations.clone()).collect();
    let mut pred_rel = Vec::with_capacity(samples.len());
    for s in samples {
        pred_rel.push(
            trainer
                .model()
                .infer_turn(trainer.runtime(), s, &Default::default(), true)?
                .relations,
        );
    }
    let (relation_f1, relation_accuracy) = match relation_metrics(&pred_rel, &gold_rel) {
        Ok((f1, acc)) => (Some(f1), Some(acc)),
        Err(_) => (None, None),
    };
    Ok(TrainSummary {
        joint_ga,
        relation_accuracy,
        relation_f1,
        final_loss,
        epochs: 0,
        samples: samples.len(),
    })
}

/// Shared by `train` and each `sweep` child.
pub fn run_training(
    cfg: TrainConfig,
    schemata: &[SchemaElement],
    samples: &[DialogueSample],
    out_dir: &Path,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let epochs = cfg.epochs;
    let (trainer, metrics) = train(cfg, schemata, samples)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut f = std::fs::File::create(&metrics_path)?;
    for m in &metrics {
        writeln!(f, "{}", serde_json::to_string(m)?)?;
    }
    let ckpt_path = out_dir.join("model.ckpt");
    trainer.checkpoint().save(&ckpt_path)?;

    let mut summary = summarize(&trainer, samples, metrics.last().map(|m| m.loss))?;
    summary.epochs = epochs;
    std::fs::write(
        out_dir.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(h) = super::parse_history_flag(&args.history_turns)? {
        cfg.history_turns = h;
    }
    cfg.validate()?;
    let (elements, graph) = super::load_schema(&args.schema)?;
    let samples = prepare_samples(&cfg, &graph, &args.corpus, &args.labels)?;

    let mut manifest = ManifestBuilder::new("train");
    manifest
        .config(&cfg)?
        .seed(cfg.seed)
        .input("schema", &args.schema)?
        .input("corpus", &args.corpus)?;
    if let Some(labels) = &args.labels {
        manifest.input("labels", labels)?;
    }

    let summary = run_training(cfg, &elements, &samples, &args.out_dir)?;
    manifest
        .artifact(&args.out_dir.join("model.ckpt"))
        .artifact(&args.out_dir.join("metrics.jsonl"))
        .artifact(&args.out_dir.join("train_summary.json"))
        .write(&args.out_dir)?;

    println!(
        "trained {} epochs on {} samples; train joint GA {:.3}{}",
        summary.epochs,
        summary.samples,
        summary.joint_ga,
        match summary.relation_accuracy {
            Some(acc) => format!(", relation accuracy {acc:.3}"),
            None => String::new(),
        }
    );
    println!("checkpoint: {}", args.out_dir.join("model.ckpt").display());
    Ok(())
}
