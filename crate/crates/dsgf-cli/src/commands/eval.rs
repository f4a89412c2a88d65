//! `dsgf eval`: joint goal accuracy, per-domain breakdown, seen/unseen
//! marking and optional relation metrics, rendered as a text report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use dsgf_core::corpus::Speaker;
use dsgf_core::eval::evaluate;
use dsgf_core::relations::{RelationKind, RelationMatrix};
use dsgf_core::train::{Checkpoint, PredictionRecord};

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    /// Predictions file (JSON lines from `dsgf predict`)
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold corpus with state annotations
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Training checkpoint; enables seen/unseen domain marking
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Gold relation labels (from `dsgf label`); enables relation metrics
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Directory for the run manifest (default: the report's directory)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn read_predictions(path: &PathBuf) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn sparse_to_matrix(
    pairs: &[(String, String, RelationKind)],
    slot_index: &BTreeMap<&str, usize>,
) -> Result<RelationMatrix> {
    let mut m = RelationMatrix::all_none(slot_index.len());
    for (a, b, kind) in pairs {
        if *kind == RelationKind::None {
            continue;
        }
        let (Some(&i), Some(&j)) = (slot_index.get(a.as_str()), slot_index.get(b.as_str())) else {
            anyhow::bail!("relation label references unknown slot pair ({a}, {b})");
        };
        m.set_pair(i, j, *kind)?;
    }
    Ok(m)
}

pub fn run(args: Args) -> Result<()> {
    let (_, graph) = super::load_schema(&args.schema)?;
    let predictions = read_predictions(&args.pred)?;
    let dialogues = super::load_dialogues(&args.gold)?;
    let gold: Vec<PredictionRecord> = dialogues
        .iter()
        .flat_map(|d| {
            d.turns
                .iter()
                .filter(|t| t.speaker == Speaker::User)
                .map(|t| PredictionRecord {
                    dialogue_id: d.dialogue_id.clone(),
                    turn_index: t.turn_index,
                    state: t.gold_state.clone().unwrap_or_default(),
                    relations: Vec::new(),
                })
        })
        .collect();

    let train_fp = match &args.model {
        Some(path) => Some(Checkpoint::load(path)?.schema_fingerprint),
        None => None,
    };

    // relation metrics need gold labels and per-turn predicted relations
    let order = super::slot_order(&graph);
    let slot_index: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let relation_pair_data = match &args.labels {
        Some(path) => {
            let labeled = crate::commands::train::read_labels(path)?;
            let by_key: BTreeMap<(String, usize), &dsgf_core::relations::LabeledTurn> = labeled
                .iter()
                .map(|t| ((t.dialogue_id.clone(), t.turn_index), t))
                .collect();
            let mut pred_ms = Vec::new();
            let mut gold_ms = Vec::new();
            for p in &predictions {
                let key = (p.dialogue_id.clone(), p.turn_index);
                let Some(gold_turn) = by_key.get(&key) else {
                    continue;
                };
                pred_ms.push(sparse_to_matrix(&p.relations, &slot_index)?);
                gold_ms.push(sparse_to_matrix(&gold_turn.pairs, &slot_index)?);
            }
            Some((pred_ms, gold_ms))
        }
        None => None,
    };

    let report = evaluate(
        &predictions,
        &gold,
        &graph,
        train_fp.as_ref(),
        relation_pair_data
            .as_ref()
            .map(|(p, g)| (p.as_slice(), g.as_slice())),
    )?;
    let text = report.render_text();
    if let Some(parent) = args.report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.report, &text)?;
    print!("{text}");

    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| args.report.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut manifest = ManifestBuilder::new("eval");
    manifest
        .config(&serde_json::json!({ "report": args.report.display().to_string() }))?
        .input("pred", &args.pred)?
        .input("gold", &args.gold)?
        .input("schema", &args.schema)?;
    if let Some(m) = &args.model {
        manifest.input("model", m)?;
    }
    if let Some(l) = &args.labels {
        manifest.input("labels", l)?;
    }
    manifest.artifact(&args.report).write(&out_dir)?;
    Ok(())
}
