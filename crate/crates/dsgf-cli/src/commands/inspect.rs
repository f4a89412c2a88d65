//! `dsgf inspect-graph`: text rendering of the schema graph nodes and
//! static edges, plus a turn's dynamic relation edges (predicted by a model,
//! or rule-derived from gold states when no model is given).

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Parser;
use dsgf_core::corpus::SampleOptions;
use dsgf_core::relations::{build_cooccurrence_table, label_turn, RelationMatrix};
use dsgf_core::schema::ElementKind;
use dsgf_core::train::Checkpoint;

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    #[arg(long)]
    pub schema: PathBuf,
    /// Trained checkpoint; dynamic edges come from model predictions
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus holding the turn to inspect
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Dialogue id within the corpus
    #[arg(long)]
    pub dialogue: Option<String>,
    /// Turn index within the dialogue (default: the last user turn)
    #[arg(long)]
    pub turn: Option<usize>,
    /// Co-occurrence threshold for rule-derived edges (no-model path)
    #[arg(long, default_value_t = 0.05)]
    pub threshold: f64,
    /// Directory for the run manifest
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        bail!("--threshold must be in [0, 1], got {}", args.threshold);
    }
    let (elements, graph) = super::load_schema(&args.schema)?;
    let mut out = String::new();

    out.push_str(&format!(
        "nodes: {} ({} slots, {} domains)\n",
        graph.node_count(),
        graph.slot_count(),
        graph.domain_count()
    ));
    for node in graph.nodes() {
        match node.kind {
            ElementKind::Slot => out.push_str(&format!(
                "  [slot]   {} ({})\n",
                node.id,
                node.parent_domain.as_deref().unwrap_or("?")
            )),
            ElementKind::Domain => out.push_str(&format!("  [domain] {}\n", node.id)),
        }
    }

    out.push_str(&format!("static edges: {}\n", graph.static_edge_count()));
    let nodes = graph.nodes();
    let mut self_loops = 0;
    for i in 0..graph.node_count() {
        for j in i..graph.node_count() {
            if !graph.has_static_edge(i, j) {
                continue;
            }
            if i == j {
                self_loops += 1;
                continue;
            }
            let class = if nodes[i].kind == ElementKind::Domain
                && nodes[j].kind == ElementKind::Domain
            {
                "inter-domain"
            } else {
                "membership"
            };
            out.push_str(&format!("  {} -- {}  ({class})\n", nodes[i].id, nodes[j].id));
        }
    }
    out.push_str(&format!("  self-loops: {self_loops}\n"));

    if let Some(corpus_path) = &args.corpus {
        let dialogues = super::load_dialogues(corpus_path)?;
        let samples =
            super::assemble_samples(&dialogues, &graph, SampleOptions::default())?;
        let in_dialogue: Vec<_> = samples
            .iter()
            .filter(|s| args.dialogue.as_ref().is_none_or(|d| &s.dialogue_id == d))
            .collect();
        let sample = match args.turn {
            Some(t) => in_dialogue.iter().find(|s| s.turn_index == t).copied(),
            None => in_dialogue.last().copied(),
        };
        let Some(sample) = sample else {
            bail!("no matching user turn in {}", corpus_path.display());
        };

        let (source, matrix): (&str, RelationMatrix) = match &args.model {
            Some(model_path) => {
                let (model, _, _) = Checkpoint::load(model_path)?.into_model()?;
                let rt = model.runtime(&elements)?;
                let pred = model.infer_turn(&rt, sample, &Default::default(), true)?;
                ("predicted", pred.relations)
            }
            None => {
                let table = build_cooccurrence_table(&dialogues)?;
                let order = super::slot_order(&graph);
                let m = label_turn(
                    &order,
                    &sample.history_states,
                    &sample.gold_state,
                    &table,
                    args.threshold,
                );
                ("gold-rule", m)
            }
        };

        out.push_str(&format!(
            "dynamic edges for {} turn {} ({source}):\n",
            sample.dialogue_id, sample.turn_index
        ));
        let slots = graph.slots();
        let mut any = false;
        for (i, j, kind) in matrix.upper_triangle() {
            if kind != dsgf_core::relations::RelationKind::None {
                out.push_str(&format!(
                    "  {} -- {} : {}\n",
                    slots[i].id,
                    slots[j].id,
                    kind.label()
                ));
                any = true;
            }
        }
        if !any {
            out.push_str("  (none)\n");
        }
    }

    print!("{out}");
    let mut manifest = ManifestBuilder::new("inspect-graph");
    manifest
        .config(&serde_json::json!({ "threshold": args.threshold }))?
        .input("schema", &args.schema)?;
    if let Some(c) = &args.corpus {
        manifest.input("corpus", c)?;
    }
    if let Some(m) = &args.model {
        manifest.input("model", m)?;
    }
    manifest.write(&args.out_dir)?;
    Ok(())
}
