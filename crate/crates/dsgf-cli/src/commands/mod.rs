pub mod eval;
pub mod gendata;
pub mod inspect;
pub mod label;
pub mod predict;
pub mod sweep;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};
use dsgf_core::corpus::{Dialogue, DialogueSample, HistoryTurns, SampleOptions};
use dsgf_core::schema::{build_schema_graph, load_schema_file, SchemaElement, SchemaGraph};

pub fn load_schema(path: &Path) -> Result<(Vec<SchemaElement>, SchemaGraph)> {
    let elements = load_schema_file(path)
        .with_context(|| format!("loading schema {}", path.display()))?;
    let graph = build_schema_graph(&elements)?;
    Ok((elements, graph))
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    dsgf_core::corpus::read_corpus_file(path)
        .with_context(|| format!("loading corpus {}", path.display()))
        .map_err(Into::into)
}

pub fn assemble_samples(
    dialogues: &[Dialogue],
    graph: &SchemaGraph,
    opts: SampleOptions,
) -> Result<Vec<DialogueSample>> {
    dsgf_core::corpus::samples_from_dialogues(dialogues, graph, opts).map_err(Into::into)
}

pub fn parse_history_flag(flag: &Option<String>) -> Result<Option<HistoryTurns>> {
    match flag {
        None => Ok(None),
        Some(s) => Ok(Some(HistoryTurns::parse(s)?)),
    }
}

pub fn slot_order(graph: &SchemaGraph) -> Vec<String> {
    graph.slots().iter().map(|s| s.id.clone()).collect()
}
