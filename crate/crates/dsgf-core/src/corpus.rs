//! Dialogue corpora: parsing, per-turn sample assembly with history, gold
//! span alignment and the candidate-elements sequence.
//!
//! The corpus file mirrors the SGD release layout (a JSON array of dialogues
//! with alternating USER/SYSTEM turns and per-frame cumulative states), so
//! real SGD files parse unchanged. A converter accepts MultiWOZ-style files
//! (`log` entries with cumulative `metadata` states); span annotations in
//! either format are tolerated and ignored because gold spans are re-aligned
//! against the token sequence here.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsgfError, Result};
use crate::relations::RelationMatrix;
use crate::schema::{SchemaGraph, SchemaElement, slot_id};

pub const CLASS_MARKER: &str = "[cls]";
pub const SEPARATOR: &str = "[sep]";
pub const DEFAULT_MAX_LEN: usize = 512;

/// Who produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    System,
}

/// Key of one tracked slot: the owning domain and the slot id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl SlotKey {
    pub fn new(domain: &str, slot: &str) -> Self {
        SlotKey {
            domain: domain.to_string(),
            slot: slot.to_string(),
        }
    }
}

/// The tracked user goal: (domain, slot) to value assignments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DialogueState {
    assignments: BTreeMap<SlotKey, Option<String>>,
}

impl DialogueState {
    pub fn assign(&mut self, key: SlotKey, value: Option<String>) {
        self.assignments.insert(key, value);
    }

    /// Value of a slot, if assigned and non-empty.
    pub fn value(&self, key: &SlotKey) -> Option<&str> {
        self.assignments
            .get(key)
            .and_then(|v| v.as_deref())
            .filter(|v| !v.is_empty())
    }

    /// Keys whose value is present.
    pub fn filled_slots(&self) -> impl Iterator<Item = &SlotKey> {
        self.assignments
            .iter()
            .filter(|(_, v)| v.as_deref().map(|s| !s.is_empty()).unwrap_or(false))
            .map(|(k, _)| k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SlotKey, Option<&str>)> {
        self.assignments.iter().map(|(k, v)| (k, v.as_deref()))
    }

    pub fn is_empty(&self) -> bool {
        self.filled_slots().next().is_none()
    }

    /// Canonical fill map with normalized values; None-valued entries are
    /// equivalent to absent ones.
    pub fn canonical(&self) -> BTreeMap<SlotKey, String> {
        self.assignments
            .iter()
            .filter_map(|(k, v)| {
                v.as_deref()
                    .filter(|s| !s.is_empty())
                    .map(|s| (k.clone(), normalize_value(s)))
            })
            .collect()
    }

    /// Domains with at least one filled slot.
    pub fn active_domains(&self) -> Vec<String> {
        let mut out: Vec<String> = self.filled_slots().map(|k| k.domain.clone()).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// One utterance. User turns carry the cumulative gold state when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub utterance: String,
    pub turn_index: usize,
    pub gold_state: Option<DialogueState>,
}

/// A whole dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<DialogueTurn>,
}

/// Case-fold and collapse whitespace.
pub fn normalize_value(v: &str) -> String {
    v.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace + lowercase tokenizer used by the toy encoder path.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Join a token slice back into a value string.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// How many history utterances to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryTurns {
    All,
    Turns(usize),
}

impl HistoryTurns {
    pub fn parse(s: &str) -> Result<HistoryTurns> {
        if s.eq_ignore_ascii_case("all") {
            Ok(HistoryTurns::All)
        } else {
            s.parse::<usize>()
                .map(HistoryTurns::Turns)
                .map_err(|_| DsgfError::Config(format!("invalid history-turns value '{s}'")))
        }
    }
}

impl std::fmt::Display for HistoryTurns {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HistoryTurns::All => write!(f, "all"),
            HistoryTurns::Turns(n) => write!(f, "{n}"),
        }
    }
}

/// Dialogue tokens followed by the candidate value vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateElements {
    /// `K` dialogue tokens, then one entry per vocabulary value.
    pub element_tokens: Vec<String>,
    /// Index of the first vocabulary element (= K).
    pub boundaries: usize,
}

impl CandidateElements {
    pub fn len(&self) -> usize {
        self.element_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_tokens.is_empty()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.element_tokens[self.boundaries..]
    }

    pub fn dialogue_tokens(&self) -> &[String] {
        &self.element_tokens[..self.boundaries]
    }
}

/// Gold span supervision for one slot at one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldSpan {
    /// The gold value is None.
    NoValue,
    /// Inclusive indices into the candidate elements.
    At(usize, usize),
    /// A gold value exists but could not be located; excluded from span
    /// supervision, kept for relation supervision.
    Unaligned,
}

/// One training/evaluation sample: a user turn with encoded context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub dialogue_id: String,
    pub turn_index: usize,
    /// `[cls]`, current-turn tokens, separator, history tokens with
    /// separators between utterances (oldest kept history first).
    pub tokens: Vec<String>,
    pub token_mask: Vec<bool>,
    pub gold_state: DialogueState,
    /// Cumulative gold states of earlier user turns, oldest first.
    pub history_states: Vec<DialogueState>,
    /// One entry per schema slot, in schema slot order.
    pub gold_spans: Vec<GoldSpan>,
    pub gold_relations: RelationMatrix,
    pub candidate: CandidateElements,
}

impl DialogueSample {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Previous turn's gold state, if any.
    pub fn prev_state(&self) -> Option<&DialogueState> {
        self.history_states.last()
    }
}

/// Candidate value vocabulary: union of `possible_values` of the categorical
/// slots, in schema slot order, deduplicated.
pub fn candidate_vocabulary(schema: &SchemaGraph) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for slot in schema.slots() {
        if !slot.is_categorical {
            continue;
        }
        for v in &slot.possible_values {
            if seen.insert(v.clone(), ()).is_none() {
                out.push(v.clone());
            }
        }
    }
    out
}

/// Find the last occurrence of `needle` as a contiguous subsequence of
/// `haystack`; both sides are compared case-folded.
fn last_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    let mut found = None;
    for start in 0..=(haystack.len() - needle.len()) {
        if (0..needle.len()).all(|k| haystack[start + k] == needle[k]) {
            found = Some(start);
        }
    }
    found
}

/// Align every slot's gold value to a span over the candidate elements.
///
/// Values occurring verbatim (case-folded) in the dialogue tokens resolve to
/// the last occurrence; otherwise a matching vocabulary entry resolves to
/// that single element; otherwise the slot is flagged unaligned.
pub fn align_spans(
    tokens: &[String],
    gold_state: &DialogueState,
    candidate: &CandidateElements,
    slots: &[SchemaElement],
) -> Vec<GoldSpan> {
    let vocab = candidate.vocabulary();
    slots
        .iter()
        .map(|slot| {
            let key = SlotKey::new(slot.parent_domain.as_deref().unwrap_or_default(), &slot.id);
            let Some(value) = gold_state.value(&key) else {
                return GoldSpan::NoValue;
            };
            let needle = tokenize(value);
            if let Some(start) = last_subsequence(tokens, &needle) {
                return GoldSpan::At(start, start + needle.len() - 1);
            }
            let folded = normalize_value(value);
            if let Some(idx) = vocab.iter().position(|v| normalize_value(v) == folded) {
                let p = candidate.boundaries + idx;
                return GoldSpan::At(p, p);
            }
            GoldSpan::Unaligned
        })
        .collect()
}

/// Options controlling sample assembly.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub history_turns: HistoryTurns,
    pub max_len: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            history_turns: HistoryTurns::All,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Build the token sequence for one user turn: class marker, current turn,
/// separator, then kept history utterances (chronological) each followed by
/// a separator. Truncation drops whole history utterances oldest-first and
/// never touches the current turn.
fn build_tokens(
    current: &str,
    history_utterances: &[&str],
    opts: &SampleOptions,
) -> Result<Vec<String>> {
    let keep = match opts.history_turns {
        HistoryTurns::All => history_utterances.len(),
        HistoryTurns::Turns(n) => n.min(history_utterances.len()),
    };
    let mut kept: Vec<Vec<String>> = history_utterances[history_utterances.len() - keep..]
        .iter()
        .map(|u| tokenize(u))
        .collect();

    let head_len = |cur: &[String]| 2 + cur.len(); // [cls] current [sep]
    let cur_tokens = tokenize(current);
    let mut total = head_len(&cur_tokens) + kept.iter().map(|u| u.len() + 1).sum::<usize>();
    while total > opts.max_len && !kept.is_empty() {
        let dropped = kept.remove(0);
        total -= dropped.len() + 1;
    }
    if total > opts.max_len {
        return Err(DsgfError::Corpus(format!(
            "current turn alone exceeds max_len {} ({} tokens)",
            opts.max_len, total
        )));
    }

    let mut tokens = Vec::with_capacity(total);
    tokens.push(CLASS_MARKER.to_string());
    tokens.extend(cur_tokens);
    tokens.push(SEPARATOR.to_string());
    for u in kept {
        tokens.extend(u);
        tokens.push(SEPARATOR.to_string());
    }
    Ok(tokens)
}

fn validate_dialogue(d: &Dialogue, schema: &SchemaGraph) -> Result<()> {
    let mut last: Option<(usize, Speaker)> = None;
    for t in &d.turns {
        if let Some((prev_idx, prev_speaker)) = last {
            if t.turn_index <= prev_idx {
                return Err(DsgfError::Corpus(format!(
                    "dialogue {}: turn index {} not increasing",
                    d.dialogue_id, t.turn_index
                )));
            }
            if t.speaker == prev_speaker {
                return Err(DsgfError::Corpus(format!(
                    "dialogue {}: consecutive {:?} turns at index {}",
                    d.dialogue_id, t.speaker, t.turn_index
                )));
            }
        }
        last = Some((t.turn_index, t.speaker));
        if let Some(state) = &t.gold_state {
            for (key, _) in state.iter() {
                schema.node_index(&key.slot).map_err(|_| {
                    DsgfError::Corpus(format!(
                        "dialogue {} turn {}: unknown slot '{}' in annotation",
                        d.dialogue_id, t.turn_index, key.slot
                    ))
                })?;
            }
        }
    }
    Ok(())
}

/// Iterator yielding one sample per user turn, in corpus order.
pub struct SampleStream<'a> {
    dialogues: &'a [Dialogue],
    schema: &'a SchemaGraph,
    opts: SampleOptions,
    vocab: Vec<String>,
    d_idx: usize,
    t_idx: usize,
    history_utterances: Vec<String>,
    history_states: Vec<DialogueState>,
}

impl<'a> SampleStream<'a> {
    pub fn new(dialogues: &'a [Dialogue], schema: &'a SchemaGraph, opts: SampleOptions) -> Self {
        SampleStream {
            dialogues,
            schema,
            opts,
            vocab: candidate_vocabulary(schema),
            d_idx: 0,
            t_idx: 0,
            history_utterances: Vec::new(),
            history_states: Vec::new(),
        }
    }

    fn build_sample(&self, d: &Dialogue, turn: &DialogueTurn) -> Result<DialogueSample> {
        let history_refs: Vec<&str> = self.history_utterances.iter().map(|s| s.as_str()).collect();
        let tokens = build_tokens(&turn.utterance, &history_refs, &self.opts).map_err(|e| {
            DsgfError::Corpus(format!(
                "dialogue {} turn {}: {e}",
                d.dialogue_id, turn.turn_index
            ))
        })?;
        let gold_state = turn.gold_state.clone().unwrap_or_default();
        let mut element_tokens = tokens.clone();
        element_tokens.extend(self.vocab.iter().cloned());
        let candidate = CandidateElements {
            boundaries: tokens.len(),
            element_tokens,
        };
        let gold_spans = align_spans(&tokens, &gold_state, &candidate, self.schema.slots());
        Ok(DialogueSample {
            dialogue_id: d.dialogue_id.clone(),
            turn_index: turn.turn_index,
            token_mask: vec![true; tokens.len()],
            tokens,
            gold_state,
            history_states: self.history_states.clone(),
            gold_spans,
            gold_relations: RelationMatrix::all_none(self.schema.slot_count()),
            candidate,
        })
    }
}

impl<'a> Iterator for SampleStream<'a> {
    type Item = Result<DialogueSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let d = self.dialogues.get(self.d_idx)?;
            if self.t_idx >= d.turns.len() {
                self.d_idx += 1;
                self.t_idx = 0;
                self.history_utterances.clear();
                self.history_states.clear();
                continue;
            }
            let turn = &d.turns[self.t_idx];
            self.t_idx += 1;
            match turn.speaker {
                Speaker::System => {
                    self.history_utterances.push(turn.utterance.clone());
                }
                Speaker::User => {
                    let sample = self.build_sample(d, turn);
                    if let Some(state) = &turn.gold_state {
                        self.history_states.push(state.clone());
                    }
                    self.history_utterances.push(turn.utterance.clone());
                    return Some(sample);
                }
            }
        }
    }
}

/// Parse a corpus file and assemble all samples.
///
/// Yields one sample per user turn, with history truncated to the newest
/// `history_turns` utterances; ordering is deterministic (file order).
pub fn load_corpus(
    path: &Path,
    schema: &SchemaGraph,
    opts: SampleOptions,
) -> Result<Vec<DialogueSample>> {
    let dialogues = read_corpus_file(path)?;
    samples_from_dialogues(&dialogues, schema, opts)
}

/// Assemble samples from already-parsed dialogues.
pub fn samples_from_dialogues(
    dialogues: &[Dialogue],
    schema: &SchemaGraph,
    opts: SampleOptions,
) -> Result<Vec<DialogueSample>> {
    for d in dialogues {
        validate_dialogue(d, schema)?;
    }
    SampleStream::new(dialogues, schema, opts).collect()
}

// --- corpus file format (SGD release layout) --------------------------------

#[derive(Deserialize, Serialize)]
struct SgdDialogue {
    dialogue_id: String,
    #[serde(default)]
    services: Vec<String>,
    turns: Vec<SgdTurn>,
}

#[derive(Deserialize, Serialize)]
struct SgdTurn {
    speaker: String,
    utterance: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    frames: Vec<SgdFrame>,
}

#[derive(Deserialize, Serialize)]
struct SgdFrame {
    service: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<SgdState>,
}

#[derive(Deserialize, Serialize, Default)]
struct SgdState {
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

/// Read a corpus file. A JSON array is treated as SGD layout; a JSON object
/// is converted from the MultiWOZ-style layout.
pub fn read_corpus_file(path: &Path) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return convert_multiwoz(path, &text);
    }
    let parsed: Vec<SgdDialogue> = serde_json::from_str(&text).map_err(|e| DsgfError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for d in parsed {
        let mut turns = Vec::new();
        for (i, t) in d.turns.into_iter().enumerate() {
            let speaker = match t.speaker.to_ascii_lowercase().as_str() {
                "user" => Speaker::User,
                "system" => Speaker::System,
                other => {
                    return Err(DsgfError::Parse {
                        path: path.display().to_string(),
                        message: format!(
                            "dialogue {} turn {i}: unknown speaker '{other}'",
                            d.dialogue_id
                        ),
                    })
                }
            };
            let gold_state = if speaker == Speaker::User && !t.frames.is_empty() {
                let mut st = DialogueState::default();
                for f in &t.frames {
                    if let Some(state) = &f.state {
                        for (slot_name, values) in &state.slot_values {
                            if let Some(v) = values.first() {
                                st.assign(
                                    SlotKey::new(&f.service, &slot_id(&f.service, slot_name)),
                                    Some(v.clone()),
                                );
                            }
                        }
                    }
                }
                Some(st)
            } else if speaker == Speaker::User {
                Some(DialogueState::default())
            } else {
                None
            };
            turns.push(DialogueTurn {
                speaker,
                utterance: t.utterance,
                turn_index: i,
                gold_state,
            });
        }
        out.push(Dialogue {
            dialogue_id: d.dialogue_id,
            turns,
        });
    }
    Ok(out)
}

/// Serialize dialogues back to the SGD layout.
pub fn write_corpus_file(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let out: Vec<SgdDialogue> = dialogues
        .iter()
        .map(|d| SgdDialogue {
            dialogue_id: d.dialogue_id.clone(),
            services: Vec::new(),
            turns: d
                .turns
                .iter()
                .map(|t| SgdTurn {
                    speaker: match t.speaker {
                        Speaker::User => "USER".to_string(),
                        Speaker::System => "SYSTEM".to_string(),
                    },
                    utterance: t.utterance.clone(),
                    frames: match (&t.gold_state, t.speaker) {
                        (Some(state), Speaker::User) => state_to_frames(state),
                        _ => Vec::new(),
                    },
                })
                .collect(),
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn state_to_frames(state: &DialogueState) -> Vec<SgdFrame> {
    let mut by_service: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    for (key, value) in state.iter() {
        let Some(v) = value else { continue };
        let slot_name = key
            .slot
            .strip_prefix(&format!("{}/", key.domain))
            .unwrap_or(&key.slot)
            .to_string();
        by_service
            .entry(key.domain.clone())
            .or_default()
            .insert(slot_name, vec![v.to_string()]);
    }
    by_service
        .into_iter()
        .map(|(service, slot_values)| SgdFrame {
            service,
            state: Some(SgdState { slot_values }),
        })
        .collect()
}

// --- MultiWOZ-style converter ------------------------------------------------

#[derive(Deserialize)]
struct MwzDialogue {
    log: Vec<MwzLogEntry>,
}

#[derive(Deserialize)]
struct MwzLogEntry {
    text: String,
    #[serde(default)]
    metadata: BTreeMap<String, MwzDomainState>,
}

#[derive(Deserialize, Default)]
struct MwzDomainState {
    #[serde(default)]
    semi: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    book: BTreeMap<String, serde_json::Value>,
}

fn mwz_value(v: &serde_json::Value) -> Option<String> {
    let s = match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(a) => a.first().and_then(|x| x.as_str()).map(str::to_string)?,
        _ => return None,
    };
    let lowered = s.trim().to_lowercase();
    if lowered.is_empty() || lowered == "not mentioned" || lowered == "none" {
        None
    } else {
        Some(s)
    }
}

/// Convert a MultiWOZ-style file: an object mapping dialogue id to a dialogue
/// with a `log` of alternating user/system entries; system entries carry the
/// cumulative state in `metadata` (which becomes the preceding user turn's
/// gold state). Span annotations, acts and booking descriptors are ignored.
fn convert_multiwoz(path: &Path, text: &str) -> Result<Vec<Dialogue>> {
    let parsed: BTreeMap<String, MwzDialogue> =
        serde_json::from_str(text).map_err(|e| DsgfError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (id, d) in parsed {
        let mut turns = Vec::new();
        let mut i = 0;
        while i < d.log.len() {
            let user = &d.log[i];
            let system = d.log.get(i + 1);
            let mut state = DialogueState::default();
            if let Some(sys) = system {
                for (domain, ds) in &sys.metadata {
                    for (slot, v) in ds.semi.iter().chain(ds.book.iter()) {
                        if slot == "booked" {
                            continue;
                        }
                        if let Some(value) = mwz_value(v) {
                            state.assign(
                                SlotKey::new(domain, &slot_id(domain, slot)),
                                Some(value),
                            );
                        }
                    }
                }
            }
            turns.push(DialogueTurn {
                speaker: Speaker::User,
                utterance: user.text.clone(),
                turn_index: i,
                gold_state: Some(state),
            });
            if let Some(sys) = system {
                turns.push(DialogueTurn {
                    speaker: Speaker::System,
                    utterance: sys.text.clone(),
                    turn_index: i + 1,
                    gold_state: None,
                });
            }
            i += 2;
        }
        out.push(Dialogue {
            dialogue_id: id,
            turns,
        });
    }
    Ok(out)
}
