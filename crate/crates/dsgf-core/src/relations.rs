//! Dynamic slot-relation labels: per-turn relation matrices, the
//! co-occurrence table built from a training split, and corpus statistics.
//!
//! Candidate pairs at a turn are the distinct slot pairs filled in the
//! current gold state. Rules apply in priority order: co-reference (a slot's
//! current value was assigned to another slot at an earlier turn), then
//! co-update (both slots changed this turn), then co-occurrence (pair
//! frequency over training dialogues above the threshold). Everything else is
//! none.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_value, Dialogue, DialogueState, SlotKey};
use crate::error::{DsgfError, Result};

/// The four relation classes. The numeric order is the class index used by
/// the relation classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RelationKind {
    None = 0,
    CoReference = 1,
    CoUpdate = 2,
    CoOccurrence = 3,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::None,
        RelationKind::CoReference,
        RelationKind::CoUpdate,
        RelationKind::CoOccurrence,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RelationKind> {
        RelationKind::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            RelationKind::None => "none",
            RelationKind::CoReference => "co-reference",
            RelationKind::CoUpdate => "co-update",
            RelationKind::CoOccurrence => "co-occurrence",
        }
    }
}

/// Symmetric slot-by-slot relation labels for one turn. The diagonal is
/// fixed to none and only slot nodes are represented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMatrix {
    n: usize,
    labels: Vec<RelationKind>,
}

impl RelationMatrix {
    pub fn all_none(n: usize) -> Self {
        RelationMatrix {
            n,
            labels: vec![RelationKind::None; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> RelationKind {
        self.labels[i * self.n + j]
    }

    /// Set both (i, j) and (j, i). The diagonal cannot be set.
    pub fn set_pair(&mut self, i: usize, j: usize, kind: RelationKind) -> Result<()> {
        if i == j {
            return Err(DsgfError::Shape(
                "relation matrix diagonal is fixed to none".to_string(),
            ));
        }
        if i >= self.n || j >= self.n {
            return Err(DsgfError::Shape(format!(
                "pair ({i},{j}) out of bounds for {} slots",
                self.n
            )));
        }
        self.labels[i * self.n + j] = kind;
        self.labels[j * self.n + i] = kind;
        Ok(())
    }

    pub fn is_symmetric_with_none_diagonal(&self) -> bool {
        for i in 0..self.n {
            if self.get(i, i) != RelationKind::None {
                return false;
            }
            for j in 0..i {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    /// Upper-triangle entries as (i, j, kind) with i < j.
    pub fn upper_triangle(&self) -> Vec<(usize, usize, RelationKind)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                out.push((i, j, self.get(i, j)));
            }
        }
        out
    }
}

/// Pair-fill frequencies over the dialogues of a training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    /// Keyed by (slot id, slot id) with the lexicographically smaller id
    /// first; value in [0, 1].
    frequencies: BTreeMap<(String, String), f64>,
    dialogue_count: usize,
}

impl CooccurrenceTable {
    pub fn frequency(&self, a: &str, b: &str) -> f64 {
        let key = ordered_key(a, b);
        self.frequencies.get(&key).copied().unwrap_or(0.0)
    }

    pub fn dialogue_count(&self) -> usize {
        self.dialogue_count
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(String, String), &f64)> {
        self.frequencies.iter()
    }
}

fn ordered_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Final cumulative gold state of a dialogue (last user turn carrying one).
fn final_state(d: &Dialogue) -> Option<&DialogueState> {
    d.turns.iter().rev().find_map(|t| t.gold_state.as_ref())
}

/// Fraction of dialogues whose final gold state fills both slots of a pair.
///
/// Built on the training split only; applying a table built on evaluation
/// data would leak test statistics into the labels.
pub fn build_cooccurrence_table(training: &[Dialogue]) -> Result<CooccurrenceTable> {
    if training.is_empty() {
        return Err(DsgfError::Corpus(
            "cannot build a co-occurrence table from an empty corpus".to_string(),
        ));
    }
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for d in training {
        let Some(state) = final_state(d) else { continue };
        let filled: Vec<&SlotKey> = state.filled_slots().collect();
        for (ai, a) in filled.iter().enumerate() {
            for b in filled.iter().skip(ai + 1) {
                let key = ordered_key(&a.slot, &b.slot);
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }
    let total = training.len() as f64;
    Ok(CooccurrenceTable {
        frequencies: counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / total))
            .collect(),
        dialogue_count: training.len(),
    })
}

/// Label one turn's slot pairs.
///
/// `slot_order` fixes the matrix indices; `history` holds the gold states of
/// the earlier turns of the same dialogue, oldest first.
pub fn label_turn(
    slot_order: &[String],
    history: &[DialogueState],
    current: &DialogueState,
    table: &CooccurrenceTable,
    threshold: f64,
) -> RelationMatrix {
    let n = slot_order.len();
    let mut m = RelationMatrix::all_none(n);
    let index: BTreeMap<&str, usize> = slot_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let prev = history.last();
    let filled: Vec<&SlotKey> = current.filled_slots().collect();

    for (ai, a) in filled.iter().enumerate() {
        for b in filled.iter().skip(ai + 1) {
            let (Some(&i), Some(&j)) = (index.get(a.slot.as_str()), index.get(b.slot.as_str()))
            else {
                continue;
            };
            let kind = if is_coreference(history, current, a, b) {
                RelationKind::CoReference
            } else if updated_this_turn(prev, current, a) && updated_this_turn(prev, current, b) {
                RelationKind::CoUpdate
            } else if table.frequency(&a.slot, &b.slot) > threshold {
                RelationKind::CoOccurrence
            } else {
                RelationKind::None
            };
            if kind != RelationKind::None {
                m.set_pair(i, j, kind).expect("indices in range");
            }
        }
    }
    m
}

/// One slot's current value was assigned to the other slot at an earlier turn
/// (in either direction).
fn is_coreference(
    history: &[DialogueState],
    current: &DialogueState,
    a: &SlotKey,
    b: &SlotKey,
) -> bool {
    let assigned_earlier = |target: &SlotKey, value: &str| {
        history.iter().any(|st| {
            st.value(target)
                .map(|v| normalize_value(v) == value)
                .unwrap_or(false)
        })
    };
    let va = current.value(a).map(normalize_value);
    let vb = current.value(b).map(normalize_value);
    match (va, vb) {
        (Some(va), Some(vb)) => assigned_earlier(a, &vb) || assigned_earlier(b, &va),
        _ => false,
    }
}

/// The slot's value changed at this turn (newly filled or overwritten).
fn updated_this_turn(prev: Option<&DialogueState>, current: &DialogueState, key: &SlotKey) -> bool {
    let now = current.value(key);
    let before = prev.and_then(|p| p.value(key));
    match (before, now) {
        (_, None) => false,
        (None, Some(_)) => true,
        (Some(b), Some(n)) => normalize_value(b) != normalize_value(n),
    }
}

/// Relation-kind proportions over a labeled corpus.
///
/// `pair_proportions` are over all candidate pair instances (turn-local slot
/// pairs with both slots filled); `turn_proportions` count the fraction of
/// turns containing at least one edge of each kind. The pair-level numbers
/// are the ones comparable across corpora.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationStats {
    pub pair_proportions: BTreeMap<RelationKind, f64>,
    pub turn_proportions: BTreeMap<RelationKind, f64>,
    pub pair_count: usize,
    pub turn_count: usize,
}

impl RelationStats {
    pub fn pair_pct(&self, kind: RelationKind) -> f64 {
        self.pair_proportions.get(&kind).copied().unwrap_or(0.0) * 100.0
    }

    /// Plain-text table with one row per relation kind.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16}{:>12}{:>12}\n",
            "Relation", "Pair %", "Turn %"
        ));
        for kind in [
            RelationKind::CoReference,
            RelationKind::CoUpdate,
            RelationKind::CoOccurrence,
            RelationKind::None,
        ] {
            out.push_str(&format!(
                "{:<16}{:>11.2}%{:>11.2}%\n",
                kind.label(),
                self.pair_proportions.get(&kind).copied().unwrap_or(0.0) * 100.0,
                self.turn_proportions.get(&kind).copied().unwrap_or(0.0) * 100.0,
            ));
        }
        out.push_str(&format!(
            "pairs: {}   turns: {}\n",
            self.pair_count, self.turn_count
        ));
        out
    }
}

/// A labeled turn: which pairs were candidates and their labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledTurn {
    pub dialogue_id: String,
    pub turn_index: usize,
    /// (slot id, slot id, kind) for every candidate pair, including none.
    pub pairs: Vec<(String, String, RelationKind)>,
}

/// Label every user turn of every dialogue.
pub fn label_corpus(
    slot_order: &[String],
    dialogues: &[Dialogue],
    table: &CooccurrenceTable,
    threshold: f64,
) -> Vec<(LabeledTurn, RelationMatrix)> {
    let mut out = Vec::new();
    for d in dialogues {
        let mut history: Vec<DialogueState> = Vec::new();
        for t in &d.turns {
            let Some(state) = t.gold_state.as_ref() else {
                continue;
            };
            let m = label_turn(slot_order, &history, state, table, threshold);
            let filled: Vec<&SlotKey> = state.filled_slots().collect();
            let index: BTreeMap<&str, usize> = slot_order
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect();
            let mut pairs = Vec::new();
            for (ai, a) in filled.iter().enumerate() {
                for b in filled.iter().skip(ai + 1) {
                    if let (Some(&i), Some(&j)) =
                        (index.get(a.slot.as_str()), index.get(b.slot.as_str()))
                    {
                        pairs.push((a.slot.clone(), b.slot.clone(), m.get(i, j)));
                    }
                }
            }
            out.push((
                LabeledTurn {
                    dialogue_id: d.dialogue_id.clone(),
                    turn_index: t.turn_index,
                    pairs,
                },
                m,
            ));
            history.push(state.clone());
        }
    }
    out
}

/// Aggregate proportions over labeled turns.
pub fn relation_stats(labeled: &[(LabeledTurn, RelationMatrix)]) -> RelationStats {
    let mut pair_counts: BTreeMap<RelationKind, usize> = BTreeMap::new();
    let mut turn_counts: BTreeMap<RelationKind, usize> = BTreeMap::new();
    let mut pair_total = 0usize;
    for (turn, _) in labeled {
        let mut kinds_this_turn: Vec<RelationKind> = Vec::new();
        for (_, _, k) in &turn.pairs {
            *pair_counts.entry(*k).or_insert(0) += 1;
            pair_total += 1;
            if !kinds_this_turn.contains(k) {
                kinds_this_turn.push(*k);
            }
        }
        for k in kinds_this_turn {
            *turn_counts.entry(k).or_insert(0) += 1;
        }
    }
    let turn_total = labeled.len();
    let to_prop = |counts: BTreeMap<RelationKind, usize>, total: usize| {
        RelationKind::ALL
            .iter()
            .map(|k| {
                let c = counts.get(k).copied().unwrap_or(0);
                (
                    *k,
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    },
                )
            })
            .collect()
    };
    RelationStats {
        pair_proportions: to_prop(pair_counts, pair_total),
        turn_proportions: to_prop(turn_counts, turn_total),
        pair_count: pair_total,
        turn_count: turn_total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, DialogueTurn, Speaker};

    fn key(domain: &str, slot: &str) -> SlotKey {
        SlotKey {
            domain: domain.to_string(),
            slot: slot.to_string(),
        }
    }

    fn state(entries: &[(&str, &str, &str)]) -> DialogueState {
        let mut s = DialogueState::default();
        for (d, sl, v) in entries {
            s.assign(key(d, sl), Some(v.to_string()));
        }
        s
    }

    fn dialogue(id: &str, states: Vec<DialogueState>) -> Dialogue {
        let mut turns = Vec::new();
        for (i, st) in states.into_iter().enumerate() {
            turns.push(DialogueTurn {
                speaker: Speaker::User,
                utterance: format!("turn {i}"),
                turn_index: 2 * i,
                gold_state: Some(st),
            });
            turns.push(DialogueTurn {
                speaker: Speaker::System,
                utterance: "ok".to_string(),
                turn_index: 2 * i + 1,
                gold_state: None,
            });
        }
        Dialogue {
            dialogue_id: id.to_string(),
            turns,
        }
    }

    fn slot_order() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into(), "x".into(), "y".into()]
    }

    fn empty_table() -> CooccurrenceTable {
        CooccurrenceTable {
            frequencies: BTreeMap::new(),
            dialogue_count: 1,
        }
    }

    #[test]
    fn first_turn_single_slot_is_all_none() {
        let m = label_turn(
            &slot_order(),
            &[],
            &state(&[("d", "a", "v")]),
            &empty_table(),
            0.05,
        );
        assert!(m
            .upper_triangle()
            .iter()
            .all(|(_, _, k)| *k == RelationKind::None));
    }

    #[test]
    fn joint_update_is_co_update() {
        let m = label_turn(
            &slot_order(),
            &[],
            &state(&[("d", "a", "v1"), ("d", "b", "v2")]),
            &empty_table(),
            0.05,
        );
        assert_eq!(m.get(0, 1), RelationKind::CoUpdate);
        assert_eq!(m.get(1, 0), RelationKind::CoUpdate);
    }

    #[test]
    fn reused_value_is_co_reference_and_wins_priority() {
        // turn 0 assigns a=v; turn 1 assigns b=v (co-reference with a) while
        // also updating c, so (b,c) is co-update but (a,b) must be co-reference.
        let h = vec![state(&[("d", "a", "v")])];
        let cur = state(&[("d", "a", "v"), ("d", "b", "v"), ("d", "c", "w")]);
        let m = label_turn(&slot_order(), &h, &cur, &empty_table(), 0.05);
        assert_eq!(m.get(0, 1), RelationKind::CoReference);
        assert_eq!(m.get(1, 2), RelationKind::CoUpdate);
    }

    #[test]
    fn no_co_reference_at_turn_zero() {
        let cur = state(&[("d", "a", "v"), ("d", "b", "v")]);
        let m = label_turn(&slot_order(), &[], &cur, &empty_table(), 0.05);
        for (_, _, k) in m.upper_triangle() {
            assert_ne!(k, RelationKind::CoReference);
        }
    }

    #[test]
    fn single_dialogue_table_frequency_is_one() {
        let d = dialogue("d0", vec![state(&[("d", "a", "1"), ("d", "b", "2")])]);
        let t = build_cooccurrence_table(&[d]).unwrap();
        assert_eq!(t.frequency("a", "b"), 1.0);
        assert_eq!(t.frequency("b", "a"), 1.0);
    }

    #[test]
    fn disjoint_slots_have_zero_frequency() {
        let d0 = dialogue("d0", vec![state(&[("d", "a", "1")])]);
        let d1 = dialogue("d1", vec![state(&[("d", "b", "2")])]);
        let t = build_cooccurrence_table(&[d0, d1]).unwrap();
        assert_eq!(t.frequency("a", "b"), 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_cooccurrence_table(&[]).is_err());
    }

    #[test]
    fn frequencies_match_double_loop_oracle() {
        // 50 dialogues with varying final fills
        let mut dialogues = Vec::new();
        for i in 0..50 {
            let mut entries: Vec<(&str, &str, &str)> = vec![("d", "a", "1")];
            if i % 2 == 0 {
                entries.push(("d", "b", "2"));
            }
            if i % 5 == 0 {
                entries.push(("d", "c", "3"));
            }
            if i % 10 == 3 {
                entries.push(("e", "x", "4"));
            }
            dialogues.push(dialogue(&format!("d{i}"), vec![state(&entries)]));
        }
        let t = build_cooccurrence_table(&dialogues).unwrap();

        // oracle: double loop over dialogues and slot name pairs
        let names = ["a", "b", "c", "x", "y"];
        for (ai, a) in names.iter().enumerate() {
            for b in names.iter().skip(ai + 1) {
                let mut count = 0;
                for d in &dialogues {
                    let st = d.turns[d.turns.len() - 2].gold_state.as_ref().unwrap();
                    let filled: Vec<String> =
                        st.filled_slots().map(|k| k.slot.clone()).collect();
                    if filled.contains(&a.to_string()) && filled.contains(&b.to_string()) {
                        count += 1;
                    }
                }
                let expect = count as f64 / 50.0;
                assert!(
                    (t.frequency(a, b) - expect).abs() < 1e-12,
                    "pair ({a},{b})"
                );
            }
        }
    }

    #[test]
    fn co_occurrence_from_pair_counting() {
        // 20 dialogues; x and y co-occur in 3 of them (15% > 5%)
        let mut dialogues = Vec::new();
        for i in 0..20 {
            let entries: Vec<(&str, &str, &str)> = if i < 3 {
                vec![("e", "x", "1"), ("e", "y", "2")]
            } else {
                vec![("d", "a", "1")]
            };
            dialogues.push(dialogue(&format!("d{i}"), vec![state(&entries)]));
        }
        let t = build_cooccurrence_table(&dialogues).unwrap();
        assert!((t.frequency("x", "y") - 0.15).abs() < 1e-12);

        // a later turn that fills x and y without updating both together:
        // x was filled at turn 0, y changes at turn 1
        let h = vec![state(&[("e", "x", "1")])];
        let cur = state(&[("e", "x", "1"), ("e", "y", "2")]);
        let m = label_turn(&slot_order(), &h, &cur, &t, 0.05);
        assert_eq!(m.get(3, 4), RelationKind::CoOccurrence);

        // raising the threshold above 15% drops the label
        let m = label_turn(&slot_order(), &h, &cur, &t, 0.2);
        assert_eq!(m.get(3, 4), RelationKind::None);
    }

    #[test]
    fn all_none_corpus_stats_are_zero() {
        let d = dialogue("d0", vec![state(&[("d", "a", "1")])]);
        let t = build_cooccurrence_table(&[d.clone()]).unwrap();
        let labeled = label_corpus(&slot_order(), &[d], &t, 2.0);
        let stats = relation_stats(&labeled);
        assert_eq!(stats.pair_pct(RelationKind::CoReference), 0.0);
        assert_eq!(stats.pair_pct(RelationKind::CoUpdate), 0.0);
        assert_eq!(stats.pair_pct(RelationKind::CoOccurrence), 0.0);
    }

    #[test]
    fn matrix_invariants_hold_per_turn() {
        let h = vec![state(&[("d", "a", "v")])];
        let cur = state(&[("d", "a", "v"), ("d", "b", "v"), ("d", "c", "q")]);
        let m = label_turn(&slot_order(), &h, &cur, &empty_table(), 0.05);
        assert!(m.is_symmetric_with_none_diagonal());
    }

    #[test]
    fn determinism() {
        let h = vec![state(&[("d", "a", "v")])];
        let cur = state(&[("d", "a", "v"), ("d", "b", "v")]);
        let m1 = label_turn(&slot_order(), &h, &cur, &empty_table(), 0.05);
        let m2 = label_turn(&slot_order(), &h, &cur, &empty_table(), 0.05);
        assert_eq!(m1, m2);
    }
}
