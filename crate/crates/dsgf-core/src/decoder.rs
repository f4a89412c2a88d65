//! Dialogue state decoding: relation-typed sub-graph aggregation into
//! per-slot embeddings, span prediction over candidate elements, value
//! resolution rules and state assembly.

use crate::autodiff::{Graph, Var};
use crate::corpus::{detokenize, CandidateElements, DialogueState, SlotKey};
use crate::error::{DsgfError, Result};
use crate::graph_net::{membership_attention_layer, DropoutCtx};
use crate::relations::{RelationKind, RelationMatrix};
use crate::schema::SchemaElement;
use crate::tensor::argmax;

/// Slot-only adjacency of one dynamic relation channel: matching matrix
/// entries plus a self-loop per slot, so a slot without neighbors still has
/// a well-defined (self-only) attention neighborhood.
pub fn channel_adjacency(matrix: &RelationMatrix, kind: RelationKind) -> Vec<Vec<bool>> {
    let n = matrix.size();
    let mut adj = vec![vec![false; n]; n];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = true;
        for (j, cell) in row.iter_mut().enumerate() {
            if i != j && matrix.get(i, j) == kind {
                *cell = true;
            }
        }
    }
    adj
}

/// Every slot pair related (the fully-connected variant).
pub fn fully_connected_adjacency(n: usize) -> Vec<Vec<bool>> {
    vec![vec![true; n]; n]
}

/// One attention pass restricted to a channel's edges; same mechanics as a
/// membership reasoning layer.
pub fn subgraph_embed(
    g: &mut Graph,
    embeddings: Var,
    w: Var,
    adjacency: &[Vec<bool>],
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    let bias = crate::graph_net::adjacency_bias(adjacency);
    membership_attention_layer(g, embeddings, w, &bias, dropout)
}

/// Parameters of the sub-graph aggregation stage.
#[derive(Debug, Clone, Copy)]
pub struct AggregationVars {
    pub ws: Var,
    pub bs: Var,
}

/// Fuse per-channel slot embeddings into one embedding per slot.
///
/// With attention on, channel weights are a softmax over the channel scores
/// `S_i . tanh(W_s . b_cls + b_s)` conditioned on the dialogue's class
/// vector, so different dialogue contexts weigh relation types differently.
/// With attention off (the concatenation ablation) the channel embeddings
/// are concatenated instead. A single channel passes through unchanged.
pub fn aggregate_subgraphs(
    g: &mut Graph,
    channels: &[Var],
    class_vector: Var,
    vars: &AggregationVars,
    use_attention: bool,
) -> Result<Var> {
    if channels.is_empty() {
        return Err(DsgfError::Shape("no sub-graph channels".to_string()));
    }
    let n = g.value(channels[0]).rows();
    let h = g.value(channels[0]).cols();
    for c in channels {
        if g.value(*c).rows() != n || g.value(*c).cols() != h {
            return Err(DsgfError::Shape(
                "sub-graph channel shapes differ".to_string(),
            ));
        }
    }
    if channels.len() == 1 {
        return Ok(channels[0]);
    }
    if !use_attention {
        return Ok(g.concat_cols(channels));
    }
    let d = g.value(class_vector).cols();
    if g.value(vars.ws).shape() != [h, d] {
        return Err(DsgfError::Shape(format!(
            "aggregation weight is {:?}, expected [{h}, {d}]",
            g.value(vars.ws).shape()
        )));
    }
    let b_col = g.reshape(class_vector, vec![d, 1]);
    let gate_col = g.matmul(vars.ws, b_col); // h x 1
    let gate_vec = g.reshape(gate_col, vec![h]);
    let gate_bias = g.add(gate_vec, vars.bs);
    let gate = g.tanh(gate_bias);
    let gate_col = g.reshape(gate, vec![h, 1]);

    let mut score_cols = Vec::with_capacity(channels.len());
    for c in channels {
        score_cols.push(g.matmul(*c, gate_col)); // n x 1
    }
    let scores = g.concat_cols(&score_cols); // n x C
    let beta = g.softmax_rows(scores);
    let mut fused: Option<Var> = None;
    for (ci, c) in channels.iter().enumerate() {
        let col = g.slice_cols(beta, ci, ci + 1);
        let weights = g.reshape(col, vec![n]);
        let scaled = g.row_scale(*c, weights);
        fused = Some(match fused {
            None => scaled,
            Some(acc) => g.add(acc, scaled),
        });
    }
    Ok(fused.expect("at least one channel"))
}

/// Parameters of the span scorer.
#[derive(Debug, Clone, Copy)]
pub struct SpanScorerVars {
    pub wd: Var,
    pub bd: Var,
    pub rd: Var,
}

/// Shared part of the span scorer for one sample: `W_d . C^T`, an
/// h x E map of the candidate elements.
pub fn span_scorer_base(g: &mut Graph, wd: Var, candidates: Var) -> Result<Var> {
    if g.value(candidates).rows() == 0 {
        return Err(DsgfError::Shape("empty candidate elements".to_string()));
    }
    let ct = g.transpose(candidates);
    Ok(g.matmul(wd, ct))
}

/// Start/end logits for one slot: rows of a 2 x E matrix.
///
/// The scorer is `r_d . tanh(diag(s) . W_d . C^T + b_d)` with `r_d` a 2 x h
/// map applied after the tanh, so start and end get independent logit rows.
pub fn score_spans(g: &mut Graph, base: Var, slot_embedding: Var, vars: &SpanScorerVars) -> Var {
    let scaled = g.row_scale(base, slot_embedding);
    let biased = g.add_col(scaled, vars.bd);
    let squashed = g.tanh(biased);
    g.matmul(vars.rd, squashed)
}

/// Decode a value from start/end distributions.
///
/// Greedy-independent argmax of each distribution (ties to the lowest
/// index), then the decoding rules: an end before the start yields None; a
/// start inside the candidate vocabulary picks that single candidate value
/// regardless of the end; anything else is the detokenized context span
/// (clamped to the context region).
pub fn resolve_value(
    p_start: &[f64],
    p_end: &[f64],
    candidate: &CandidateElements,
) -> Option<String> {
    let start = argmax(p_start);
    let end = argmax(p_end);
    if end < start {
        return None;
    }
    if start >= candidate.boundaries {
        return Some(candidate.element_tokens[start].clone());
    }
    let end = end.min(candidate.boundaries - 1);
    Some(detokenize(&candidate.element_tokens[start..=end]))
}

/// Fold per-slot resolved values into a dialogue state.
///
/// Slots with a value overwrite; slots resolved to None keep the previous
/// turn's value when `carryover` is on (the default), or stay empty when it
/// is off (strictly per-turn states).
pub fn assemble_state(
    slots: &[SchemaElement],
    resolved: &[Option<String>],
    previous: &DialogueState,
    carryover: bool,
) -> DialogueState {
    assert_eq!(slots.len(), resolved.len(), "one resolved value per slot");
    let mut state = if carryover {
        previous.clone()
    } else {
        DialogueState::default()
    };
    for (slot, value) in slots.iter().zip(resolved) {
        if let Some(v) = value {
            let key = SlotKey::new(slot.parent_domain.as_deref().unwrap_or_default(), &slot.id);
            state.assign(key, Some(v.clone()));
        }
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_net::adjacency_bias;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn cand(tokens: &[&str], vocab: &[&str]) -> CandidateElements {
        let mut element_tokens: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        element_tokens.extend(vocab.iter().map(|s| s.to_string()));
        CandidateElements {
            boundaries: tokens.len(),
            element_tokens,
        }
    }

    fn onehot(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }

    #[test]
    fn empty_channel_degenerates_to_self_loop() {
        // a channel with no edges equals a pass over the identity adjacency
        let mut rng = Rng::new(3);
        let m = RelationMatrix::all_none(3);
        let adj = channel_adjacency(&m, RelationKind::CoReference);
        for (i, row) in adj.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, i == j);
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(3, 4, |_, _| rng.next_normal()));
        let w = g.leaf(Tensor::from_fn(2, 4, |_, _| rng.next_normal()));
        let out = subgraph_embed(&mut g, x, w, &adj, &mut DropoutCtx::eval()).unwrap();
        // self-only attention: out = relu(x)
        let xv = g.value(x).clone();
        for i in 0..3 {
            for c in 0..4 {
                assert_eq!(g.value(out).at(i, c), xv.at(i, c).max(0.0));
            }
        }
    }

    #[test]
    fn channel_equal_to_static_graph_matches_membership_layer() {
        let mut rng = Rng::new(9);
        let adj = vec![
            vec![true, true, false],
            vec![true, true, true],
            vec![false, true, true],
        ];
        let x0 = Tensor::from_fn(3, 4, |_, _| rng.next_normal());
        let w0 = Tensor::from_fn(2, 4, |_, _| rng.next_normal());

        let mut g1 = Graph::new();
        let x = g1.leaf(x0.clone());
        let w = g1.leaf(w0.clone());
        let a = subgraph_embed(&mut g1, x, w, &adj, &mut DropoutCtx::eval()).unwrap();

        let mut g2 = Graph::new();
        let x = g2.leaf(x0);
        let w = g2.leaf(w0);
        let b =
            membership_attention_layer(&mut g2, x, w, &adjacency_bias(&adj), &mut DropoutCtx::eval())
                .unwrap();
        assert_eq!(g1.value(a), g2.value(b));
    }

    // 3 slots, one co-update edge, fixed weights: scalar-level oracle.
    #[test]
    fn co_update_channel_golden_values() {
        let x = [[0.2, -0.5], [1.0, 0.3], [-0.7, 0.8]];
        let w = [[0.4, -0.1], [0.2, 0.6]];
        let mut m = RelationMatrix::all_none(3);
        m.set_pair(0, 2, RelationKind::CoUpdate).unwrap();
        let adj = channel_adjacency(&m, RelationKind::CoUpdate);

        let mut g = Graph::new();
        let xv = g.leaf(Tensor::matrix(3, 2, x.concat().to_vec()));
        let wv = g.leaf(Tensor::matrix(2, 2, w.concat().to_vec()));
        let out = subgraph_embed(&mut g, xv, wv, &adj, &mut DropoutCtx::eval()).unwrap();

        let relu = |z: f64| z.max(0.0);
        let u: Vec<f64> = x.iter().map(|r| r[0] * w[0][0] + r[1] * w[0][1]).collect();
        let v: Vec<f64> = x.iter().map(|r| r[0] * w[1][0] + r[1] * w[1][1]).collect();
        for i in 0..3 {
            let neighbors: Vec<usize> = (0..3).filter(|&j| adj[i][j]).collect();
            let scores: Vec<f64> = neighbors.iter().map(|&j| relu(u[i] + v[j])).collect();
            let sm = crate::autodiff::softmax(&scores);
            for c in 0..2 {
                let mixed: f64 = neighbors
                    .iter()
                    .zip(&sm)
                    .map(|(&j, a)| a * x[j][c])
                    .sum();
                assert!(
                    (g.value(out).at(i, c) - relu(mixed)).abs() < 1e-12,
                    "slot {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn identical_channels_aggregate_to_the_same_vector() {
        // all four channel embeddings equal: s = v regardless of beta
        let mut rng = Rng::new(12);
        let v0 = Tensor::from_fn(3, 4, |_, _| rng.next_normal());
        let mut g = Graph::new();
        let c = g.leaf(v0.clone());
        let channels = [c, c, c, c];
        let cls = g.leaf(Tensor::vector(vec![0.3, -0.8]));
        let vars = AggregationVars {
            ws: g.leaf(Tensor::from_fn(4, 2, |_, _| rng.next_normal())),
            bs: g.leaf(Tensor::vector((0..4).map(|_| rng.next_normal()).collect())),
        };
        let out = aggregate_subgraphs(&mut g, &channels, cls, &vars, true).unwrap();
        for i in 0..3 {
            for cidx in 0..4 {
                assert!((g.value(out).at(i, cidx) - v0.at(i, cidx)).abs() < 1e-12);
            }
        }
    }

    // Fixed gate weights and distinct channels: independent scalar oracle.
    #[test]
    fn aggregation_matches_hand_computation() {
        let h = 2;
        let d = 2;
        let ws = [[0.5, -0.3], [0.1, 0.7]];
        let bs = [0.05, -0.2];
        let cls = [0.4, 0.9];
        let ch0 = [[1.0, 0.0], [0.2, 0.3]];
        let ch1 = [[0.0, 1.0], [-0.4, 0.6]];

        let mut g = Graph::new();
        let c0 = g.leaf(Tensor::matrix(2, 2, ch0.concat().to_vec()));
        let c1 = g.leaf(Tensor::matrix(2, 2, ch1.concat().to_vec()));
        let cls_v = g.leaf(Tensor::vector(cls.to_vec()));
        let vars = AggregationVars {
            ws: g.leaf(Tensor::matrix(2, 2, ws.concat().to_vec())),
            bs: g.leaf(Tensor::vector(bs.to_vec())),
        };
        let out = aggregate_subgraphs(&mut g, &[c0, c1], cls_v, &vars, true).unwrap();

        let mut gate = [0.0f64; 2];
        for r in 0..h {
            let lin: f64 = (0..d).map(|c| ws[r][c] * cls[c]).sum::<f64>() + bs[r];
            gate[r] = lin.tanh();
        }
        for slot in 0..2 {
            let s0: f64 = (0..h).map(|c| ch0[slot][c] * gate[c]).sum();
            let s1: f64 = (0..h).map(|c| ch1[slot][c] * gate[c]).sum();
            let sm = crate::autodiff::softmax(&[s0, s1]);
            assert!((sm[0] + sm[1] - 1.0).abs() < 1e-12, "beta is a distribution");
            for c in 0..h {
                let expect = sm[0] * ch0[slot][c] + sm[1] * ch1[slot][c];
                assert!(
                    (g.value(out).at(slot, c) - expect).abs() < 1e-12,
                    "slot {slot} col {c}"
                );
            }
        }
    }

    #[test]
    fn aggregation_output_stays_in_convex_hull() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let n = 2;
            let h = 3;
            let mut g = Graph::new();
            let chans: Vec<Var> = (0..4)
                .map(|_| g.leaf(Tensor::from_fn(n, h, |_, _| rng.next_normal())))
                .collect();
            let cls = g.leaf(Tensor::vector(vec![rng.next_normal(), rng.next_normal()]));
            let vars = AggregationVars {
                ws: g.leaf(Tensor::from_fn(h, 2, |_, _| rng.next_normal())),
                bs: g.leaf(Tensor::vector((0..h).map(|_| rng.next_normal()).collect())),
            };
            let out = aggregate_subgraphs(&mut g, &chans, cls, &vars, true).unwrap();
            for slot in 0..n {
                for c in 0..h {
                    let vals: Vec<f64> = chans.iter().map(|ch| g.value(*ch).at(slot, c)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
                    let got = g.value(out).at(slot, c);
                    assert!(got >= lo && got <= hi, "hull violation: {got} not in [{lo},{hi}]");
                }
            }
        }
    }

    #[test]
    fn concat_mode_stacks_channels() {
        let mut g = Graph::new();
        let c0 = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let c1 = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let cls = g.leaf(Tensor::vector(vec![0.0]));
        let vars = AggregationVars {
            ws: g.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0])),
            bs: g.leaf(Tensor::vector(vec![0.0, 0.0])),
        };
        let out = aggregate_subgraphs(&mut g, &[c0, c1], cls, &vars, false).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_candidate_scores_to_singleton_distribution() {
        let h = 3;
        let d = 2;
        let mut rng = Rng::new(14);
        let mut g = Graph::new();
        let cands = g.leaf(Tensor::from_fn(1, d, |_, _| rng.next_normal()));
        let wd = g.leaf(Tensor::from_fn(h, d, |_, _| rng.next_normal()));
        let vars = SpanScorerVars {
            wd,
            bd: g.leaf(Tensor::vector((0..h).map(|_| rng.next_normal()).collect())),
            rd: g.leaf(Tensor::from_fn(2, h, |_, _| rng.next_normal())),
        };
        let base = span_scorer_base(&mut g, vars.wd, cands).unwrap();
        let s = g.leaf(Tensor::vector((0..h).map(|_| rng.next_normal()).collect()));
        let logits = score_spans(&mut g, base, s, &vars);
        let probs = g.softmax_rows(logits);
        assert_eq!(g.value(probs).data(), &[1.0, 1.0]);
    }

    // Fixed tiny tensors: independent scalar computation of the scorer.
    #[test]
    fn span_logits_match_hand_computed_form() {
        let h = 2;
        let d = 2;
        let e = 3;
        let wd = [[0.3, -0.4], [0.8, 0.1]];
        let bd = [0.2, -0.5];
        let rd = [[1.0, -1.0], [0.5, 0.25]];
        let s = [0.6, -0.9];
        let c = [[0.1, 0.2], [0.7, -0.3], [-0.2, 0.5]];

        let mut g = Graph::new();
        let cands = g.leaf(Tensor::matrix(e, d, c.concat().to_vec()));
        let vars = SpanScorerVars {
            wd: g.leaf(Tensor::matrix(h, d, wd.concat().to_vec())),
            bd: g.leaf(Tensor::vector(bd.to_vec())),
            rd: g.leaf(Tensor::matrix(2, h, rd.concat().to_vec())),
        };
        let base = span_scorer_base(&mut g, vars.wd, cands).unwrap();
        let sv = g.leaf(Tensor::vector(s.to_vec()));
        let logits = score_spans(&mut g, base, sv, &vars);

        for col in 0..e {
            let mut t = [0.0f64; 2];
            for r in 0..h {
                let wc: f64 = (0..d).map(|k| wd[r][k] * c[col][k]).sum();
                t[r] = (s[r] * wc + bd[r]).tanh();
            }
            for out_row in 0..2 {
                let expect: f64 = (0..h).map(|r| rd[out_row][r] * t[r]).sum();
                let got = g.value(logits).at(out_row, col);
                assert!(
                    (got - expect).abs() < 1e-12,
                    "row {out_row} col {col}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn span_distributions_sum_to_one() {
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let e = 2 + rng.next_below(6);
            let h = 4;
            let mut g = Graph::new();
            let cands = g.leaf(Tensor::from_fn(e, 3, |_, _| rng.next_normal()));
            let vars = SpanScorerVars {
                wd: g.leaf(Tensor::from_fn(h, 3, |_, _| rng.next_normal())),
                bd: g.leaf(Tensor::vector((0..h).map(|_| rng.next_normal()).collect())),
                rd: g.leaf(Tensor::from_fn(2, h, |_, _| rng.next_normal())),
            };
            let base = span_scorer_base(&mut g, vars.wd, cands).unwrap();
            let s = g.leaf(Tensor::vector((0..h).map(|_| rng.next_normal()).collect()));
            let logits = score_spans(&mut g, base, s, &vars);
            let probs = g.softmax_rows(logits);
            for r in 0..2 {
                let sum: f64 = g.value(probs).row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn end_before_start_resolves_to_none() {
        let c = cand(&["[cls]", "a", "b", "c", "d", "e"], &[]);
        let p_s = onehot(6, 5);
        let p_e = onehot(6, 3);
        assert_eq!(resolve_value(&p_s, &p_e, &c), None);
    }

    #[test]
    fn vocabulary_start_picks_candidate_value() {
        let c = cand(&["[cls]", "x"], &["regular", "luxury"]);
        // start at vocab element "regular", end anywhere (even earlier)
        let p_s = onehot(4, 2);
        let p_e = onehot(4, 0);
        // end < start would be None for context spans, but vocabulary start
        // picks the candidate value... end rule applies first though
        assert_eq!(resolve_value(&p_s, &p_e, &c), None, "end<start wins");
        let p_e = onehot(4, 3);
        assert_eq!(resolve_value(&p_s, &p_e, &c).as_deref(), Some("regular"));
    }

    #[test]
    fn context_span_detokenizes() {
        let c = cand(&["[cls]", "ride", "to", "the", "docks"], &["pool"]);
        let p_s = onehot(6, 3);
        let p_e = onehot(6, 4);
        assert_eq!(resolve_value(&p_s, &p_e, &c).as_deref(), Some("the docks"));
        // end in the vocabulary region clamps to the context
        let p_e = onehot(6, 5);
        assert_eq!(
            resolve_value(&p_s, &p_e, &c).as_deref(),
            Some("the docks"),
            "end clamped to context region"
        );
    }

    #[test]
    fn argmax_ties_resolve_low() {
        let c = cand(&["[cls]", "a", "b"], &[]);
        let p_s = vec![0.4, 0.4, 0.2];
        let p_e = vec![0.1, 0.4, 0.4];
        // start -> 0, end -> 1: span [cls] a
        assert_eq!(resolve_value(&p_s, &p_e, &c).as_deref(), Some("[cls] a"));
    }

    fn slots2() -> Vec<SchemaElement> {
        vec![
            SchemaElement::slot("d/a", "d", "slot a"),
            SchemaElement::slot("d/b", "d", "slot b"),
        ]
    }

    #[test]
    fn all_none_predictions_keep_state() {
        let mut prev = DialogueState::default();
        prev.assign(SlotKey::new("d", "d/a"), Some("v".into()));
        let out = assemble_state(&slots2(), &[None, None], &prev, true);
        assert_eq!(out, prev);
    }

    #[test]
    fn single_prediction_changes_one_entry() {
        let mut prev = DialogueState::default();
        prev.assign(SlotKey::new("d", "d/a"), Some("v".into()));
        let out = assemble_state(&slots2(), &[None, Some("w".into())], &prev, true);
        assert_eq!(out.value(&SlotKey::new("d", "d/a")), Some("v"));
        assert_eq!(out.value(&SlotKey::new("d", "d/b")), Some("w"));
    }

    #[test]
    fn no_carryover_keeps_only_current_predictions() {
        let mut prev = DialogueState::default();
        prev.assign(SlotKey::new("d", "d/a"), Some("v".into()));
        let out = assemble_state(&slots2(), &[None, Some("w".into())], &prev, false);
        assert_eq!(out.value(&SlotKey::new("d", "d/a")), None);
        assert_eq!(out.value(&SlotKey::new("d", "d/b")), Some("w"));
    }

    #[test]
    fn three_turn_carryover_trace() {
        // hand-traced:
        //   turn 0: a = "x"          -> {a: x}
        //   turn 1: b = "y"          -> {a: x, b: y}
        //   turn 2: a = "z", b none  -> {a: z, b: y}
        let slots = slots2();
        let t0 = assemble_state(&slots, &[Some("x".into()), None], &DialogueState::default(), true);
        let t1 = assemble_state(&slots, &[None, Some("y".into())], &t0, true);
        let t2 = assemble_state(&slots, &[Some("z".into()), None], &t1, true);
        assert_eq!(t2.value(&SlotKey::new("d", "d/a")), Some("z"));
        assert_eq!(t2.value(&SlotKey::new("d", "d/b")), Some("y"));
    }
}
