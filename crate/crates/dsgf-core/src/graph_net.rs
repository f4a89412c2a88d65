//! The three graph stages: membership relation reasoning over the static
//! schema graph (stacked attention layers), schema-dialogue fusion via
//! multi-head cross attention, and dynamic slot relation completion via a
//! pair MLP with a 4-way softmax.

use crate::autodiff::{Graph, Var};
use crate::error::{DsgfError, Result};
use crate::relations::{RelationKind, RelationMatrix};
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

/// Additive bias that zeroes attention to masked positions; exp of it
/// underflows to exactly 0.
pub const MASK_BIAS: f64 = -1e30;

/// 0 / MASK_BIAS matrix from a dense adjacency.
pub fn adjacency_bias(adj: &[Vec<bool>]) -> Tensor {
    let n = adj.len();
    Tensor::from_fn(n, n, |i, j| if adj[i][j] { 0.0 } else { MASK_BIAS })
}

/// 0 / MASK_BIAS row vector from a token validity mask.
pub fn token_mask_bias(mask: &[bool]) -> Tensor {
    Tensor::vector(
        mask.iter()
            .map(|&m| if m { 0.0 } else { MASK_BIAS })
            .collect(),
    )
}

/// Dropout context: training mode carries an RNG and a probability, eval
/// mode is a no-op. Masks are drawn from the context's own stream, so two
/// contexts seeded the same way produce identical graphs.
pub struct DropoutCtx {
    p: f64,
    rng: Option<Rng>,
}

impl DropoutCtx {
    pub fn eval() -> Self {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: Rng) -> Self {
        DropoutCtx { p, rng: Some(rng) }
    }

    /// Inverted dropout: zero entries with probability p, scale the rest by
    /// 1/(1-p) so expectations match eval mode.
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if self.p <= 0.0 {
            return x;
        }
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.next_f64() < self.p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let m = g.leaf(Tensor::new(shape, mask));
        g.mul(x, m)
    }
}

/// One membership reasoning layer.
///
/// Pair scores come from a ReLU of a learned map over the concatenated node
/// pair, are normalized over each node's static neighborhood, and the output
/// is a ReLU of the attention-weighted neighbor inputs. `w` has shape
/// `[2, h]`: row 0 weighs the attending node, row 1 the neighbor, so the
/// pre-softmax score is asymmetric, as in the usual graph-attention setup.
pub fn membership_attention_layer(
    g: &mut Graph,
    x: Var,
    w: Var,
    adj_bias: &Tensor,
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    let n = g.value(x).rows();
    let h = g.value(x).cols();
    let wt = g.value(w);
    if wt.shape() != [2, h] {
        return Err(DsgfError::Shape(format!(
            "membership layer weight is {:?}, expected [2, {h}]",
            wt.shape()
        )));
    }
    if adj_bias.rows() != n || adj_bias.cols() != n {
        return Err(DsgfError::Shape(format!(
            "adjacency is {}x{}, embeddings have {n} rows",
            adj_bias.rows(),
            adj_bias.cols()
        )));
    }
    let w_self = g.gather_rows(w, vec![0]);
    let w_self_t = g.transpose(w_self); // h x 1
    let w_nbr = g.gather_rows(w, vec![1]);
    let w_nbr_t = g.transpose(w_nbr);
    let u_col = g.matmul(x, w_self_t); // n x 1
    let v_col = g.matmul(x, w_nbr_t); // n x 1
    let u = g.reshape(u_col, vec![n]);
    let v = g.reshape(v_col, vec![n]);
    let pair = g.outer_sum(u, v); // score[i][j] = u_i + v_j
    let scored = g.relu(pair);
    let bias = g.leaf(adj_bias.clone());
    let masked = g.add(scored, bias);
    let alpha = g.softmax_rows(masked);
    let alpha = dropout.apply(g, alpha);
    let mixed = g.matmul(alpha, x);
    Ok(g.relu(mixed))
}

/// Stack `l` membership layers, each with its own parameters; every layer
/// consumes the previous layer's node embeddings.
pub fn run_membership_stack(
    g: &mut Graph,
    x: Var,
    layer_weights: &[Var],
    adj_bias: &Tensor,
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    if layer_weights.is_empty() {
        return Err(DsgfError::Config(
            "membership stack needs at least one layer".to_string(),
        ));
    }
    let mut cur = x;
    for w in layer_weights {
        cur = membership_attention_layer(g, cur, *w, adj_bias, dropout)?;
    }
    Ok(cur)
}

/// Parameters of the schema-dialogue fusion stage.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wa: Var,
}

/// Multi-head cross attention with nodes as queries and dialogue tokens as
/// keys/values, followed by a linear projection. Masked token positions
/// receive exactly zero attention weight for every node.
pub fn fuse_dialogue(
    g: &mut Graph,
    nodes: Var,
    tokens: Var,
    vars: &FusionVars,
    heads: usize,
    token_mask: &[bool],
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    let h = g.value(nodes).cols();
    let k_len = g.value(tokens).rows();
    if k_len == 0 {
        return Err(DsgfError::Shape("empty token matrix".to_string()));
    }
    if token_mask.len() != k_len {
        return Err(DsgfError::Shape(format!(
            "token mask has {} entries for {} tokens",
            token_mask.len(),
            k_len
        )));
    }
    if heads == 0 || h % heads != 0 {
        return Err(DsgfError::Config(format!(
            "head count {heads} must divide the graph hidden size {h}"
        )));
    }
    if !token_mask.iter().any(|&m| m) {
        return Err(DsgfError::Shape(
            "all token positions are masked".to_string(),
        ));
    }
    let dk = h / heads;
    let q = g.matmul(nodes, vars.wq); // n x h
    let key = g.matmul(tokens, vars.wk); // K x h
    let val = g.matmul(tokens, vars.wv); // K x h
    let bias = g.leaf(token_mask_bias(token_mask));
    let mut head_outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * dk, (head + 1) * dk);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(key, a, b);
        let vh = g.slice_cols(val, a, b);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let scaled = g.scale(raw, 1.0 / (dk as f64).sqrt());
        let masked = g.add_row(scaled, bias);
        let alpha = g.softmax_rows(masked);
        let alpha = dropout.apply(g, alpha);
        head_outs.push(g.matmul(alpha, vh));
    }
    let concat = g.concat_cols(&head_outs);
    Ok(g.matmul(concat, vars.wa))
}

/// Unordered slot pairs (i, j) with i < j, in lexicographic order.
pub fn relation_pairs(n_slots: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n_slots {
        for j in (i + 1)..n_slots {
            out.push((i, j));
        }
    }
    out
}

/// Pair classifier: logits for every unordered slot pair from an MLP over
/// the concatenated fused slot embeddings. Returns `None` when there are
/// fewer than two slots. Each pair is scored once as (i, j) with i < j and
/// the predicted matrix is mirrored, so the result is symmetric.
pub fn complete_dynamic_relations(
    g: &mut Graph,
    fused_slots: Var,
    mlp: &[(Var, Var)],
    dropout: &mut DropoutCtx,
) -> Result<Option<Var>> {
    let n = g.value(fused_slots).rows();
    if n < 2 {
        return Ok(None);
    }
    if mlp.is_empty() {
        return Err(DsgfError::Config(
            "relation classifier needs at least one layer".to_string(),
        ));
    }
    let pairs = relation_pairs(n);
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let li = g.gather_rows(fused_slots, left);
    let ri = g.gather_rows(fused_slots, right);
    let mut cur = g.concat_cols(&[li, ri]); // P x 2h
    for (idx, (w, b)) in mlp.iter().enumerate() {
        let lin = g.matmul(cur, *w);
        cur = g.add_row(lin, *b);
        if idx + 1 < mlp.len() {
            cur = g.relu(cur);
            cur = dropout.apply(g, cur);
        }
    }
    if g.value(cur).cols() != RelationKind::ALL.len() {
        return Err(DsgfError::Shape(format!(
            "relation classifier produced {} classes",
            g.value(cur).cols()
        )));
    }
    Ok(Some(cur))
}

/// Argmax decode of pair logits into a symmetric relation matrix.
pub fn relations_from_logits(logits: &Tensor, n_slots: usize) -> RelationMatrix {
    let mut m = RelationMatrix::all_none(n_slots);
    for (row, (i, j)) in relation_pairs(n_slots).into_iter().enumerate() {
        let cls = argmax(logits.row(row));
        let kind = RelationKind::from_index(cls).expect("4-way classifier");
        if kind != RelationKind::None {
            m.set_pair(i, j, kind).expect("pair indices in range");
        }
    }
    m
}
