//! Full model assembly: configuration, parameter creation, and the forward
//! pipelines for training (teacher-forced gold relations) and inference
//! (predicted relations).
//!
//! Parameter shapes are functions of the hidden sizes and depth settings
//! only, never of the schema: swapping in a schema with unseen domains
//! changes node embeddings but no parameter, which is what makes zero-shot
//! transfer possible at all.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{CandidateElements, DialogueSample, DialogueState, SlotKey};
use crate::decoder::{
    aggregate_subgraphs, assemble_state, channel_adjacency, fully_connected_adjacency,
    resolve_value, score_spans, span_scorer_base, subgraph_embed, AggregationVars, SpanScorerVars,
};
use crate::encoder::{
    description_tokens, EncoderImpl, NodeInitEmbeddings, PretrainedCache, TokenEmbeddings,
    ToyEncoderIds,
};
use crate::error::{DsgfError, Result};
use crate::graph_net::{
    adjacency_bias, complete_dynamic_relations, fuse_dialogue, relations_from_logits,
    run_membership_stack, DropoutCtx, FusionVars,
};
use crate::nn::{glorot, register_params, zeros_vec, ParamId, ParamStore};
use crate::relations::{RelationKind, RelationMatrix};
use crate::rng::Rng;
use crate::schema::{build_schema_graph, SchemaElement, SchemaFingerprint, SchemaGraph};
use crate::tensor::Tensor;

/// Which encoder implementation backs the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Toy,
    Pretrained,
}

/// Which dynamic relation channels the decoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelationSubset {
    #[default]
    All,
    CorefOnly,
    CooccurOnly,
    CoupdateOnly,
    None,
    FullyConnected,
}

impl RelationSubset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "coref_only" => Ok(Self::CorefOnly),
            "cooccur_only" => Ok(Self::CooccurOnly),
            "coupdate_only" => Ok(Self::CoupdateOnly),
            "none" => Ok(Self::None),
            "fully_connected" => Ok(Self::FullyConnected),
            other => Err(DsgfError::Config(format!(
                "unknown relation subset '{other}'"
            ))),
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Off: the static adjacency is replaced by an identity matrix.
    pub use_membership: bool,
    /// Off: the relation completion branch and the dynamic decoder channels
    /// are removed entirely.
    pub use_dynamic: bool,
    pub relation_subset: RelationSubset,
    /// Off: sub-graph embeddings are concatenated instead of attention-fused.
    pub use_relation_aggregation: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_membership: true,
            use_dynamic: true,
            relation_subset: RelationSubset::All,
            use_relation_aggregation: true,
        }
    }
}

/// Model architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// Encoder width d.
    pub encoder_hidden: usize,
    pub max_len: usize,
    /// One encoder instance for both dialogue text and schema descriptions.
    pub share_encoder: bool,
    /// Graph hidden size h.
    pub graph_hidden: usize,
    /// Membership reasoning depth l.
    pub layers: usize,
    pub heads: usize,
    pub relation_mlp_depth: usize,
    pub dropout: f64,
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Toy,
            encoder_hidden: 64,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            share_encoder: true,
            graph_hidden: 256,
            layers: 3,
            heads: 4,
            relation_mlp_depth: 8,
            dropout: 0.3,
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden < 2 || self.encoder_hidden % 2 != 0 {
            return Err(DsgfError::Config(
                "encoder.hidden must be an even number >= 2".to_string(),
            ));
        }
        if self.graph_hidden == 0 {
            return Err(DsgfError::Config("graph.hidden must be > 0".to_string()));
        }
        if self.layers < 1 {
            return Err(DsgfError::Config("graph.layers must be >= 1".to_string()));
        }
        if self.heads == 0 || self.graph_hidden % self.heads != 0 {
            return Err(DsgfError::Config(format!(
                "graph.heads ({}) must divide graph.hidden ({})",
                self.heads, self.graph_hidden
            )));
        }
        if self.relation_mlp_depth < 1 {
            return Err(DsgfError::Config(
                "graph.relation_mlp_depth must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DsgfError::Config("dropout must be in [0, 1)".to_string()));
        }
        if self.max_len < 2 {
            return Err(DsgfError::Config("max_len must be >= 2".to_string()));
        }
        Ok(())
    }

    /// Dynamic relation kinds visible to the decoder.
    pub fn dynamic_kinds(&self) -> Vec<RelationKind> {
        if !self.ablation.use_dynamic {
            return Vec::new();
        }
        match self.ablation.relation_subset {
            RelationSubset::All | RelationSubset::FullyConnected => vec![
                RelationKind::CoReference,
                RelationKind::CoUpdate,
                RelationKind::CoOccurrence,
            ],
            RelationSubset::CorefOnly => vec![RelationKind::CoReference],
            RelationSubset::CooccurOnly => vec![RelationKind::CoOccurrence],
            RelationSubset::CoupdateOnly => vec![RelationKind::CoUpdate],
            RelationSubset::None => Vec::new(),
        }
    }

    /// The relation completion branch runs only when its predictions (or
    /// labels) feed anything: the fully-connected variant replaces automatic
    /// completion, so the branch is off there too.
    pub fn relation_branch_enabled(&self) -> bool {
        self.ablation.use_dynamic
            && !matches!(
                self.ablation.relation_subset,
                RelationSubset::None | RelationSubset::FullyConnected
            )
    }

    /// Width of the per-slot embedding the span scorer consumes.
    pub fn decode_width(&self) -> usize {
        let channels = 1 + self.dynamic_kinds().len();
        if self.ablation.use_relation_aggregation || channels == 1 {
            self.graph_hidden
        } else {
            self.graph_hidden * channels
        }
    }
}

#[derive(Debug, Clone)]
struct ParamIds {
    proj_w: ParamId,
    proj_b: ParamId,
    membership: Vec<ParamId>,
    fus_wq: ParamId,
    fus_wk: ParamId,
    fus_wv: ParamId,
    fus_wa: ParamId,
    rel_mlp: Vec<(ParamId, ParamId)>,
    channel_w: [ParamId; 4],
    agg_ws: ParamId,
    agg_bs: ParamId,
    span_wd: ParamId,
    span_bd: ParamId,
    span_rd: ParamId,
}

/// Schema-dependent inference context: the graph, effective adjacency,
/// candidate vocabulary, and pre-tokenized description/value texts.
#[derive(Debug, Clone)]
pub struct SchemaRuntime {
    pub graph: SchemaGraph,
    pub fingerprint: SchemaFingerprint,
    pub static_adjacency: Vec<Vec<bool>>,
    pub static_bias: Tensor,
    pub vocab: Vec<String>,
    pub slot_keys: Vec<SlotKey>,
    node_tokens: Vec<Vec<String>>,
    vocab_tokens: Vec<Vec<String>>,
}

impl SchemaRuntime {
    pub fn slot_count(&self) -> usize {
        self.graph.slot_count()
    }
}

/// The assembled tracker.
#[derive(Debug)]
pub struct DsgfModel {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
    encoder: EncoderImpl,
    schema_encoder: EncoderImpl,
}

/// Prediction for one turn.
#[derive(Debug, Clone)]
pub struct TurnPrediction {
    pub state: DialogueState,
    /// Argmax decode of the relation logits (all-none when the branch is
    /// disabled); this exact matrix, subset-filtered, drove the decoder.
    pub relations: RelationMatrix,
    pub relation_logits: Option<Tensor>,
    pub resolved: Vec<Option<String>>,
}

/// A built training-loss graph plus the scalar loss pieces.
pub struct TrainingForward {
    pub graph: Graph,
    pub param_vars: Vec<Var>,
    pub loss: Var,
    pub values: LossValues,
}

/// Scalar loss components of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub span: f64,
    pub relation: f64,
    pub supervised_slots: usize,
    pub pair_count: usize,
}

impl DsgfModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder_hidden;
        let h = cfg.graph_hidden;
        let hd = cfg.decode_width();
        let mut params = ParamStore::new();
        let mut rng = Rng::derive(seed, &[0x6d6f64656c]);

        let (dialogue_encoder, schema_encoder_ids) = match cfg.encoder_kind {
            EncoderKind::Toy => {
                let enc = ToyEncoderIds::create(&mut params, "encoder", d, &mut rng);
                let schema_enc = if cfg.share_encoder {
                    None
                } else {
                    Some(ToyEncoderIds::create(
                        &mut params,
                        "schema_encoder",
                        d,
                        &mut rng,
                    ))
                };
                (Some(enc), schema_enc)
            }
            EncoderKind::Pretrained => (None, None),
        };

        let proj_w = params.add("proj.w", glorot(d, h, &mut rng));
        let proj_b = params.add("proj.b", zeros_vec(h));
        let membership = (0..cfg.layers)
            .map(|i| params.add(&format!("membership.{i}.w"), glorot(2, h, &mut rng)))
            .collect();
        let fus_wq = params.add("fusion.wq", glorot(h, h, &mut rng));
        let fus_wk = params.add("fusion.wk", glorot(d, h, &mut rng));
        let fus_wv = params.add("fusion.wv", glorot(d, h, &mut rng));
        let fus_wa = params.add("fusion.wa", glorot(h, h, &mut rng));

        let mut rel_mlp = Vec::new();
        for i in 0..cfg.relation_mlp_depth {
            let last = i + 1 == cfg.relation_mlp_depth;
            let inw = if i == 0 { 2 * h } else { h };
            let outw = if last { RelationKind::ALL.len() } else { h };
            let w = params.add(&format!("relation.{i}.w"), glorot(inw, outw, &mut rng));
            let b = params.add(&format!("relation.{i}.b"), zeros_vec(outw));
            rel_mlp.push((w, b));
        }

        let channel_w = [
            params.add("subgraph.membership.w", glorot(2, h, &mut rng)),
            params.add("subgraph.co_reference.w", glorot(2, h, &mut rng)),
            params.add("subgraph.co_update.w", glorot(2, h, &mut rng)),
            params.add("subgraph.co_occurrence.w", glorot(2, h, &mut rng)),
        ];
        let agg_ws = params.add("aggregate.ws", glorot(h, d, &mut rng));
        let agg_bs = params.add("aggregate.bs", zeros_vec(h));
        let span_wd = params.add("span.wd", glorot(hd, d, &mut rng));
        let span_bd = params.add("span.bd", zeros_vec(hd));
        let span_rd = params.add("span.rd", glorot(2, hd, &mut rng));

        let encoder = match cfg.encoder_kind {
            EncoderKind::Toy => EncoderImpl::Toy {
                ids: dialogue_encoder.expect("toy encoder ids"),
                d,
            },
            EncoderKind::Pretrained => EncoderImpl::Pretrained {
                cache: PretrainedCache::from_env()?,
                d,
            },
        };
        let schema_encoder = match (cfg.encoder_kind, schema_encoder_ids) {
            (EncoderKind::Toy, Some(ids)) => EncoderImpl::Toy { ids, d },
            (EncoderKind::Toy, None) => EncoderImpl::Toy {
                ids: dialogue_encoder.expect("toy encoder ids"),
                d,
            },
            (EncoderKind::Pretrained, _) => EncoderImpl::Pretrained {
                cache: PretrainedCache::from_env()?,
                d,
            },
        };

        Ok(DsgfModel {
            cfg,
            params,
            ids: ParamIds {
                proj_w,
                proj_b,
                membership,
                fus_wq,
                fus_wk,
                fus_wv,
                fus_wa,
                rel_mlp,
                channel_w,
                agg_ws,
                agg_bs,
                span_wd,
                span_bd,
                span_rd,
            },
            encoder,
            schema_encoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Rebuild a model around existing parameters (checkpoint loading).
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = DsgfModel::new(cfg, 0)?;
        if fresh.params.shapes() != params.shapes() {
            return Err(DsgfError::Checkpoint(
                "parameter shapes do not match the configuration".to_string(),
            ));
        }
        Ok(DsgfModel {
            params,
            ..fresh
        })
    }

    /// Build the schema-dependent runtime. The effective static adjacency is
    /// the identity matrix when membership reasoning is ablated away.
    pub fn runtime(&self, schemata: &[SchemaElement]) -> Result<SchemaRuntime> {
        let graph = build_schema_graph(schemata)?;
        let n = graph.node_count();
        let static_adjacency: Vec<Vec<bool>> = if self.cfg.ablation.use_membership {
            graph.static_edges().to_vec()
        } else {
            (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect()
        };
        let static_bias = adjacency_bias(&static_adjacency);
        let vocab = crate::corpus::candidate_vocabulary(&graph);
        let node_tokens = graph
            .nodes()
            .iter()
            .map(|e| description_tokens(&e.description))
            .collect();
        let vocab_tokens = vocab.iter().map(|v| description_tokens(v)).collect();
        let slot_keys = graph
            .slots()
            .iter()
            .map(|s| SlotKey::new(s.parent_domain.as_deref().unwrap_or_default(), &s.id))
            .collect();
        Ok(SchemaRuntime {
            fingerprint: SchemaFingerprint::of(schemata),
            graph,
            static_adjacency,
            static_bias,
            vocab,
            slot_keys,
            node_tokens,
            vocab_tokens,
        })
    }

    fn dialogue_vars(&self) -> &EncoderImpl {
        &self.encoder
    }

    fn schema_vars(&self) -> &EncoderImpl {
        &self.schema_encoder
    }

    /// Schema node initializer: class vector of each node's description,
    /// stacked in node order (pre-projection, encoder width).
    fn node_init_rows(&self, g: &mut Graph, pv: &[Var], rt: &SchemaRuntime) -> Result<Var> {
        let mut rows = Vec::with_capacity(rt.node_tokens.len());
        for toks in &rt.node_tokens {
            let enc = self.schema_vars().encode(g, pv, toks)?;
            rows.push(g.gather_rows(enc, vec![0]));
        }
        Ok(g.concat_rows(&rows))
    }

    fn vocab_rows(&self, g: &mut Graph, pv: &[Var], rt: &SchemaRuntime) -> Result<Option<Var>> {
        if rt.vocab_tokens.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(rt.vocab_tokens.len());
        for toks in &rt.vocab_tokens {
            let enc = self.schema_vars().encode(g, pv, toks)?;
            rows.push(g.gather_rows(enc, vec![0]));
        }
        Ok(Some(g.concat_rows(&rows)))
    }

    /// Shared pipeline front: token matrix, fused node embeddings and the
    /// optional relation logits.
    fn encode_and_fuse(
        &self,
        g: &mut Graph,
        pv: &[Var],
        rt: &SchemaRuntime,
        sample: &DialogueSample,
        dropout: &mut DropoutCtx,
    ) -> Result<(Var, Var, Option<Var>)> {
        if sample.tokens.len() > self.cfg.max_len {
            return Err(DsgfError::Shape(format!(
                "sequence of {} tokens exceeds max_len {}; truncate first",
                sample.tokens.len(),
                self.cfg.max_len
            )));
        }
        let tokens_var = self.dialogue_vars().encode(g, pv, &sample.tokens)?;
        let inits = self.node_init_rows(g, pv, rt)?;
        let projected = g.matmul(inits, pv[self.ids.proj_w.0]);
        let node_embed = g.add_row(projected, pv[self.ids.proj_b.0]);
        let membership_vars: Vec<Var> =
            self.ids.membership.iter().map(|p| pv[p.0]).collect();
        let reasoned =
            run_membership_stack(g, node_embed, &membership_vars, &rt.static_bias, dropout)?;
        let fusion = FusionVars {
            wq: pv[self.ids.fus_wq.0],
            wk: pv[self.ids.fus_wk.0],
            wv: pv[self.ids.fus_wv.0],
            wa: pv[self.ids.fus_wa.0],
        };
        let fused = fuse_dialogue(
            g,
            reasoned,
            tokens_var,
            &fusion,
            self.cfg.heads,
            &sample.token_mask,
            dropout,
        )?;
        let logits = if self.cfg.relation_branch_enabled() {
            let n = rt.slot_count();
            if n >= 1 {
                let slots = g.gather_rows(fused, (0..n).collect());
                let mlp: Vec<(Var, Var)> = self
                    .ids
                    .rel_mlp
                    .iter()
                    .map(|(w, b)| (pv[w.0], pv[b.0]))
                    .collect();
                complete_dynamic_relations(g, slots, &mlp, dropout)?
            } else {
                None
            }
        } else {
            None
        };
        Ok((tokens_var, fused, logits))
    }

    /// Relation matrix filtered down to the channels the decoder may see.
    fn filter_relations(&self, m: &RelationMatrix) -> RelationMatrix {
        let kinds = self.cfg.dynamic_kinds();
        let mut out = RelationMatrix::all_none(m.size());
        for (i, j, k) in m.upper_triangle() {
            if k != RelationKind::None && kinds.contains(&k) {
                out.set_pair(i, j, k).expect("in range");
            }
        }
        out
    }

    /// Sub-graph channels + aggregation into per-slot decode embeddings.
    fn decode_slot_embeddings(
        &self,
        g: &mut Graph,
        pv: &[Var],
        rt: &SchemaRuntime,
        fused: Var,
        tokens_var: Var,
        relations: &RelationMatrix,
        dropout: &mut DropoutCtx,
    ) -> Result<Var> {
        let n = rt.slot_count();
        // membership channel runs over the full graph, then keeps slot rows
        let membership_full = subgraph_embed(
            g,
            fused,
            pv[self.ids.channel_w[0].0],
            &rt.static_adjacency,
            dropout,
        )?;
        let membership_slots = g.gather_rows(membership_full, (0..n).collect());

        let kinds = self.cfg.dynamic_kinds();
        let mut channels = vec![membership_slots];
        if !kinds.is_empty() && n > 0 {
            let slots_fused = g.gather_rows(fused, (0..n).collect());
            let fully = matches!(
                self.cfg.ablation.relation_subset,
                RelationSubset::FullyConnected
            );
            for kind in &kinds {
                let adj = if fully {
                    fully_connected_adjacency(n)
                } else {
                    channel_adjacency(relations, *kind)
                };
                let w = pv[self.ids.channel_w[kind.index()].0];
                channels.push(subgraph_embed(g, slots_fused, w, &adj, dropout)?);
            }
        }
        let cls = g.gather_rows(tokens_var, vec![0]);
        let d = self.cfg.encoder_hidden;
        let cls_vec = g.reshape(cls, vec![d]);
        aggregate_subgraphs(
            g,
            &channels,
            cls_vec,
            &AggregationVars {
                ws: pv[self.ids.agg_ws.0],
                bs: pv[self.ids.agg_bs.0],
            },
            self.cfg.ablation.use_relation_aggregation,
        )
    }

    /// Candidate element embeddings: dialogue tokens then vocabulary values.
    fn candidate_rows(
        &self,
        g: &mut Graph,
        pv: &[Var],
        rt: &SchemaRuntime,
        tokens_var: Var,
    ) -> Result<Var> {
        match self.vocab_rows(g, pv, rt)? {
            Some(vocab) => Ok(g.concat_rows(&[tokens_var, vocab])),
            None => Ok(tokens_var),
        }
    }

    /// Per-slot 2 x E span logits.
    fn span_logits(
        &self,
        g: &mut Graph,
        pv: &[Var],
        rt: &SchemaRuntime,
        slot_embeddings: Var,
        candidates: Var,
    ) -> Result<Vec<Var>> {
        let vars = SpanScorerVars {
            wd: pv[self.ids.span_wd.0],
            bd: pv[self.ids.span_bd.0],
            rd: pv[self.ids.span_rd.0],
        };
        let base = span_scorer_base(g, vars.wd, candidates)?;
        let hd = self.cfg.decode_width();
        let mut out = Vec::with_capacity(rt.slot_count());
        for i in 0..rt.slot_count() {
            let row = g.gather_rows(slot_embeddings, vec![i]);
            let s = g.reshape(row, vec![hd]);
            out.push(score_spans(g, base, s, &vars));
        }
        Ok(out)
    }

    /// Teacher-forced training loss for one sample (Eq. 14 style weighted
    /// sum of relation and span cross-entropies). The decoder consumes the
    /// gold relation matrix; the relation classifier is supervised from the
    /// same labels in parallel.
    pub fn training_loss(
        &self,
        rt: &SchemaRuntime,
        sample: &DialogueSample,
        lambda: f64,
        none_class_weight: f64,
        dropout: &mut DropoutCtx,
    ) -> Result<TrainingForward> {
        let mut g = Graph::new();
        let pv = register_params(&mut g, &self.params);
        let (tokens_var, fused, logits) =
            self.encode_and_fuse(&mut g, &pv, rt, sample, dropout)?;

        let gold = self.filter_relations(&sample.gold_relations);
        let slot_embeds =
            self.decode_slot_embeddings(&mut g, &pv, rt, fused, tokens_var, &gold, dropout)?;
        let candidates = self.candidate_rows(&mut g, &pv, rt, tokens_var)?;
        let span_logits = self.span_logits(&mut g, &pv, rt, slot_embeds, candidates)?;

        // span loss: mean over supervised slots of the averaged start/end
        // cross-entropies; None-valued slots get the inverted sentinel so the
        // decoder can learn the end-before-start None rule
        let e_total = g.value(candidates).rows();
        let mut slot_losses = Vec::new();
        for (i, gold_span) in sample.gold_spans.iter().enumerate() {
            let Some((ts, te)) = span_targets(gold_span, e_total) else {
                continue;
            };
            let logp = g.log_softmax_rows(span_logits[i]);
            slot_losses.push(g.nll_pick(logp, vec![(0, ts, 1.0), (1, te, 1.0)]));
        }
        let supervised = slot_losses.len();
        let span_loss = match slot_losses.split_first() {
            Some((&first, rest)) => {
                let mut acc = first;
                for l in rest {
                    acc = g.add(acc, *l);
                }
                Some(g.scale(acc, 1.0 / supervised as f64))
            }
            None => None,
        };

        // relation loss over all upper-triangle pairs of the (filtered) gold
        let mut pair_count = 0;
        let relation_loss = match logits {
            Some(lv) => {
                let rel_gold = &gold;
                let picks: Vec<(usize, usize, f64)> = rel_gold
                    .upper_triangle()
                    .iter()
                    .enumerate()
                    .map(|(row, (_, _, kind))| {
                        let w = if *kind == RelationKind::None {
                            none_class_weight
                        } else {
                            1.0
                        };
                        (row, kind.index(), w)
                    })
                    .collect();
                pair_count = picks.len();
                if picks.is_empty() {
                    None
                } else {
                    let logp = g.log_softmax_rows(lv);
                    Some(g.nll_pick(logp, picks))
                }
            }
            None => None,
        };

        if span_loss.is_none() && relation_loss.is_none() {
            return Err(DsgfError::DegenerateBatch(format!(
                "dialogue {} turn {}: no supervised slots and no slot pairs",
                sample.dialogue_id, sample.turn_index
            )));
        }

        let zero = g.leaf(Tensor::scalar(0.0));
        let ls = span_loss.unwrap_or(zero);
        let lr = relation_loss.unwrap_or(zero);
        let lr_scaled = g.scale(lr, lambda);
        let ls_scaled = g.scale(ls, 1.0 - lambda);
        let loss = g.add(lr_scaled, ls_scaled);

        let values = LossValues {
            total: g.value(loss).scalar_value(),
            span: g.value(ls).scalar_value(),
            relation: g.value(lr).scalar_value(),
            supervised_slots: supervised,
            pair_count,
        };
        Ok(TrainingForward {
            graph: g,
            param_vars: pv,
            loss,
            values,
        })
    }

    /// Inference for one turn: predicted relations drive the decoder, spans
    /// are resolved and folded into the previous state.
    pub fn infer_turn(
        &self,
        rt: &SchemaRuntime,
        sample: &DialogueSample,
        previous: &DialogueState,
        carryover: bool,
    ) -> Result<TurnPrediction> {
        let mut dropout = DropoutCtx::eval();
        let mut g = Graph::new();
        let pv = register_params(&mut g, &self.params);
        let (tokens_var, fused, logits) =
            self.encode_and_fuse(&mut g, &pv, rt, sample, &mut dropout)?;

        let n = rt.slot_count();
        let (predicted, logits_value) = match logits {
            Some(lv) => {
                let value = g.value(lv).clone();
                (relations_from_logits(&value, n), Some(value))
            }
            None => (RelationMatrix::all_none(n), None),
        };
        let filtered = self.filter_relations(&predicted);
        let slot_embeds = self.decode_slot_embeddings(
            &mut g,
            &pv,
            rt,
            fused,
            tokens_var,
            &filtered,
            &mut dropout,
        )?;
        let candidates = self.candidate_rows(&mut g, &pv, rt, tokens_var)?;
        let span_logits = self.span_logits(&mut g, &pv, rt, slot_embeds, candidates)?;

        let candidate_elements = CandidateElements {
            element_tokens: {
                let mut v = sample.tokens.clone();
                v.extend(rt.vocab.iter().cloned());
                v
            },
            boundaries: sample.tokens.len(),
        };
        let mut resolved = Vec::with_capacity(n);
        for lv in &span_logits {
            let probs = g.softmax_rows(*lv);
            let pt = g.value(probs);
            resolved.push(resolve_value(pt.row(0), pt.row(1), &candidate_elements));
        }
        let state = assemble_state(rt.graph.slots(), &resolved, previous, carryover);
        Ok(TurnPrediction {
            state,
            relations: predicted,
            relation_logits: logits_value,
            resolved,
        })
    }

    /// Intermediate tensors of one eval-mode forward pass with an explicit
    /// relation matrix; used for inspection and wiring checks.
    pub fn forward_parts(
        &self,
        rt: &SchemaRuntime,
        sample: &DialogueSample,
        relations: &RelationMatrix,
    ) -> Result<ForwardParts> {
        let mut dropout = DropoutCtx::eval();
        let mut g = Graph::new();
        let pv = register_params(&mut g, &self.params);
        let (tokens_var, fused, logits) =
            self.encode_and_fuse(&mut g, &pv, rt, sample, &mut dropout)?;
        let filtered = self.filter_relations(relations);
        let decoder_input = self.decode_slot_embeddings(
            &mut g,
            &pv,
            rt,
            fused,
            tokens_var,
            &filtered,
            &mut dropout,
        )?;
        let n = rt.slot_count();
        let membership_full = subgraph_embed(
            &mut g,
            fused,
            pv[self.ids.channel_w[0].0],
            &rt.static_adjacency,
            &mut dropout,
        )?;
        let membership_channel = g.gather_rows(membership_full, (0..n).collect());
        Ok(ForwardParts {
            fused: g.value(fused).clone(),
            relation_logits: logits.map(|v| g.value(v).clone()),
            decoder_input: g.value(decoder_input).clone(),
            membership_channel: g.value(membership_channel).clone(),
        })
    }

    /// Contract operation: contextual embeddings for a dialogue token
    /// sequence, eval mode. Errors when the sequence is overlong or does not
    /// start with the class marker.
    pub fn encode_dialogue_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddings> {
        if tokens.is_empty() || tokens[0] != crate::corpus::CLASS_MARKER {
            return Err(DsgfError::Shape(
                "token sequence must start with the class marker".to_string(),
            ));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(DsgfError::Shape(format!(
                "sequence of {} tokens exceeds max_len {}; truncate first",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let mut g = Graph::new();
        let pv = register_params(&mut g, &self.params);
        let out = self.dialogue_vars().encode(&mut g, &pv, tokens)?;
        Ok(TokenEmbeddings {
            matrix: g.value(out).clone(),
            mask: vec![true; tokens.len()],
        })
    }

    /// Contract operation: schema-agnostic node init embeddings, one class
    /// vector per element (in schema graph node order), eval mode.
    pub fn init_schema_embeddings(
        &self,
        schemata: &[SchemaElement],
    ) -> Result<NodeInitEmbeddings> {
        let rt = self.runtime(schemata)?;
        let mut g = Graph::new();
        let pv = register_params(&mut g, &self.params);
        let rows = self.node_init_rows(&mut g, &pv, &rt)?;
        Ok(NodeInitEmbeddings {
            matrix: g.value(rows).clone(),
        })
    }
}

/// Intermediate tensors of one forward pass (eval mode).
#[derive(Debug, Clone)]
pub struct ForwardParts {
    pub fused: Tensor,
    pub relation_logits: Option<Tensor>,
    /// Per-slot embeddings the span scorer consumes.
    pub decoder_input: Tensor,
    /// The membership sub-graph channel alone (slot rows).
    pub membership_channel: Tensor,
}

/// Cross-entropy targets for one slot's span. None-valued slots are
/// supervised with the inverted sentinel (start 1, end 0), which decodes to
/// None under the end-before-start rule; unaligned slots are skipped.
pub fn span_targets(gold: &crate::corpus::GoldSpan, elements: usize) -> Option<(usize, usize)> {
    match gold {
        crate::corpus::GoldSpan::At(s, e) => Some((*s, *e)),
        crate::corpus::GoldSpan::NoValue if elements >= 2 => Some((1, 0)),
        _ => None,
    }
}
