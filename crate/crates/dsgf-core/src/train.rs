//! Joint training of the span decoder and relation classifier: the weighted
//! loss, the warmup/decay schedule, batched Adam optimization with
//! data-parallel gradient computation, and checkpointing.
//!
//! During training the decoder consumes gold relation matrices (teacher
//! forcing) while the relation classifier is supervised in parallel; at
//! inference the decoder consumes the argmax of the predicted relations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSample, DialogueState, GoldSpan, HistoryTurns, SampleOptions};
use crate::error::{DsgfError, Result};
use crate::graph_net::DropoutCtx;
use crate::model::{
    span_targets, AblationConfig, DsgfModel, EncoderKind, LossValues, ModelConfig, SchemaRuntime,
    TurnPrediction,
};
use crate::nn::{collect_grads, Adam, ParamStore};
use crate::par;
use crate::relations::{LabeledTurn, RelationKind, RelationMatrix};
use crate::rng::Rng;
use crate::schema::{SchemaElement, SchemaFingerprint};
use crate::tensor::Tensor;

/// Encoder settings section of the train config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub max_len: usize,
    pub share_encoder: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            kind: EncoderKind::Toy,
            hidden: 64,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            share_encoder: true,
        }
    }
}

/// Graph settings section of the train config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub relation_mlp_depth: usize,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            layers: 3,
            hidden: 256,
            heads: 4,
            relation_mlp_depth: 8,
        }
    }
}

/// The full training configuration; every field has a default and the whole
/// thing round-trips through a flat TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Balance between relation loss and span loss.
    pub lambda_balance: f64,
    /// Peak learning rate; default depends on the encoder kind (2e-5 for the
    /// pretrained path, 1e-3 for the randomly initialized toy path).
    pub learning_rate: Option<f64>,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Down-weight for the none class in the relation loss.
    pub none_class_weight: f64,
    pub cooccurrence_threshold: f64,
    pub history_turns: HistoryTurns,
    pub encoder: EncoderSection,
    pub graph: GraphSection,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_balance: 0.5,
            learning_rate: None,
            warmup_fraction: 0.10,
            epochs: 10,
            batch_size: 16,
            seed: 17,
            dropout: 0.3,
            none_class_weight: 1.0,
            cooccurrence_threshold: 0.05,
            history_turns: HistoryTurns::All,
            encoder: EncoderSection::default(),
            graph: GraphSection::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_balance) {
            return Err(DsgfError::Config(
                "lambda_balance must be in [0, 1]".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(DsgfError::Config(
                "warmup_fraction must be in [0, 1)".to_string(),
            ));
        }
        if self.batch_size == 0 {
            return Err(DsgfError::Config("batch_size must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.cooccurrence_threshold) {
            return Err(DsgfError::Config(
                "cooccurrence_threshold must be in [0, 1]".to_string(),
            ));
        }
        if self.none_class_weight <= 0.0 {
            return Err(DsgfError::Config(
                "none_class_weight must be > 0".to_string(),
            ));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder_kind: self.encoder.kind,
            encoder_hidden: self.encoder.hidden,
            max_len: self.encoder.max_len,
            share_encoder: self.encoder.share_encoder,
            graph_hidden: self.graph.hidden,
            layers: self.graph.layers,
            heads: self.graph.heads,
            relation_mlp_depth: self.graph.relation_mlp_depth,
            dropout: self.dropout,
            ablation: self.ablation,
        }
    }

    pub fn resolved_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.encoder.kind {
            EncoderKind::Pretrained => 2e-5,
            EncoderKind::Toy => 1e-3,
        })
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            history_turns: self.history_turns,
            max_len: self.encoder.max_len,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| DsgfError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Per-step loss decomposition. The combined value always satisfies
/// `loss = lambda * relation_loss + (1 - lambda) * span_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub span_loss: f64,
    pub relation_loss: f64,
}

impl LossReport {
    pub fn decomposition_holds(&self, lambda: f64, tol: f64) -> bool {
        (self.loss - (lambda * self.relation_loss + (1.0 - lambda) * self.span_loss)).abs() <= tol
    }
}

/// Standalone loss evaluation from raw logits, independent of the autodiff
/// path: per-slot mean of start/end cross-entropies averaged over supervised
/// slots, weighted 4-way cross-entropy over slot pairs, combined by lambda.
pub fn compute_loss(
    span_logits: &[Tensor],
    gold_spans: &[GoldSpan],
    relation_logits: Option<&Tensor>,
    gold_relations: &RelationMatrix,
    lambda: f64,
    none_class_weight: f64,
) -> Result<LossReport> {
    if span_logits.len() != gold_spans.len() {
        return Err(DsgfError::Shape(format!(
            "{} span logit blocks for {} slots",
            span_logits.len(),
            gold_spans.len()
        )));
    }
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|&x| x - lse).collect()
    };

    let mut span_terms = Vec::new();
    for (logits, gold) in span_logits.iter().zip(gold_spans) {
        let e = logits.cols();
        let Some((ts, te)) = span_targets(gold, e) else {
            continue;
        };
        let ls = log_softmax(logits.row(0));
        let le = log_softmax(logits.row(1));
        span_terms.push(-(ls[ts] + le[te]) / 2.0);
    }
    let span_loss = if span_terms.is_empty() {
        0.0
    } else {
        span_terms.iter().sum::<f64>() / span_terms.len() as f64
    };

    let mut relation_loss = 0.0;
    let mut pair_count = 0;
    if let Some(logits) = relation_logits {
        let labels = gold_relations.upper_triangle();
        if logits.rows() != labels.len() {
            return Err(DsgfError::Shape(format!(
                "{} logit rows for {} pairs",
                logits.rows(),
                labels.len()
            )));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (row, (_, _, kind)) in labels.iter().enumerate() {
            let lp = log_softmax(logits.row(row));
            let w = if *kind == RelationKind::None {
                none_class_weight
            } else {
                1.0
            };
            num += -w * lp[kind.index()];
            den += w;
        }
        if den > 0.0 {
            relation_loss = num / den;
            pair_count = labels.len();
        }
    }

    if span_terms.is_empty() && pair_count == 0 {
        return Err(DsgfError::DegenerateBatch(
            "no supervised slots and no slot pairs".to_string(),
        ));
    }
    Ok(LossReport {
        loss: lambda * relation_loss + (1.0 - lambda) * span_loss,
        span_loss,
        relation_loss,
    })
}

/// Piecewise-linear schedule: 0 -> peak over the warmup span, then linear
/// decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step as f64;
    let total = total_steps as f64;
    let w = warmup_fraction * total;
    if t >= total {
        return 0.0;
    }
    if w > 0.0 && t < w {
        peak * t / w
    } else {
        peak * (total - t) / (total - w)
    }
}

/// Per-epoch aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub span_loss: f64,
    pub relation_loss: f64,
    pub lr_last: f64,
    pub samples: usize,
}

/// Per-sample gradients for one batch, computed in input order so the
/// sequential reduction is bitwise deterministic regardless of thread count.
fn batch_gradients_with<F>(
    map: F,
    model: &DsgfModel,
    rt: &SchemaRuntime,
    batch: &[&DialogueSample],
    lambda: f64,
    none_weight: f64,
    dropout_p: f64,
    seed: u64,
    step: usize,
) -> Result<(Vec<Tensor>, Vec<LossValues>)>
where
    F: Fn(
        &[&DialogueSample],
        &(dyn Fn(usize, &&DialogueSample) -> Result<(Vec<Tensor>, LossValues)> + Sync),
    ) -> Vec<Result<(Vec<Tensor>, LossValues)>>,
{
    let one = |idx: usize, sample: &&DialogueSample| -> Result<(Vec<Tensor>, LossValues)> {
        let mut dropout = if dropout_p > 0.0 {
            DropoutCtx::train(dropout_p, Rng::derive(seed, &[0xd0, step as u64, idx as u64]))
        } else {
            DropoutCtx::eval()
        };
        let fwd = model.training_loss(rt, sample, lambda, none_weight, &mut dropout)?;
        let grads = fwd.graph.backward(fwd.loss);
        Ok((
            collect_grads(&grads, model.params(), &fwd.param_vars),
            fwd.values,
        ))
    };
    let results = map(batch, &one);
    let mut grad_sum: Option<Vec<Tensor>> = None;
    let mut values = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for r in results {
        let (grads, v) = r?;
        values.push(v);
        match &mut grad_sum {
            None => {
                grad_sum = Some(
                    grads
                        .into_iter()
                        .map(|mut t| {
                            for x in t.data_mut() {
                                *x *= scale;
                            }
                            t
                        })
                        .collect(),
                );
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_scaled(g, scale);
                }
            }
        }
    }
    Ok((grad_sum.expect("non-empty batch"), values))
}

/// Mean gradients over a batch, parallel over samples when the `parallel`
/// feature is on.
pub fn batch_gradients(
    model: &DsgfModel,
    rt: &SchemaRuntime,
    batch: &[&DialogueSample],
    lambda: f64,
    none_weight: f64,
    dropout_p: f64,
    seed: u64,
    step: usize,
) -> Result<(Vec<Tensor>, Vec<LossValues>)> {
    batch_gradients_with(
        |items, f| par::map_indexed(items, f),
        model,
        rt,
        batch,
        lambda,
        none_weight,
        dropout_p,
        seed,
        step,
    )
}

/// Always-sequential variant (benchmark baseline).
pub fn batch_gradients_seq(
    model: &DsgfModel,
    rt: &SchemaRuntime,
    batch: &[&DialogueSample],
    lambda: f64,
    none_weight: f64,
    dropout_p: f64,
    seed: u64,
    step: usize,
) -> Result<(Vec<Tensor>, Vec<LossValues>)> {
    batch_gradients_with(
        |items, f| par::map_indexed_seq(items, f),
        model,
        rt,
        batch,
        lambda,
        none_weight,
        dropout_p,
        seed,
        step,
    )
}

/// Owns the model, optimizer state and schedule position.
pub struct Trainer {
    model: DsgfModel,
    cfg: TrainConfig,
    rt: SchemaRuntime,
    opt: Adam,
    step: usize,
    epoch: usize,
    total_steps: Option<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, schemata: &[SchemaElement]) -> Result<Self> {
        cfg.validate()?;
        let model = DsgfModel::new(cfg.model_config(), cfg.seed)?;
        let rt = model.runtime(schemata)?;
        let opt = Adam::new(model.params());
        Ok(Trainer {
            model,
            cfg,
            rt,
            opt,
            step: 0,
            epoch: 0,
            total_steps: None,
        })
    }

    pub fn model(&self) -> &DsgfModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DsgfModel {
        &mut self.model
    }

    pub fn runtime(&self) -> &SchemaRuntime {
        &self.rt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn plan(&mut self, n_samples: usize) {
        if self.total_steps.is_none() {
            let per_epoch = n_samples.div_ceil(self.cfg.batch_size);
            self.total_steps = Some(self.cfg.epochs.max(1) * per_epoch);
        }
    }

    /// Run `n_epochs` over the samples. Each epoch shuffles with a seed
    /// derived from (config seed, epoch index), so runs are reproducible.
    pub fn run_epochs(
        &mut self,
        samples: &[DialogueSample],
        n_epochs: usize,
    ) -> Result<Vec<EpochMetrics>> {
        if samples.is_empty() {
            return Err(DsgfError::DegenerateBatch("no training samples".to_string()));
        }
        self.plan(samples.len());
        let total = self.total_steps.expect("planned");
        let peak = self.cfg.resolved_learning_rate();
        let lambda = self.cfg.lambda_balance;
        let mut out = Vec::with_capacity(n_epochs);
        for _ in 0..n_epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            Rng::derive(self.cfg.seed, &[0xe0, self.epoch as u64]).shuffle(&mut order);
            let mut sums = (0.0, 0.0, 0.0);
            let mut lr_last = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&DialogueSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (grads, values) = batch_gradients(
                    &self.model,
                    &self.rt,
                    &batch,
                    lambda,
                    self.cfg.none_class_weight,
                    self.cfg.dropout,
                    self.cfg.seed,
                    self.step,
                )?;
                for v in &values {
                    let report = LossReport {
                        loss: v.total,
                        span_loss: v.span,
                        relation_loss: v.relation,
                    };
                    debug_assert!(report.decomposition_holds(lambda, 1e-6));
                    sums.0 += v.total;
                    sums.1 += v.span;
                    sums.2 += v.relation;
                }
                lr_last = lr_at(self.step, total, peak, self.cfg.warmup_fraction);
                self.opt.step(self.model.params_mut(), &grads, lr_last);
                self.step += 1;
            }
            let n = samples.len() as f64;
            out.push(EpochMetrics {
                epoch: self.epoch,
                loss: sums.0 / n,
                span_loss: sums.1 / n,
                relation_loss: sums.2 / n,
                lr_last,
                samples: samples.len(),
            });
            self.epoch += 1;
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            schema_fingerprint: self.rt.fingerprint.clone(),
            params: self.model.params().clone(),
        }
    }
}

/// Full training per the configured epoch count.
pub fn train(
    cfg: TrainConfig,
    schemata: &[SchemaElement],
    samples: &[DialogueSample],
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(cfg, schemata)?;
    let epochs = trainer.cfg.epochs;
    let metrics = if epochs == 0 {
        Vec::new()
    } else {
        trainer.run_epochs(samples, epochs)?
    };
    Ok((trainer, metrics))
}

/// One inference step: the full pipeline with the predicted relation graph.
pub fn inference_step(
    model: &DsgfModel,
    rt: &SchemaRuntime,
    sample: &DialogueSample,
    previous: &DialogueState,
    carryover: bool,
) -> Result<TurnPrediction> {
    model.infer_turn(rt, sample, previous, carryover)
}

/// Predicted state record for one turn, serializable to JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub state: DialogueState,
    /// Non-none predicted relation pairs as (slot id, slot id, kind).
    pub relations: Vec<(String, String, RelationKind)>,
}

/// Run inference over samples grouped by dialogue, carrying state forward
/// within each dialogue (unless `carryover` is off).
pub fn predict_corpus(
    model: &DsgfModel,
    rt: &SchemaRuntime,
    samples: &[DialogueSample],
    carryover: bool,
) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut states: BTreeMap<String, DialogueState> = BTreeMap::new();
    for sample in samples {
        let prev = states
            .get(&sample.dialogue_id)
            .cloned()
            .unwrap_or_default();
        let pred = model.infer_turn(rt, sample, &prev, carryover)?;
        states.insert(sample.dialogue_id.clone(), pred.state.clone());
        let slots = rt.graph.slots();
        let relations = pred
            .relations
            .upper_triangle()
            .into_iter()
            .filter(|(_, _, k)| *k != RelationKind::None)
            .map(|(i, j, k)| (slots[i].id.clone(), slots[j].id.clone(), k))
            .collect();
        out.push(PredictionRecord {
            dialogue_id: sample.dialogue_id.clone(),
            turn_index: sample.turn_index,
            state: pred.state,
            relations,
        });
    }
    Ok(out)
}

/// Apply labeler output to samples (matching on dialogue id and turn).
pub fn apply_labels(
    samples: &mut [DialogueSample],
    slot_order: &[String],
    labeled: &[LabeledTurn],
) -> Result<()> {
    let index: BTreeMap<(String, usize), &LabeledTurn> = labeled
        .iter()
        .map(|t| ((t.dialogue_id.clone(), t.turn_index), t))
        .collect();
    let slot_idx: BTreeMap<&str, usize> = slot_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    for sample in samples {
        let mut m = RelationMatrix::all_none(slot_order.len());
        if let Some(turn) = index.get(&(sample.dialogue_id.clone(), sample.turn_index)) {
            for (a, b, kind) in &turn.pairs {
                if *kind == RelationKind::None {
                    continue;
                }
                let (Some(&i), Some(&j)) = (slot_idx.get(a.as_str()), slot_idx.get(b.as_str()))
                else {
                    return Err(DsgfError::Corpus(format!(
                        "label references unknown slot pair ({a}, {b})"
                    )));
                };
                m.set_pair(i, j, *kind)?;
            }
        }
        sample.gold_relations = m;
    }
    Ok(())
}

/// Label samples in place from gold states via the rule-based labeler.
pub fn label_samples(
    samples: &mut [DialogueSample],
    slot_order: &[String],
    table: &crate::relations::CooccurrenceTable,
    threshold: f64,
) {
    let results = par::map_indexed(samples, |_, s| {
        crate::relations::label_turn(slot_order, &s.history_states, &s.gold_state, table, threshold)
    });
    for (s, m) in samples.iter_mut().zip(results) {
        s.gold_relations = m;
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned checkpoint: parameters + config + schema fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub schema_fingerprint: SchemaFingerprint,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(DsgfError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model from the stored parameters.
    pub fn into_model(self) -> Result<(DsgfModel, TrainConfig, SchemaFingerprint)> {
        let model = DsgfModel::with_params(self.config.model_config(), self.params)?;
        Ok((model, self.config, self.schema_fingerprint))
    }
}
