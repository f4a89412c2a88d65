// Scratch probe for overfit feasibility; not part of the deliverable.
use dsgf_core::corpus::samples_from_dialogues;
use dsgf_core::eval::{gold_records, joint_goal_accuracy, relation_metrics};
use dsgf_core::relations::build_cooccurrence_table;
use dsgf_core::synth;
use dsgf_core::train::{label_samples, predict_corpus, EncoderSection, GraphSection, Trainer, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let hidden: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let depth: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);
    let enc_d: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let none_w: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lambda: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let cfg = TrainConfig {
        epochs: args.get(14).and_then(|s| s.parse().ok()).unwrap_or(200),
        seed: args.get(11).and_then(|s| s.parse().ok()).unwrap_or(17),
        warmup_fraction: args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.10),
        lambda_balance: lambda,
        none_class_weight: none_w,
        batch_size: batch,
        dropout: 0.0,
        learning_rate: Some(lr),
        encoder: EncoderSection { hidden: enc_d, share_encoder: args.get(10).map(|s| s=="share").unwrap_or(true), ..Default::default() },
        graph: GraphSection { layers, hidden, heads: args.get(9).and_then(|s| s.parse().ok()).unwrap_or(4), relation_mlp_depth: depth },
        ..TrainConfig::default()
    };
    let schemata = synth::synthetic_schema();
    let graph = dsgf_core::schema::build_schema_graph(&schemata).unwrap();
    let dialogues = synth::synthetic_corpus(13, 10);
    let mut samples = samples_from_dialogues(&dialogues, &graph, cfg.sample_options()).unwrap();
    let table = build_cooccurrence_table(&dialogues).unwrap();
    let order: Vec<String> = graph.slots().iter().map(|s| s.id.clone()).collect();
    label_samples(&mut samples, &order, &table, cfg.cooccurrence_threshold);
    println!("samples: {}", samples.len());

    let mut trainer = Trainer::new(cfg, &schemata).unwrap();
    // scratch experiment: sharpen initial fusion attention
    if let Some(scale) = args.get(13).and_then(|s| s.parse::<f64>().ok()) {
        let names: Vec<(usize, String)> = trainer
            .model()
            .params()
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (i, n.to_string()))
            .collect();
        for (i, name) in names {
            if name == "encoder.wo" {
                let id = dsgf_core::nn::ParamId(i);
                let mut t = trainer.model().params().get(id).clone();
                for x in t.data_mut() { *x *= scale; }
                trainer.model_mut().params_mut().set(id, t);
            }
        }
    }
    let gold = gold_records(&samples);
    let gold_rel: Vec<_> = samples.iter().map(|s| s.gold_relations.clone()).collect();
    for chunk in 0..40 {
        let m = trainer.run_epochs(&samples, 5).unwrap();
        let last = m.last().unwrap();
        let preds = predict_corpus(trainer.model(), trainer.runtime(), &samples, true).unwrap();
        let jga = joint_goal_accuracy(&preds, &gold).unwrap();
        let pred_rel: Vec<_> = samples
            .iter()
            .map(|s| {
                trainer
                    .model()
                    .infer_turn(trainer.runtime(), s, &Default::default(), true)
                    .unwrap()
                    .relations
            })
            .collect();
        let (_, rel_acc) = relation_metrics(&pred_rel, &gold_rel).unwrap();
        println!(
            "epoch {:3}  loss {:.4}  span {:.4}  rel {:.4}  | JGA {:.3} relacc {:.3}  [{:.1}s]",
            (chunk + 1) * 5,
            last.loss,
            last.span_loss,
            last.relation_loss,
            jga,
            rel_acc,
            t0.elapsed().as_secs_f64()
        );
        if jga >= 0.95 && rel_acc >= 0.98 {
            println!("TARGET REACHED at epoch {} in {:.1}s", (chunk + 1) * 5, t0.elapsed().as_secs_f64());
            return;
        }
    }
    println!("NOT reached in 200 epochs ({:.1}s)", t0.elapsed().as_secs_f64());

    // diagnose: fused slot embedding geometry on one late sample
    {
        use dsgf_core::graph_net::DropoutCtx;
        let s = &samples[2];
        let fwd = trainer
            .model()
            .training_loss(trainer.runtime(), s, 0.5, 1.0, &mut DropoutCtx::eval())
            .unwrap();
        // fused var isn't exposed; approximate identity check via relation
        // logits spread instead
        drop(fwd);
        let pred = trainer
            .model()
            .infer_turn(trainer.runtime(), s, &Default::default(), true)
            .unwrap();
        if let Some(lg) = &pred.relation_logits {
            println!("logit rows (first 8):");
            for r in 0..lg.rows().min(8) {
                let row: Vec<String> = lg.row(r).iter().map(|x| format!("{x:+.2}")).collect();
                println!("  {}", row.join(" "));
            }
        }
    }

    // diagnose: relation mistakes
    let slots = trainer.runtime().graph.slots();
    for s in &samples {
        let pred = trainer
            .model()
            .infer_turn(trainer.runtime(), s, &Default::default(), true)
            .unwrap()
            .relations;
        for (i, j, gk) in s.gold_relations.upper_triangle() {
            let pk = pred.get(i, j);
            if pk != gk {
                println!(
                    "REL {} t{}: ({}, {}) gold={:?} pred={:?}",
                    s.dialogue_id, s.turn_index, slots[i].id, slots[j].id, gk, pk
                );
            }
        }
    }

    // diagnose: which slots are wrong on which turns
    let preds = predict_corpus(trainer.model(), trainer.runtime(), &samples, true).unwrap();
    for (p, s) in preds.iter().zip(&samples) {
        let gold_c = s.gold_state.canonical();
        let pred_c = p.state.canonical();
        if gold_c != pred_c {
            println!("-- {} turn {}", s.dialogue_id, s.turn_index);
            for (k, v) in &gold_c {
                let pv = pred_c.get(k);
                if pv != Some(v) {
                    println!("   {}: gold={:?} pred={:?}", k.slot, v, pv);
                }
            }
            for (k, v) in &pred_c {
                if !gold_c.contains_key(k) {
                    println!("   {}: gold=ABSENT pred={:?}", k.slot, v);
                }
            }
        }
    }
}
