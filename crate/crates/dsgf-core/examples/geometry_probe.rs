// Scratch probe: fused slot embedding geometry at init; not a deliverable.
use dsgf_core::corpus::samples_from_dialogues;
use dsgf_core::model::{DsgfModel, ModelConfig};
use dsgf_core::synth;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let h: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ModelConfig {
        encoder_hidden: d,
        graph_hidden: h,
        layers,
        heads: 4,
        relation_mlp_depth: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = DsgfModel::new(cfg, 17).unwrap();
    if let Some(scale) = std::env::args().nth(4).and_then(|s| s.parse::<f64>().ok()) {
        let names: Vec<(usize, String)> = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (i, n.to_string()))
            .collect();
        for (i, name) in names {
            if name == "encoder.wo" {
                let id = dsgf_core::nn::ParamId(i);
                let mut t = model.params().get(id).clone();
                for x in t.data_mut() { *x *= scale; }
                model.params_mut().set(id, t);
            }
        }
    }
    let schemata = synth::synthetic_schema();
    let rt = model.runtime(&schemata).unwrap();
    let dialogues = synth::synthetic_corpus(13, 2);
    let samples = samples_from_dialogues(&dialogues, &rt.graph, Default::default()).unwrap();
    let sample = &samples[2]; // a t4 turn
    let inits = model.init_schema_embeddings(&schemata).unwrap();
    let n_all = rt.graph.node_count();
    println!("pairwise cosines of INIT node rows:");
    for i in 0..n_all.min(4) {
        for j in (i + 1)..n_all.min(4) {
            let a = inits.matrix.row(i);
            let b = inits.matrix.row(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("  {i} vs {j}: cos {:.6}", dot / (na * nb));
        }
    }
    let parts = model
        .forward_parts(&rt, sample, &sample.gold_relations)
        .unwrap();
    let f = &parts.fused;
    let n = rt.slot_count();
    println!("pairwise cosine similarities of fused slot rows (init):");
    for i in 0..n {
        for j in (i + 1)..n {
            let a = f.row(i);
            let b = f.row(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!(
                "  {} vs {}: cos {:.6}",
                rt.graph.slots()[i].id,
                rt.graph.slots()[j].id,
                dot / (na * nb)
            );
        }
    }
}
