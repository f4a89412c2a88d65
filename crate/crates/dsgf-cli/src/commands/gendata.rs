//! `dsgf gen-data`: write the bundled synthetic schema and corpus, and
//! optionally an extended schema with an unseen domain for zero-shot runs.

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use dsgf_core::corpus::write_corpus_file;
use dsgf_core::schema::write_schema_file;
use dsgf_core::synth;

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
pub struct Args {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    /// Also write an extended schema and corpus with an unseen domain
    #[arg(long)]
    pub unseen: bool,
}

pub fn run(args: Args) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let schema_path = args.out_dir.join("schema.json");
    let corpus_path = args.out_dir.join("corpus.json");
    write_schema_file(&schema_path, &synth::synthetic_schema())?;
    write_corpus_file(&corpus_path, &synth::synthetic_corpus(args.seed, args.dialogues))?;
    let mut manifest = ManifestBuilder::new("gen-data");
    manifest
        .config(&serde_json::json!({
            "dialogues": args.dialogues,
            "seed": args.seed,
            "unseen": args.unseen,
        }))?
        .seed(args.seed)
        .artifact(&schema_path)
        .artifact(&corpus_path);
    println!("wrote {}", schema_path.display());
    println!("wrote {}", corpus_path.display());

    if args.unseen {
        let mut extended = synth::synthetic_schema();
        extended.extend(synth::unseen_domain());
        let ext_schema = args.out_dir.join("unseen_schema.json");
        let ext_corpus = args.out_dir.join("unseen_corpus.json");
        write_schema_file(&ext_schema, &extended)?;
        write_corpus_file(&ext_corpus, &synth::unseen_domain_dialogues(args.dialogues))?;
        manifest.artifact(&ext_schema).artifact(&ext_corpus);
        println!("wrote {}", ext_schema.display());
        println!("wrote {}", ext_corpus.display());
    }
    manifest.write(&args.out_dir)?;
    Ok(())
}
