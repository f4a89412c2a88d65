//! `dsgf`: command-line entry point for schema-guided dialogue state
//! tracking experiments: relation labeling, training, prediction,
//! evaluation, graph inspection and parameter sweeps.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "dsgf",
    version,
    about = "Dialogue state tracking over a dynamic schema graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dynamic slot relation labels and relation statistics
    Label(commands::label::Args),
    /// Train a tracker on a labeled corpus
    Train(commands::train::Args),
    /// Predict dialogue states with a trained model
    Predict(commands::predict::Args),
    /// Evaluate predicted states against gold annotations
    Eval(commands::eval::Args),
    /// Print the schema graph and a turn's dynamic edges
    InspectGraph(commands::inspect::Args),
    /// Train across a one-axis parameter grid and summarize
    Sweep(commands::sweep::Args),
    /// Write the bundled synthetic schema and corpus to disk
    GenData(commands::gendata::Args),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Label(args) => commands::label::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Predict(args) => commands::predict::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::InspectGraph(args) => commands::inspect::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::GenData(args) => commands::gendata::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
