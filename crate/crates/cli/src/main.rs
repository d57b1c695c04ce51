use std::path::PathBuf;

use clap::Parser;
use dsgd_lab::{run_invocation, Command, Invocation};

#[derive(Parser)]
#[command(name = "dsgd-lab", version, about = "Decentralized SGD experiments and predictions")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set run.gamma=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for `topology.kind`.
    #[arg(long, visible_alias = "graph")]
    topology: Option<String>,
    /// Shorthand for `topology.m`.
    #[arg(long)]
    m: Option<usize>,
    /// Shorthand for `topology.t`.
    #[arg(long)]
    t: Option<f64>,
    /// Shorthand for `run.algorithm`.
    #[arg(long)]
    algorithm: Option<String>,
    /// Shorthand for `run.gamma`.
    #[arg(long)]
    gamma: Option<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let inv = Invocation {
        config: args.config,
        preset: args.preset,
        sets: args.sets,
        out: args.out,
        threads: args.threads,
        seed_override: std::env::var("DSGD_LAB_SEED").ok(),
        topology: args.topology,
        m: args.m,
        t: args.t,
        algorithm: args.algorithm,
        gamma: args.gamma,
    };
    let outcome = run_invocation(args.command, &inv);
    for line in &outcome.lines {
        if outcome.code == 0 {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    std::process::exit(outcome.code);
}
