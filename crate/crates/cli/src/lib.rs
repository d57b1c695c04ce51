//! Command-line front end: config handling, presets and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod problem;

use std::path::PathBuf;

pub use commands::{execute, Command, Outcome};
pub use config::{preset, ExperimentConfig};
pub use error::CliError;

/// Everything given on the command line, before resolution.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub sets: Vec<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Value of `DSGD_LAB_SEED`, if set.
    pub seed_override: Option<String>,
    pub topology: Option<String>,
    pub m: Option<usize>,
    pub t: Option<f64>,
    pub algorithm: Option<String>,
    pub gamma: Option<String>,
}

/// Preset, then config file, then shorthand flags and `--set`, then the
/// seed override and `--out`.
pub fn resolve_config(inv: &Invocation) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &inv.preset {
        Some(name) => preset(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &inv.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = &inv.topology {
        cfg.set("topology.kind", v)?;
    }
    if let Some(v) = inv.m {
        cfg.topology.m = v;
    }
    if let Some(v) = inv.t {
        cfg.topology.t = v;
    }
    if let Some(v) = &inv.algorithm {
        cfg.set("run.algorithm", v)?;
    }
    if let Some(v) = &inv.gamma {
        cfg.set("run.gamma", v)?;
    }
    for s in &inv.sets {
        cfg.apply_assignment(s)?;
    }
    if let Some(seed) = &inv.seed_override {
        cfg.set("run.seed", seed)
            .map_err(|_| CliError::Config(format!("DSGD_LAB_SEED must be an integer, got `{seed}`")))?;
    }
    if let Some(out) = &inv.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

/// Resolves the config and runs `cmd` on a pool of `inv.threads` workers.
/// Errors are folded into the outcome with their exit code.
pub fn run_invocation(cmd: Command, inv: &Invocation) -> Outcome {
    let result = resolve_config(inv).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = inv.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
        pool.install(|| execute(cmd, &cfg))
    });
    result.unwrap_or_else(|e| Outcome {
        code: e.exit_code(),
        lines: vec![format!("error: {e}")],
        files: Vec::new(),
    })
}
