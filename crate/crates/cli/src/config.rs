//! Experiment configuration in the line-oriented `section.key = value`
//! format. Booleans are `true`/`false`, lists are comma-separated and `#`
//! starts a comment line.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dsgd_core::{Algorithm, Coupling};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopologyKind {
    Ring,
    Full,
    Clusters,
    Edges,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Full => "full",
            Self::Clusters => "clusters",
            Self::Edges => "edges",
        }
    }
}

impl FromStr for TopologyKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "ring" => Ok(Self::Ring),
            "full" | "fully-connected" | "complete" => Ok(Self::Full),
            "clusters" | "cluster" => Ok(Self::Clusters),
            "edges" | "edge-list" => Ok(Self::Edges),
            _ => Err(CliError::Config(format!("unknown topology `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic,
    Logistic,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::Logistic => "logistic",
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            _ => Err(CliError::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseVariant {
    None,
    Gaussian,
    Minibatch,
}

impl NoiseVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Gaussian => "gaussian",
            Self::Minibatch => "minibatch",
        }
    }
}

impl FromStr for NoiseVariant {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "none" => Ok(Self::None),
            "gaussian" => Ok(Self::Gaussian),
            "minibatch" => Ok(Self::Minibatch),
            _ => Err(CliError::Config(format!("unknown noise variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Zero,
    Optimum,
    Det,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Optimum => "optimum",
            Self::Det => "det",
        }
    }
}

impl FromStr for InitKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "zero" => Ok(Self::Zero),
            "optimum" => Ok(Self::Optimum),
            "det" => Ok(Self::Det),
            _ => Err(CliError::Config(format!("unknown init `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologySection {
    pub kind: TopologyKind,
    pub m: usize,
    pub t: f64,
    pub clusters: usize,
    pub bridge_weight: f64,
    pub edges: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    pub d: usize,
    pub spread: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub identical: bool,
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSection {
    pub variant: NoiseVariant,
    pub sigma2: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub algorithm: Algorithm,
    pub gamma: Vec<f64>,
    pub iterations: u64,
    pub replicates: usize,
    pub burn_in: Option<u64>,
    pub record_every: u64,
    pub coupling: Coupling,
    pub seed: u64,
    pub init: InitKind,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub m: Vec<usize>,
    pub topology: Vec<TopologyKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub objective: ObjectiveSection,
    pub noise: NoiseSection,
    pub run: RunSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: TopologySection {
                kind: TopologyKind::Ring,
                m: 4,
                t: 1.0 / 3.0,
                clusters: 4,
                bridge_weight: 0.1,
                edges: None,
            },
            objective: ObjectiveSection {
                kind: ObjectiveKind::Quadratic,
                d: 2,
                spread: 1.0,
                eig_min: 0.5,
                eig_max: 2.0,
                identical: false,
                n: 50,
                lambda: 0.1,
                seed: 0,
                data: None,
            },
            noise: NoiseSection {
                variant: NoiseVariant::Gaussian,
                sigma2: 1.0,
                batch: 1,
            },
            run: RunSection {
                algorithm: Algorithm::Dsgd,
                gamma: vec![1e-3],
                iterations: 10_000,
                replicates: 4,
                burn_in: None,
                record_every: 1,
                coupling: Coupling::Shared,
                seed: 0,
                init: InitKind::Zero,
                epsilon: 1e-2,
            },
            output: OutputSection {
                dir: PathBuf::from("out"),
                prefix: String::new(),
            },
            sweep: SweepSection {
                m: Vec::new(),
                topology: Vec::new(),
            },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s.trim())).collect()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Sets one `section.key` from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let (topo, obj, noise, run) = (&mut self.topology, &mut self.objective, &mut self.noise, &mut self.run);
        match key.trim() {
            "topology.kind" => topo.kind = v.parse()?,
            "topology.m" => topo.m = parse_num(key, v)?,
            "topology.t" => topo.t = parse_num(key, v)?,
            "topology.clusters" => topo.clusters = parse_num(key, v)?,
            "topology.bridge_weight" => topo.bridge_weight = parse_num(key, v)?,
            "topology.edges" => topo.edges = parse_path(v),
            "objective.kind" => obj.kind = v.parse()?,
            "objective.d" => obj.d = parse_num(key, v)?,
            "objective.spread" => obj.spread = parse_num(key, v)?,
            "objective.eig_min" => obj.eig_min = parse_num(key, v)?,
            "objective.eig_max" => obj.eig_max = parse_num(key, v)?,
            "objective.identical" => obj.identical = parse_bool(key, v)?,
            "objective.n" => obj.n = parse_num(key, v)?,
            "objective.lambda" => obj.lambda = parse_num(key, v)?,
            "objective.seed" => obj.seed = parse_num(key, v)?,
            "objective.data" => obj.data = parse_path(v),
            "noise.variant" => noise.variant = v.parse()?,
            "noise.sigma2" => noise.sigma2 = parse_num(key, v)?,
            "noise.batch" => noise.batch = parse_num(key, v)?,
            "run.algorithm" => run.algorithm = v.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))?,
            "run.gamma" => run.gamma = parse_list(key, v, parse_num)?,
            "run.iterations" => run.iterations = parse_num(key, v)?,
            "run.replicates" => run.replicates = parse_num(key, v)?,
            "run.burn_in" => run.burn_in = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "run.record_every" => run.record_every = parse_num(key, v)?,
            "run.coupling" => {
                run.coupling = match v {
                    "shared" => Coupling::Shared,
                    "independent" => Coupling::Independent,
                    _ => return Err(CliError::Config(format!("{key}: unknown coupling `{v}`"))),
                }
            }
            "run.seed" => run.seed = parse_num(key, v)?,
            "run.init" => run.init = v.parse()?,
            "run.epsilon" => run.epsilon = parse_num(key, v)?,
            "output.dir" => self.output.dir = PathBuf::from(v),
            "output.prefix" => self.output.prefix = v.to_string(),
            "sweep.m" => self.sweep.m = parse_list(key, v, parse_num)?,
            "sweep.topology" => self.sweep.topology = parse_list(key, v, |_, s| s.parse())?,
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` assignment.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected section.key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Applies every assignment of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, one per line, in a fixed order.
    pub fn serialize(&self) -> String {
        let (t, o, n, r) = (&self.topology, &self.objective, &self.noise, &self.run);
        let coupling = match r.coupling {
            Coupling::Shared => "shared",
            Coupling::Independent => "independent",
        };
        let rows: Vec<(&str, String)> = vec![
            ("topology.kind", t.kind.name().into()),
            ("topology.m", t.m.to_string()),
            ("topology.t", t.t.to_string()),
            ("topology.clusters", t.clusters.to_string()),
            ("topology.bridge_weight", t.bridge_weight.to_string()),
            ("topology.edges", path_str(&t.edges)),
            ("objective.kind", o.kind.name().into()),
            ("objective.d", o.d.to_string()),
            ("objective.spread", o.spread.to_string()),
            ("objective.eig_min", o.eig_min.to_string()),
            ("objective.eig_max", o.eig_max.to_string()),
            ("objective.identical", o.identical.to_string()),
            ("objective.n", o.n.to_string()),
            ("objective.lambda", o.lambda.to_string()),
            ("objective.seed", o.seed.to_string()),
            ("objective.data", path_str(&o.data)),
            ("noise.variant", n.variant.name().into()),
            ("noise.sigma2", n.sigma2.to_string()),
            ("noise.batch", n.batch.to_string()),
            ("run.algorithm", r.algorithm.name().into()),
            ("run.gamma", join(&r.gamma, |g| g.to_string())),
            ("run.iterations", r.iterations.to_string()),
            ("run.replicates", r.replicates.to_string()),
            ("run.burn_in", r.burn_in.map_or("auto".into(), |b| b.to_string())),
            ("run.record_every", r.record_every.to_string()),
            ("run.coupling", coupling.into()),
            ("run.seed", r.seed.to_string()),
            ("run.init", r.init.name().into()),
            ("run.epsilon", r.epsilon.to_string()),
            ("output.dir", self.output.dir.display().to_string()),
            ("output.prefix", self.output.prefix.clone()),
            ("sweep.m", join(&self.sweep.m, |m| m.to_string())),
            ("sweep.topology", join(&self.sweep.topology, |k| k.name().to_string())),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Range checks that can be made before building anything.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let (t, o, n, r) = (&self.topology, &self.objective, &self.noise, &self.run);
        if t.m == 0 {
            return bad("topology.m must be at least 1".into());
        }
        if t.kind == TopologyKind::Edges && t.edges.is_none() {
            return bad("topology.kind = edges needs topology.edges".into());
        }
        if let Some(p) = t.edges.as_ref().filter(|_| t.kind == TopologyKind::Edges) {
            if !p.exists() {
                return bad(format!("edge list {} does not exist", p.display()));
            }
        }
        if let Some(p) = &o.data {
            if !p.exists() {
                return bad(format!("dataset {} does not exist", p.display()));
            }
        }
        if o.d == 0 {
            return bad("objective.d must be at least 1".into());
        }
        if o.kind == ObjectiveKind::Logistic && (o.n == 0 || !(o.lambda > 0.0)) {
            return bad("logistic objectives need objective.n ≥ 1 and objective.lambda > 0".into());
        }
        if o.kind == ObjectiveKind::Quadratic && !(o.eig_min > 0.0 && o.eig_max >= o.eig_min) {
            return bad("quadratic objectives need 0 < objective.eig_min ≤ objective.eig_max".into());
        }
        if !(n.sigma2 >= 0.0) {
            return bad("noise.sigma2 must be nonnegative".into());
        }
        if n.variant == NoiseVariant::Minibatch && o.kind != ObjectiveKind::Logistic {
            return bad("minibatch noise needs a logistic objective".into());
        }
        if r.gamma.is_empty() {
            return bad("run.gamma is empty".into());
        }
        if let Some(g) = r.gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return bad(format!("run.gamma entries must be positive, got {g}"));
        }
        if r.replicates == 0 || r.record_every == 0 {
            return bad("run.replicates and run.record_every must be at least 1".into());
        }
        if let Some(b) = r.burn_in {
            if r.iterations > 0 && b >= r.iterations {
                return bad(format!("run.burn_in {b} must be below run.iterations {}", r.iterations));
            }
        }
        if r.algorithm.is_stochastic() && n.variant == NoiseVariant::None {
            return bad(format!("{} needs a noise variant other than none", r.algorithm.name()));
        }
        if !(r.epsilon > 0.0) {
            return bad("run.epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output.dir.join(format!("{}{name}", self.output.prefix))
    }
}

/// Named starting configurations. The logistic presets use d = 2,
/// γ = 1e-3, 20 replicates and a horizon long enough that
/// `(1 − γμ)^T ≤ 1e-3`.
pub const PRESETS: [&str; 5] = ["fig1-rr-det", "fig1-rr-sto", "fig2-heterogeneous", "fig2-homogeneous", "quad-ring"];

fn horizon(gamma: f64, mu: f64) -> u64 {
    (1e-3f64.ln() / (1.0 - gamma * mu).ln()).ceil() as u64
}

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let mut c = ExperimentConfig::default();
    let logistic = |c: &mut ExperimentConfig, spread: f64| {
        c.topology.kind = TopologyKind::Clusters;
        c.topology.m = 12;
        c.topology.clusters = 4;
        c.topology.t = 1.0 / 3.0;
        c.topology.bridge_weight = 0.1;
        c.objective.kind = ObjectiveKind::Logistic;
        c.objective.d = 2;
        c.objective.n = 50;
        c.objective.lambda = 0.1;
        c.objective.spread = spread;
        c.noise.variant = NoiseVariant::Minibatch;
        c.noise.batch = 1;
        c.run.gamma = vec![1e-3];
        c.run.iterations = horizon(1e-3, 0.1);
        c.run.replicates = 20;
        c.run.record_every = 100;
        c.run.init = InitKind::Zero;
    };
    match name {
        "fig1-rr-det" => {
            logistic(&mut c, 2.0);
            c.run.algorithm = Algorithm::RrDgd;
            c.noise.variant = NoiseVariant::None;
            c.run.replicates = 1;
        }
        "fig1-rr-sto" => {
            logistic(&mut c, 2.0);
            c.run.algorithm = Algorithm::RrDsgd;
        }
        "fig2-heterogeneous" => {
            logistic(&mut c, 2.0);
            c.run.algorithm = Algorithm::Dsgd;
        }
        "fig2-homogeneous" => {
            logistic(&mut c, 0.0);
            c.run.algorithm = Algorithm::Dsgd;
        }
        "quad-ring" => {
            c.topology.kind = TopologyKind::Ring;
            c.topology.m = 4;
            c.topology.t = 0.25;
            c.objective.kind = ObjectiveKind::Quadratic;
            c.objective.d = 2;
            c.objective.spread = 1.0;
            c.noise.variant = NoiseVariant::Gaussian;
            c.noise.sigma2 = 1.0;
            c.run.algorithm = Algorithm::Dsgd;
            c.run.gamma = vec![1e-2];
            c.run.iterations = 20_000;
            c.run.replicates = 8;
            c.run.record_every = 10;
        }
        _ => {
            return Err(CliError::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(c)
}
