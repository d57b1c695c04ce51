//! Builds the gossip matrix, objectives and noise model described by a config.

use std::fs::File;
use std::io::BufReader;

use dsgd_core::dynamics::{fixed_point, FixedPointOptions};
use dsgd_core::objectives::{generate_logistic_problem, generate_quadratic_problem};
use dsgd_core::{CommMatrix, NoiseModel, ObjectiveSet, StackedPoint};

use crate::config::{ExperimentConfig, InitKind, NoiseVariant, ObjectiveKind, TopologyKind};
use crate::error::CliError;

pub struct Problem {
    pub w: CommMatrix,
    pub obj: ObjectiveSet,
    pub noise: Option<NoiseModel>,
}

pub fn build_topology(cfg: &ExperimentConfig, kind: TopologyKind, m: usize) -> Result<CommMatrix, CliError> {
    let t = &cfg.topology;
    let w = match kind {
        TopologyKind::Full => CommMatrix::fully_connected(m)?,
        TopologyKind::Ring => CommMatrix::ring(m, t.t)?,
        TopologyKind::Clusters => CommMatrix::clusters(m, t.clusters, t.t, t.bridge_weight)?,
        TopologyKind::Edges => {
            let path = t
                .edges
                .as_ref()
                .ok_or_else(|| CliError::Config("topology.edges is not set".into()))?;
            let text = std::fs::read_to_string(path)?;
            CommMatrix::from_edge_list(&text, Some(m), t.t)?
        }
    };
    Ok(w)
}

pub fn build_objective(cfg: &ExperimentConfig, m: usize) -> Result<ObjectiveSet, CliError> {
    let o = &cfg.objective;
    let obj = match (o.kind, &o.data) {
        (ObjectiveKind::Logistic, Some(path)) => {
            let obj = ObjectiveSet::read_dataset_csv(BufReader::new(File::open(path)?), o.lambda)?;
            if obj.m() != m {
                return Err(CliError::Config(format!(
                    "dataset has {} clients but topology.m = {m}",
                    obj.m()
                )));
            }
            obj
        }
        (ObjectiveKind::Logistic, None) => generate_logistic_problem(m, o.n, o.d, o.spread, o.lambda, o.seed)?,
        (ObjectiveKind::Quadratic, _) => {
            generate_quadratic_problem(m, o.d, o.spread, o.eig_min, o.eig_max, o.identical, o.seed)?
        }
    };
    Ok(obj)
}

pub fn build_noise(cfg: &ExperimentConfig, obj: &ObjectiveSet) -> Result<Option<NoiseModel>, CliError> {
    let n = &cfg.noise;
    let model = match n.variant {
        NoiseVariant::None => None,
        NoiseVariant::Gaussian => Some(NoiseModel::isotropic(obj.m(), obj.d(), n.sigma2)?),
        NoiseVariant::Minibatch => Some(NoiseModel::minibatch(n.batch)?),
    };
    if let Some(nm) = &model {
        nm.check(obj)?;
    }
    Ok(model)
}

/// The problem for one sweep cell.
pub fn build_cell(cfg: &ExperimentConfig, kind: TopologyKind, m: usize) -> Result<Problem, CliError> {
    let w = build_topology(cfg, kind, m)?;
    let obj = build_objective(cfg, m)?;
    let noise = build_noise(cfg, &obj)?;
    Ok(Problem { w, obj, noise })
}

pub fn build(cfg: &ExperimentConfig) -> Result<Problem, CliError> {
    build_cell(cfg, cfg.topology.kind, cfg.topology.m)
}

pub fn initial_point(cfg: &ExperimentConfig, p: &Problem, gamma: f64) -> Result<StackedPoint, CliError> {
    Ok(match cfg.run.init {
        InitKind::Zero => StackedPoint::zeros(p.obj.m(), p.obj.d()),
        InitKind::Optimum => p.obj.stacked_optimum(),
        InitKind::Det => fixed_point(&p.w, &p.obj, gamma, FixedPointOptions::default())?.theta,
    })
}
