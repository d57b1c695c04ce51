//! The five subcommands. Each writes its CSV files under the configured
//! output directory and returns the lines to print plus the exit code.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dsgd_core::dynamics::{fixed_point, run, FixedPointOptions, TRACE_HEADER};
use dsgd_core::io::fmt_f64;
use dsgd_core::stats::{order_fit, stationary_moments, SpeedupReport, SpeedupStatus};
use dsgd_core::theory::{
    det_bias_bound, det_bias_expansion, quad_exact_fixed_point, rr_bias_bound, stochastic_bias_first_order,
    variance_first_order,
};
use dsgd_core::{Algorithm, LabError, Matrix, RunConfig, StackedPoint, StationaryMoments, TheoryReport};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TopologyKind};
use crate::error::CliError;
use crate::problem::{build, build_cell, initial_point, Problem};

/// Largest sweep grid accepted.
pub const MAX_SWEEP_CELLS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GraphInfo,
    Simulate,
    Predict,
    Compare,
    Sweep,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn write(&mut self, path: PathBuf, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        write_table(&path, header, rows)?;
        self.files.push(path);
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    create_parent(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Compact console rendering of a float.
fn show(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    if (1e-3..1e6).contains(&v.abs()) {
        let s = format!("{v:.10}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.6e}")
    }
}

pub fn execute(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    match cmd {
        Command::GraphInfo => graph_info(cfg),
        Command::Simulate => simulate(cfg),
        Command::Predict => predict(cfg),
        Command::Compare => compare(cfg),
        Command::Sweep => sweep(cfg),
    }
}

fn single_gamma(cfg: &ExperimentConfig) -> Result<f64, CliError> {
    match cfg.run.gamma.as_slice() {
        [g] => Ok(*g),
        _ => Err(CliError::Config(format!(
            "this command takes a single step size, run.gamma has {}",
            cfg.run.gamma.len()
        ))),
    }
}

fn run_config(cfg: &ExperimentConfig, algorithm: Algorithm, gamma: f64) -> RunConfig {
    let r = &cfg.run;
    RunConfig {
        algorithm,
        gamma,
        iterations: r.iterations,
        seed: r.seed,
        replicates: r.replicates,
        burn_in: r.burn_in,
        record_every: r.record_every,
        coupling: r.coupling,
    }
}

fn graph_info(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let w = crate::problem::build_topology(cfg, cfg.topology.kind, cfg.topology.m)?;
    let p = w.spectral_profile();
    let mut out = Outcome::default();
    let values = [
        ("m", w.m() as f64),
        ("lambda2", p.lambda2),
        ("lambda_min", p.lambda_min),
        ("rho", p.rho),
        ("big_lambda", p.big_lambda),
        ("gap", p.gap),
    ];
    for (k, v) in values {
        out.lines.push(format!("{k} = {}", show(v)));
    }
    let header: Vec<&str> = values.iter().map(|(k, _)| *k).collect();
    let row = vec![
        w.m().to_string(),
        fmt_f64(p.lambda2),
        fmt_f64(p.lambda_min),
        fmt_f64(p.rho),
        fmt_f64(p.big_lambda),
        fmt_f64(p.gap),
    ];
    out.write(cfg.output_path("graph_info.csv"), &header, &[row])?;
    Ok(out)
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let gamma = single_gamma(cfg)?;
    let p = build(cfg)?;
    let det = fixed_point(&p.w, &p.obj, gamma, FixedPointOptions::default())?.theta;
    let theta0 = initial_point(cfg, &p, gamma)?;
    let rc = run_config(cfg, cfg.run.algorithm, gamma);
    let rec = run(&p.w, &p.obj, p.noise.as_ref(), &rc, &theta0, Some(&det))?;
    let mut out = Outcome::default();
    let empty = cfg.run.iterations == 0;
    for rep in &rec.replicates {
        let rows: Vec<Vec<String>> = if empty {
            Vec::new()
        } else {
            rep.rows
                .iter()
                .map(|r| {
                    vec![
                        r.t.to_string(),
                        r.replicate.to_string(),
                        fmt_f64(r.dist_opt),
                        fmt_f64(r.dist_det),
                        fmt_f64(r.consensus_err),
                        fmt_f64(r.disagreement_norm),
                    ]
                })
                .collect()
        };
        out.write(cfg.output_path(&format!("trace_rep{:03}.csv", rep.replicate)), &TRACE_HEADER, &rows)?;
    }
    let agg: Vec<Vec<String>> = if empty {
        Vec::new()
    } else {
        rec.aggregate()
            .into_iter()
            .map(|(t, mean, std)| vec![t.to_string(), fmt_f64(mean), fmt_f64(std)])
            .collect()
    };
    out.write(cfg.output_path("aggregate.csv"), &["t", "mean", "std"], &agg)?;
    if rc.algorithm.is_stochastic() && !empty {
        match stationary_moments(&rec, &det) {
            Ok(mom) => {
                let path = cfg.output_path("moments.csv");
                create_parent(&path)?;
                mom.write_csv(BufWriter::new(File::create(&path)?))?;
                out.files.push(path);
            }
            Err(LabError::InsufficientSamples { have, need }) => {
                out.lines.push(format!("moments skipped: {have} samples past burn-in, need {need}"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let cfg_path = cfg.output_path("config.txt");
    create_parent(&cfg_path)?;
    fs::write(&cfg_path, cfg.serialize())?;
    out.files.push(cfg_path);
    if let Some(last) = rec.aggregate().last() {
        out.lines.push(format!(
            "{} γ = {gamma}: t = {}, mean client distance {} ± {}",
            rc.algorithm.name(),
            last.0,
            show(last.1),
            show(last.2)
        ));
    }
    Ok(out)
}

fn predict(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let gamma = single_gamma(cfg)?;
    let p = build(cfg)?;
    let theta0 = initial_point(cfg, &p, gamma)?;
    let report = TheoryReport::build(
        &p.w,
        &p.obj,
        p.noise.as_ref(),
        gamma,
        &theta0,
        cfg.run.iterations,
        cfg.run.epsilon,
    )?;
    let mut out = Outcome::default();
    let path = cfg.output_path("predict.csv");
    create_parent(&path)?;
    report.write_csv(BufWriter::new(File::create(&path)?))?;
    out.files.push(path);
    for (q, v) in report.scalar_rows() {
        out.lines.push(format!("{q} = {}", show(v)));
    }
    for (cond, limit) in &report.violations {
        out.lines.push(format!("step size too large: requires {cond} (γ = {gamma}, limit = {limit})"));
        out.code = 2;
    }
    Ok(out)
}

fn step_range<T>(r: dsgd_core::Result<T>) -> Result<Option<T>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LabError::StepTooLarge { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Deterministic quantities at one step size.
struct DetMetrics {
    bias: f64,
    bias_bound: Option<f64>,
    expansion_error: Option<f64>,
    expansion_bound: Option<f64>,
    first_order_norm: Option<f64>,
    closed_form_gap: Option<f64>,
    closed_form_scale: f64,
    rr_error: f64,
    rr_bound: Option<f64>,
}

fn det_metrics(p: &Problem, gamma: f64) -> Result<(DetMetrics, StackedPoint), CliError> {
    let star = p.obj.stacked_optimum();
    let opts = FixedPointOptions::default();
    let det = fixed_point(&p.w, &p.obj, gamma, opts)?.theta;
    let half = fixed_point(&p.w, &p.obj, 0.5 * gamma, opts)?.theta;
    let rr = half.scale(2.0).sub(&det);
    let expansion = step_range(det_bias_expansion(&p.w, &p.obj, gamma))?;
    let closed = if p.obj.is_quadratic() {
        step_range(quad_exact_fixed_point(&p.w, &p.obj, gamma))?
    } else {
        None
    };
    let m = DetMetrics {
        bias: det.distance(&star),
        bias_bound: step_range(det_bias_bound(&p.obj, &p.w, gamma))?,
        expansion_error: expansion.as_ref().map(|e| det.distance(&e.prediction)),
        expansion_bound: expansion.as_ref().map(|e| e.residual_bound),
        first_order_norm: expansion.as_ref().map(|e| gamma * e.first_order.norm()),
        closed_form_gap: closed.map(|q| q.theta.distance(&det)),
        closed_form_scale: 1.0 + det.norm(),
        rr_error: rr.distance(&star),
        rr_bound: step_range(rr_bias_bound(&p.obj, &p.w, gamma))?,
    };
    Ok((m, det))
}

/// Stationary DSGD statistics at one step size, started from Θ_det.
struct StationaryMetrics {
    moments: StationaryMoments,
    det: StackedPoint,
    trace: f64,
    trace_se: f64,
    predicted_block: Matrix,
    predicted_shift: Vec<f64>,
}

fn stationary_metrics(
    cfg: &ExperimentConfig,
    p: &Problem,
    gamma: f64,
    det: &StackedPoint,
) -> Result<Option<StationaryMetrics>, CliError> {
    let Some(noise) = p.noise.as_ref().filter(|nm| !nm.is_degenerate(&p.obj)) else {
        return Ok(None);
    };
    let mut rc = run_config(cfg, Algorithm::Dsgd, gamma);
    rc.record_every = rc.iterations.max(1);
    let rec = run(&p.w, &p.obj, Some(noise), &rc, det, Some(det))?;
    let moments = stationary_moments(&rec, det)?;
    let (trace, trace_se) = moments.mean_diagonal_trace();
    Ok(Some(StationaryMetrics {
        moments,
        det: det.clone(),
        trace,
        trace_se,
        predicted_block: variance_first_order(&p.obj, noise, gamma)?,
        predicted_shift: stochastic_bias_first_order(&p.obj, noise, gamma)?,
    }))
}

impl StationaryMetrics {
    /// Block mean of `Θ_sto − Θ_det` and a conservative standard error per
    /// coordinate (mean of the per-block standard errors).
    fn mean_shift(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, d) = (self.moments.m, self.moments.d);
        let diff = self.moments.mean.sub(&self.det).block_mean();
        let se = (0..d)
            .map(|i| (0..m).map(|k| self.moments.mean_stderr[k * d + i]).sum::<f64>() / m as f64)
            .collect();
        (diff, se)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::Skip => "skip",
        }
    }
}

/// One compare row. Bound claims pass when `observed ≤ predicted +
/// tolerance`, the others when `|observed − predicted| ≤ tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Claim {
    pub id: String,
    pub gamma: f64,
    pub predicted: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub hard: bool,
}

impl Claim {
    fn bound(id: &str, gamma: f64, bound: Option<f64>, observed: f64, hard: bool) -> Self {
        let (predicted, tolerance, verdict) = match bound {
            Some(b) => {
                let tol = 1e-9 * b.abs() + 1e-14;
                let v = if observed <= b + tol { Verdict::Pass } else { Verdict::Fail };
                (b, tol, v)
            }
            None => (f64::NAN, f64::NAN, Verdict::Skip),
        };
        Self {
            id: id.into(),
            gamma,
            predicted,
            observed,
            tolerance,
            verdict,
            hard,
        }
    }

    fn matches(id: String, gamma: f64, predicted: f64, observed: f64, tolerance: f64, hard: bool) -> Self {
        let verdict = if (observed - predicted).abs() <= tolerance {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            id,
            gamma,
            predicted,
            observed,
            tolerance,
            verdict,
            hard,
        }
    }

    fn skipped(id: &str, gamma: f64, hard: bool) -> Self {
        Self {
            id: id.into(),
            gamma,
            predicted: f64::NAN,
            observed: f64::NAN,
            tolerance: f64::NAN,
            verdict: Verdict::Skip,
            hard,
        }
    }

    fn row(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            fmt_f64(self.gamma),
            fmt_f64(self.predicted),
            fmt_f64(self.observed),
            fmt_f64(self.tolerance),
            self.verdict.name().into(),
            self.hard.to_string(),
        ]
    }
}

pub const COMPARE_HEADER: [&str; 7] = ["claim", "gamma", "predicted", "observed", "tolerance", "status", "hard"];

fn order_claim(id: &str, gammas: &[f64], values: &[f64], target: f64, half_width: f64, floor: f64) -> Claim {
    let g0 = gammas[0];
    if values.iter().all(|&v| v <= floor) {
        return Claim::skipped(id, g0, true);
    }
    match order_fit(gammas, values) {
        Ok(fit) => Claim::matches(id.into(), g0, target, fit.slope, half_width, true),
        Err(_) => Claim::skipped(id, g0, true),
    }
}

/// All claims for `cfg`. Deterministic claims are evaluated at every step
/// size of the grid, stochastic ones at the first.
pub fn compare_claims(cfg: &ExperimentConfig) -> Result<Vec<Claim>, CliError> {
    let p = build(cfg)?;
    let gammas = &cfg.run.gamma;
    let per_gamma = gammas
        .iter()
        .map(|&g| det_metrics(&p, g))
        .collect::<Result<Vec<_>, _>>()?;
    let mut claims = Vec::new();
    for (&g, (dm, _)) in gammas.iter().zip(&per_gamma) {
        claims.push(Claim::bound("DET_BIAS_BOUND", g, dm.bias_bound, dm.bias, true));
        claims.push(Claim::bound(
            "DET_EXPANSION",
            g,
            dm.expansion_bound,
            dm.expansion_error.unwrap_or(f64::NAN),
            true,
        ));
        if p.obj.is_quadratic() {
            claims.push(match dm.closed_form_gap {
                Some(gap) => Claim::matches("QUAD_FIXED_POINT".into(), g, 0.0, gap, 1e-9 * dm.closed_form_scale, true),
                None => Claim::skipped("QUAD_FIXED_POINT", g, true),
            });
        }
        claims.push(Claim::bound("RR_BIAS_BOUND", g, dm.rr_bound, dm.rr_error, true));
    }
    let distinct = {
        let mut v = gammas.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct >= 3 {
        let floor = 1e-13 * (1.0 + p.obj.stacked_optimum().norm());
        let bias: Vec<f64> = per_gamma.iter().map(|(d, _)| d.bias).collect();
        let rr: Vec<f64> = per_gamma.iter().map(|(d, _)| d.rr_error).collect();
        claims.push(order_claim("BIAS_ORDER1", gammas, &bias, 1.0, 0.05, floor));
        claims.push(order_claim("RR_ORDER2", gammas, &rr, 2.0, 0.2, floor));
    }
    let g = gammas[0];
    if let Some(sm) = stationary_metrics(cfg, &p, g, &per_gamma[0].1)? {
        claims.extend(stationary_claims(&sm, g, p.obj.is_quadratic()));
    }
    Ok(claims)
}

fn stationary_claims(sm: &StationaryMetrics, g: f64, quadratic: bool) -> Vec<Claim> {
    let mut claims = Vec::new();
    let mom = &sm.moments;
    if quadratic {
        // no stochastic bias: every coordinate of Θ_sto within 4σ of Θ_det
        let worst = mom
            .mean
            .as_slice()
            .iter()
            .zip(sm.det.as_slice())
            .zip(&mom.mean_stderr)
            .map(|((a, b), se)| (a - b).abs() / se)
            .fold(0.0, f64::max);
        claims.push(Claim::matches("STO_MEAN_UNBIASED".into(), g, 0.0, worst, 4.0, true));
    } else {
        let (shift, se) = sm.mean_shift();
        for (i, ((o, p), s)) in shift.iter().zip(&sm.predicted_shift).zip(&se).enumerate() {
            claims.push(Claim::matches(format!("STO_BIAS_FIRST_ORDER[{i}]"), g, *p, *o, 4.0 * s, false));
        }
    }
    let pred_trace = sm.predicted_block.trace();
    claims.push(Claim::matches(
        "VARIANCE_TRACE".into(),
        g,
        pred_trace,
        sm.trace,
        4.0 * sm.trace_se,
        false,
    ));
    for k in 0..mom.m {
        for l in 0..mom.m {
            let block = mom.block(k, l);
            let se: f64 = mom.block_stderr(k, l).diag().iter().sum();
            claims.push(Claim::matches(
                format!("VARIANCE_BLOCK[{k},{l}]"),
                g,
                pred_trace,
                block.trace(),
                4.0 * se,
                false,
            ));
        }
    }
    claims
}

fn compare(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let claims = compare_claims(cfg)?;
    let mut out = Outcome::default();
    let rows: Vec<Vec<String>> = claims.iter().map(Claim::row).collect();
    out.write(cfg.output_path("compare.csv"), &COMPARE_HEADER, &rows)?;
    for c in &claims {
        out.lines.push(format!(
            "{:<4} {} γ = {}: observed {} predicted {} (tolerance {}){}",
            c.verdict.name().to_uppercase(),
            c.id,
            show(c.gamma),
            show(c.observed),
            show(c.predicted),
            show(c.tolerance),
            if c.hard { "" } else { " [soft]" }
        ));
    }
    if claims.iter().any(|c| c.hard && c.verdict == Verdict::Fail) {
        out.code = 2;
    }
    Ok(out)
}

/// One row of the long-format sweep table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub topology: TopologyKind,
    pub m: usize,
    pub gamma: f64,
    pub metric: &'static str,
    pub observed: f64,
    pub predicted: f64,
    pub stderr: f64,
}

pub const SWEEP_HEADER: [&str; 7] = ["topology", "m", "gamma", "metric", "observed", "predicted", "stderr"];

fn sweep_cell(cfg: &ExperimentConfig, kind: TopologyKind, m: usize, gamma: f64) -> Result<Vec<SweepRow>, CliError> {
    let p = build_cell(cfg, kind, m)?;
    let (dm, det) = det_metrics(&p, gamma)?;
    let row = |metric, observed, predicted: Option<f64>, stderr| SweepRow {
        topology: kind,
        m,
        gamma,
        metric,
        observed,
        predicted: predicted.unwrap_or(f64::NAN),
        stderr,
    };
    let mut rows = vec![
        row("bias_norm", dm.bias, dm.first_order_norm, f64::NAN),
        row("rr_bias_norm", dm.rr_error, dm.rr_bound, f64::NAN),
    ];
    if let Some(sm) = stationary_metrics(cfg, &p, gamma, &det)? {
        rows.push(row(
            "stationary_trace",
            sm.trace,
            Some(sm.predicted_block.trace()),
            sm.trace_se,
        ));
        let (shift, se) = sm.mean_shift();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(row(
            "stochastic_shift_norm",
            norm(&shift),
            Some(norm(&sm.predicted_shift)),
            norm(&se),
        ));
    }
    Ok(rows)
}

/// Cells of the sweep grid in output order.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<(TopologyKind, usize, f64)>, CliError> {
    let ms = if cfg.sweep.m.is_empty() { vec![cfg.topology.m] } else { cfg.sweep.m.clone() };
    let kinds = if cfg.sweep.topology.is_empty() {
        vec![cfg.topology.kind]
    } else {
        cfg.sweep.topology.clone()
    };
    let count = ms.len() * kinds.len() * cfg.run.gamma.len();
    if count > MAX_SWEEP_CELLS {
        return Err(CliError::BudgetExceeded {
            cells: count,
            limit: MAX_SWEEP_CELLS,
        });
    }
    let mut cells = Vec::with_capacity(count);
    for &k in &kinds {
        for &g in &cfg.run.gamma {
            for &m in &ms {
                cells.push((k, m, g));
            }
        }
    }
    Ok(cells)
}

pub fn sweep_rows(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let cells = sweep_cells(cfg)?;
    let per_cell = cells
        .par_iter()
        .map(|&(k, m, g)| sweep_cell(cfg, k, m, g))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

fn sweep(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rows = sweep_rows(cfg)?;
    let mut out = Outcome::default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.topology.name().into(),
                r.m.to_string(),
                fmt_f64(r.gamma),
                r.metric.into(),
                fmt_f64(r.observed),
                fmt_f64(r.predicted),
                fmt_f64(r.stderr),
            ]
        })
        .collect();
    out.write(cfg.output_path("sweep.csv"), &SWEEP_HEADER, &table)?;

    // speed-up fits over m for every (topology, γ) group
    let mut groups: Vec<(TopologyKind, f64, Vec<(usize, f64, f64)>)> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "stationary_trace") {
        match groups.iter_mut().find(|(k, g, _)| *k == r.topology && *g == r.gamma) {
            Some(grp) => grp.2.push((r.m, r.observed, r.stderr)),
            None => groups.push((r.topology, r.gamma, vec![(r.m, r.observed, r.stderr)])),
        }
    }
    let mut speed = Vec::new();
    for (k, g, pts) in groups {
        if pts.len() < 3 {
            continue;
        }
        let report = SpeedupReport::from_rows(pts)?;
        let (slope, intercept, r2) = report.fit.map_or((f64::NAN, f64::NAN, f64::NAN), |f| (f.slope, f.intercept, f.r2));
        let status = match report.status {
            SpeedupStatus::Fitted => "fitted",
            SpeedupStatus::SkippedZeroNoise => "skipped_zero_noise",
        };
        out.lines.push(format!("speed-up {} γ = {}: slope {} ({status})", k.name(), show(g), show(slope)));
        speed.push(vec![
            k.name().into(),
            fmt_f64(g),
            fmt_f64(slope),
            fmt_f64(intercept),
            fmt_f64(r2),
            status.into(),
        ]);
    }
    if !speed.is_empty() {
        out.write(
            cfg.output_path("sweep_speedup.csv"),
            &["topology", "gamma", "slope", "intercept", "r2", "status"],
            &speed,
        )?;
    }
    out.lines.push(format!("{} rows written", rows.len()));
    Ok(out)
}
