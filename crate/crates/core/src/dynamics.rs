//! Iteration engines: DGD and DSGD in Adapt-then-Combine order, fixed-point
//! solving, synchronously coupled chains and Richardson–Romberg pairs.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::io::fmt_f64;
use crate::matops::{Lu, Matrix};
use crate::noise::{NoiseModel, NoiseScratch};
use crate::objectives::ObjectiveSet;
use crate::rng::StreamKey;
use crate::stacked::StackedPoint;
use crate::topology::CommMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Dgd,
    Dsgd,
    RrDgd,
    RrDsgd,
}

impl Algorithm {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::Dsgd | Self::RrDsgd)
    }

    pub fn is_rr(self) -> bool {
        matches!(self, Self::RrDgd | Self::RrDsgd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dgd => "dgd",
            Self::Dsgd => "dsgd",
            Self::RrDgd => "rr-dgd",
            Self::RrDsgd => "rr-dsgd",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "dgd" => Ok(Self::Dgd),
            "dsgd" => Ok(Self::Dsgd),
            "rr-dgd" => Ok(Self::RrDgd),
            "rr-dsgd" => Ok(Self::RrDsgd),
            other => Err(LabError::Parse(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How the two RR chains draw their noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Coupling {
    #[default]
    Shared,
    Independent,
}

impl std::str::FromStr for Coupling {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shared" | "shared-noise" | "sharednoise" => Ok(Self::Shared),
            "independent" => Ok(Self::Independent),
            other => Err(LabError::Parse(format!("unknown coupling {other:?}"))),
        }
    }
}

impl Coupling {
    pub fn name(self) -> &'static str {
        match self {
            Self::Shared => "shared",
            Self::Independent => "independent",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub iterations: u64,
    pub seed: u64,
    pub replicates: usize,
    /// Steps discarded before accumulating stationary moments; `None` picks
    /// [`default_burn_in`].
    pub burn_in: Option<u64>,
    pub record_every: u64,
    pub coupling: Coupling,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, gamma: f64, iterations: u64) -> Self {
        Self {
            algorithm,
            gamma,
            iterations,
            seed: 0,
            replicates: 1,
            burn_in: None,
            record_every: 1,
            coupling: Coupling::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(LabError::InvalidStep(format!("γ must be positive, got {}", self.gamma)));
        }
        if self.replicates == 0 {
            return Err(LabError::InvalidParam("replicates must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(LabError::InvalidParam("record_every must be at least 1".into()));
        }
        if let Some(b) = self.burn_in {
            if self.iterations > 0 && b >= self.iterations {
                return Err(LabError::InvalidParam(format!(
                    "burn_in {b} must be below the horizon {}",
                    self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Burn-in actually used for moment accumulation.
    pub fn effective_burn_in(&self, mu: f64) -> u64 {
        match self.burn_in {
            Some(b) => b,
            None => {
                let b = default_burn_in(self.gamma, mu);
                if self.iterations > 0 && b >= self.iterations {
                    log::warn!(
                        "default burn-in {b} exceeds the horizon {}; using half the horizon",
                        self.iterations
                    );
                    self.iterations / 2
                } else {
                    b
                }
            }
        }
    }
}

/// `ceil(ln 1e-6 / ln(1 − γμ))`, the number of steps for the deterministic
/// transient to shrink by 10⁻⁶.
pub fn default_burn_in(gamma: f64, mu: f64) -> u64 {
    let q = 1.0 - gamma * mu;
    if q <= 0.0 {
        return 1;
    }
    if q >= 1.0 {
        return u64::MAX;
    }
    (1e-6f64.ln() / q.ln()).ceil() as u64
}

/// Working buffers for one chain.
#[derive(Clone, Debug)]
pub struct Workspace {
    grad: Vec<f64>,
    noise: Vec<f64>,
    tmp: Vec<f64>,
    scratch: NoiseScratch,
}

impl Workspace {
    pub fn new(m: usize, d: usize) -> Self {
        Self {
            grad: vec![0.0; m * d],
            noise: vec![0.0; m * d],
            tmp: vec![0.0; m * d],
            scratch: NoiseScratch::new(d),
        }
    }
}

/// One Adapt-then-Combine update `W(Θ − γ(∇F(Θ) + E))` into `out`. The noise
/// draw at step index `t` comes from `noise` when given.
pub fn step_into(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: Option<(&NoiseModel, &StreamKey)>,
    gamma: f64,
    theta: &[f64],
    t: u64,
    out: &mut [f64],
    ws: &mut Workspace,
) {
    obj.grad_stacked_into(theta, &mut ws.grad);
    if let Some((model, key)) = noise {
        model.sample_into(obj, theta, key, t, &mut ws.noise, &mut ws.scratch);
        for (((x, th), g), e) in ws.tmp.iter_mut().zip(theta).zip(&ws.grad).zip(&ws.noise) {
            *x = th - gamma * (g + e);
        }
    } else {
        for ((x, th), g) in ws.tmp.iter_mut().zip(theta).zip(&ws.grad) {
            *x = th - gamma * g;
        }
    }
    w.apply_into(&ws.tmp, obj.d(), out);
}

fn check_shapes(w: &CommMatrix, obj: &ObjectiveSet, theta: &StackedPoint) -> Result<()> {
    if w.m() != obj.m() || theta.m() != obj.m() || theta.d() != obj.d() {
        return Err(LabError::ShapeMismatch(format!(
            "W is {}x{}, objectives have m = {}, d = {}, point is {}x{}",
            w.m(),
            w.m(),
            obj.m(),
            obj.d(),
            theta.m(),
            theta.d()
        )));
    }
    Ok(())
}

fn warn_large_step(obj: &ObjectiveSet, gamma: f64) {
    if gamma > 1.0 / obj.smoothness() {
        log::warn!("γ = {gamma} exceeds 1/L = {}", 1.0 / obj.smoothness());
    }
}

/// `Θ ↦ W(Θ − γ∇F(Θ))`.
pub fn dgd_step(w: &CommMatrix, obj: &ObjectiveSet, gamma: f64, theta: &StackedPoint) -> Result<StackedPoint> {
    check_shapes(w, obj, theta)?;
    warn_large_step(obj, gamma);
    let mut out = StackedPoint::zeros(obj.m(), obj.d());
    let mut ws = Workspace::new(obj.m(), obj.d());
    step_into(w, obj, None, gamma, theta.as_slice(), 0, out.as_mut_slice(), &mut ws);
    Ok(out)
}

/// `Θ ↦ W(Θ − γ(∇F(Θ) + E_{t+1}(Θ)))` with the draw addressed by `(key, t)`.
pub fn dsgd_step(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: &NoiseModel,
    gamma: f64,
    theta: &StackedPoint,
    key: &StreamKey,
    t: u64,
) -> Result<StackedPoint> {
    check_shapes(w, obj, theta)?;
    noise.check(obj)?;
    warn_large_step(obj, gamma);
    let mut out = StackedPoint::zeros(obj.m(), obj.d());
    let mut ws = Workspace::new(obj.m(), obj.d());
    step_into(w, obj, Some((noise, key)), gamma, theta.as_slice(), t, out.as_mut_slice(), &mut ws);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: u64,
    /// Finish with Newton steps on the fixed-point equation.
    pub polish: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50_000_000,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub theta: StackedPoint,
    pub iterations: u64,
    /// `‖(I − W)Θ + γW∇F(Θ)‖`.
    pub residual: f64,
}

/// `‖(I − W)Θ + γW∇F(Θ)‖ = ‖Θ − W(Θ − γ∇F(Θ))‖`.
pub fn fixed_point_residual(w: &CommMatrix, obj: &ObjectiveSet, gamma: f64, theta: &StackedPoint) -> Result<f64> {
    let next = dgd_step(w, obj, gamma, theta)?;
    Ok(theta.distance(&next))
}

/// Θ_det: iterates DGD from Θ* until `‖Θ_{t+1} − Θ_t‖ ≤ tol·γμ` (or the
/// rounding floor), then optionally polishes with Newton steps.
pub fn fixed_point(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    gamma: f64,
    opts: FixedPointOptions,
) -> Result<FixedPoint> {
    if !(gamma > 0.0) {
        return Err(LabError::InvalidStep(format!("γ must be positive, got {gamma}")));
    }
    let start = obj.stacked_optimum();
    check_shapes(w, obj, &start)?;
    warn_large_step(obj, gamma);
    let (m, d) = (obj.m(), obj.d());
    let mut ws = Workspace::new(m, d);
    let mut cur = start.into_vec();
    let mut next = vec![0.0; m * d];
    let target = opts.tol * gamma * obj.mu();
    let mut iterations = 0;
    loop {
        step_into(w, obj, None, gamma, &cur, 0, &mut next, &mut ws);
        iterations += 1;
        let delta: f64 = cur.iter().zip(&next).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        std::mem::swap(&mut cur, &mut next);
        if delta <= target.max(64.0 * f64::EPSILON * scale) {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(LabError::NoConvergence { iterations: iterations as usize });
        }
    }
    let mut theta = StackedPoint::from_vec(m, d, cur)?;
    if opts.polish {
        theta = newton_polish(w, obj, gamma, theta)?;
    }
    let residual = fixed_point_residual(w, obj, gamma, &theta)?;
    Ok(FixedPoint {
        theta,
        iterations,
        residual,
    })
}

/// Newton iterations on `R(Θ) = Θ − W(Θ − γ∇F(Θ))` with the dense Jacobian
/// `I − (W ⊗ I)(I − γ·diag(∇²f_k(θ_k)))`; stops once the residual no longer
/// decreases.
fn newton_polish(w: &CommMatrix, obj: &ObjectiveSet, gamma: f64, mut theta: StackedPoint) -> Result<StackedPoint> {
    let (m, d) = (obj.m(), obj.d());
    let n = m * d;
    let mut res = fixed_point_residual(w, obj, gamma, &theta)?;
    for _ in 0..8 {
        let r = theta.sub(&dgd_step(w, obj, gamma, &theta)?);
        let mut jac = Matrix::identity(n);
        let hess: Vec<Matrix> = (0..m)
            .map(|l| obj.hess_local(l, theta.block(l)))
            .collect::<Result<_>>()?;
        for k in 0..m {
            for l in 0..m {
                let wkl = w.matrix()[(k, l)];
                if wkl == 0.0 {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        let inner = if i == j { 1.0 } else { 0.0 } - gamma * hess[l][(i, j)];
                        jac[(k * d + i, l * d + j)] -= wkl * inner;
                    }
                }
            }
        }
        let step = Lu::new(&jac)?.solve(r.as_slice());
        let candidate = theta.sub(&StackedPoint::from_vec(m, d, step)?);
        let cand_res = fixed_point_residual(w, obj, gamma, &candidate)?;
        if !(cand_res < res) {
            break;
        }
        theta = candidate;
        res = cand_res;
    }
    Ok(theta)
}

/// One recorded step of one replicate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub replicate: usize,
    /// `‖Θ_t − Θ*‖`.
    pub dist_opt: f64,
    /// `‖Θ_t − Θ_det‖`, NaN when Θ_det was not supplied.
    pub dist_det: f64,
    /// `‖PΘ_t − Θ*‖`.
    pub consensus_err: f64,
    /// `‖QΘ_t‖`.
    pub disagreement_norm: f64,
    /// `(1/m) Σ_i ‖θ_i − θ*‖`.
    pub mean_client_dist: f64,
}

/// Running sums of deviations `Θ_t − center` past burn-in.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSums {
    pub count: u64,
    pub center: StackedPoint,
    /// `Σ (Θ_t − c)`.
    pub sum: Vec<f64>,
    /// `Σ (Θ_t − c)(Θ_t − c)ᵀ`, row-major md×md.
    pub outer: Vec<f64>,
}

impl MomentSums {
    pub fn new(center: StackedPoint) -> Self {
        let n = center.len();
        Self {
            count: 0,
            center,
            sum: vec![0.0; n],
            outer: vec![0.0; n * n],
        }
    }

    pub fn push(&mut self, theta: &[f64], dev: &mut [f64]) {
        let n = self.sum.len();
        for ((dv, x), c) in dev.iter_mut().zip(theta).zip(self.center.as_slice()) {
            *dv = x - c;
        }
        for (s, dv) in self.sum.iter_mut().zip(dev.iter()) {
            *s += dv;
        }
        for i in 0..n {
            let di = dev[i];
            // lower triangle only; mirrored in `finish`
            let row = &mut self.outer[i * n..i * n + i + 1];
            for (o, dj) in row.iter_mut().zip(&dev[..=i]) {
                *o += di * dj;
            }
        }
        self.count += 1;
    }

    fn finish(&mut self) {
        let n = self.sum.len();
        for i in 0..n {
            for j in 0..i {
                self.outer[j * n + i] = self.outer[i * n + j];
            }
        }
    }

    /// Per-replicate time average of `Θ_t − c`.
    pub fn mean_deviation(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.sum.iter().map(|s| s / c).collect()
    }

    /// Per-replicate time average of `(Θ_t − c)^{⊗2}`.
    pub fn second_moment(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.outer.iter().map(|s| s / c).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub rows: Vec<TraceRow>,
    pub final_iterate: StackedPoint,
    pub moments: MomentSums,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub burn_in: u64,
    pub theta_star: StackedPoint,
    pub theta_det: Option<StackedPoint>,
    pub replicates: Vec<ReplicateRecord>,
}

pub const TRACE_HEADER: [&str; 6] = [
    "t",
    "replicate",
    "dist_opt",
    "dist_det",
    "consensus_err",
    "disagreement_norm",
];

impl RunRecord {
    /// All trace rows, replicate-major.
    pub fn rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.replicates.iter().flat_map(|r| r.rows.iter())
    }

    /// Writes `t,replicate,dist_opt,dist_det,consensus_err,disagreement_norm`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for r in self.rows() {
            w.write_record([
                r.t.to_string(),
                r.replicate.to_string(),
                fmt_f64(r.dist_opt),
                fmt_f64(r.dist_det),
                fmt_f64(r.consensus_err),
                fmt_f64(r.disagreement_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per recorded step: mean and standard deviation across replicates of
    /// `(1/m) Σ_i ‖θ_i^t − θ*‖`.
    pub fn aggregate(&self) -> Vec<(u64, f64, f64)> {
        let Some(first) = self.replicates.first() else {
            return Vec::new();
        };
        let r = self.replicates.len() as f64;
        (0..first.rows.len())
            .map(|i| {
                let vals: Vec<f64> = self.replicates.iter().map(|rep| rep.rows[i].mean_client_dist).collect();
                let mean = vals.iter().sum::<f64>() / r;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0)
                } else {
                    0.0
                };
                (first.rows[i].t, mean, var.sqrt())
            })
            .collect()
    }

    /// Writes `t,mean,std` from [`Self::aggregate`].
    pub fn write_aggregate_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean", "std"])?;
        for (t, mean, std) in self.aggregate() {
            w.write_record([t.to_string(), fmt_f64(mean), fmt_f64(std)])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Observer<'a> {
    star: &'a StackedPoint,
    det: Option<&'a StackedPoint>,
    theta_star: &'a [f64],
}

impl Observer<'_> {
    fn row(&self, t: u64, replicate: usize, theta: &StackedPoint) -> TraceRow {
        let consensus = theta.consensus();
        TraceRow {
            t,
            replicate,
            dist_opt: theta.distance(self.star),
            dist_det: self.det.map_or(f64::NAN, |d| theta.distance(d)),
            consensus_err: consensus.distance(self.star),
            disagreement_norm: theta.disagreement().norm(),
            mean_client_dist: theta.mean_block_distance(self.theta_star),
        }
    }
}

/// Runs the configured algorithm from `theta0` for every replicate.
/// Replicate `r` draws from `StreamKey::new(seed, r)`; RR chains with
/// independent coupling use chain ids 0 and 1.
pub fn run(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: Option<&NoiseModel>,
    config: &RunConfig,
    theta0: &StackedPoint,
    theta_det: Option<&StackedPoint>,
) -> Result<RunRecord> {
    config.validate()?;
    check_shapes(w, obj, theta0)?;
    if let Some(det) = theta_det {
        theta0.check_shape(det)?;
    }
    let noise = if config.algorithm.is_stochastic() {
        let model = noise.ok_or_else(|| {
            LabError::InvalidParam(format!("{} needs a noise model", config.algorithm.name()))
        })?;
        model.check(obj)?;
        Some(model)
    } else {
        None
    };
    warn_large_step(obj, config.gamma);
    let burn_in = config.effective_burn_in(obj.mu());
    let star = obj.stacked_optimum();
    let center = theta_det.cloned().unwrap_or_else(|| star.clone());
    let observer = Observer {
        star: &star,
        det: theta_det,
        theta_star: obj.theta_star(),
    };
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(w, obj, noise, config, theta0, r, burn_in, &center, &observer))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        config: config.clone(),
        burn_in,
        theta_star: star.clone(),
        theta_det: theta_det.cloned(),
        replicates,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: Option<&NoiseModel>,
    config: &RunConfig,
    theta0: &StackedPoint,
    replicate: usize,
    burn_in: u64,
    center: &StackedPoint,
    observer: &Observer<'_>,
) -> Result<ReplicateRecord> {
    let (m, d) = (obj.m(), obj.d());
    let n = m * d;
    let key = StreamKey::new(config.seed, replicate as u64);
    let key_half = match config.coupling {
        Coupling::Shared => key,
        Coupling::Independent => key.with_chain(1),
    };
    let gamma = config.gamma;
    let rr = config.algorithm.is_rr();

    let mut ws = Workspace::new(m, d);
    let mut cur = theta0.as_slice().to_vec();
    let mut next = vec![0.0; n];
    let mut cur_half = cur.clone();
    let mut view = theta0.clone();
    let mut dev = vec![0.0; n];
    let mut moments = MomentSums::new(center.clone());
    let mut rows = Vec::new();

    let mut observe = |t: u64, view: &StackedPoint, moments: &mut MomentSums, dev: &mut [f64]| {
        if t % config.record_every == 0 || t == config.iterations {
            rows.push(observer.row(t, replicate, view));
        }
        if t >= burn_in {
            moments.push(view.as_slice(), dev);
        }
    };
    observe(0, &view, &mut moments, &mut dev);

    for t in 0..config.iterations {
        step_into(w, obj, noise.map(|nm| (nm, &key)), gamma, &cur, t, &mut next, &mut ws);
        std::mem::swap(&mut cur, &mut next);
        if rr {
            step_into(w, obj, noise.map(|nm| (nm, &key_half)), 0.5 * gamma, &cur_half, t, &mut next, &mut ws);
            std::mem::swap(&mut cur_half, &mut next);
            for ((v, h), g) in view.as_mut_slice().iter_mut().zip(&cur_half).zip(&cur) {
                *v = 2.0 * h - g;
            }
        } else {
            view.as_mut_slice().copy_from_slice(&cur);
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(LabError::InvalidStep(format!(
                "iterates diverged at t = {} with γ = {gamma}",
                t + 1
            )));
        }
        observe(t + 1, &view, &mut moments, &mut dev);
    }
    moments.finish();
    Ok(ReplicateRecord {
        replicate,
        rows,
        final_iterate: view,
        moments,
    })
}

/// Richardson–Romberg run: chains at γ and γ/2 from the same start, recording
/// `2Θ^{γ/2} − Θ^γ`. The configured algorithm is mapped to its RR variant.
pub fn rr_run(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: Option<&NoiseModel>,
    config: &RunConfig,
    theta0: &StackedPoint,
    theta_det: Option<&StackedPoint>,
) -> Result<RunRecord> {
    let mut cfg = config.clone();
    cfg.algorithm = match config.algorithm {
        Algorithm::Dgd | Algorithm::RrDgd => Algorithm::RrDgd,
        Algorithm::Dsgd | Algorithm::RrDsgd => Algorithm::RrDsgd,
    };
    run(w, obj, noise, &cfg, theta0, theta_det)
}

/// Mean squared distance between synchronously coupled chains.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledTrace {
    /// `Ê‖Θᵃ_t − Θᵇ_t‖²` for t = 0..=T.
    pub mean_sq_dist: Vec<f64>,
    /// Standard error of the mean across replicates.
    pub std_error: Vec<f64>,
    pub replicates: usize,
}

/// Runs pairs of chains from `theta_a`, `theta_b` that consume identical
/// noise draws, averaging `‖Θᵃ_t − Θᵇ_t‖²` over replicates.
#[allow(clippy::too_many_arguments)]
pub fn coupled_run(
    w: &CommMatrix,
    obj: &ObjectiveSet,
    noise: Option<&NoiseModel>,
    gamma: f64,
    iterations: u64,
    theta_a: &StackedPoint,
    theta_b: &StackedPoint,
    seed: u64,
    replicates: usize,
) -> Result<CoupledTrace> {
    check_shapes(w, obj, theta_a)?;
    theta_a.check_shape(theta_b)?;
    let l = noise.map_or(obj.smoothness(), |nm| nm.cocoercivity_constant(obj));
    if !(gamma > 0.0) || gamma >= 2.0 / l {
        return Err(LabError::InvalidStep(format!("coupling needs 0 < γ < 2/L = {}", 2.0 / l)));
    }
    if replicates == 0 {
        return Err(LabError::InvalidParam("replicates must be at least 1".into()));
    }
    if let Some(nm) = noise {
        nm.check(obj)?;
    }
    let (m, d) = (obj.m(), obj.d());
    let per_rep: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let key = StreamKey::new(seed, r as u64);
            let mut ws = Workspace::new(m, d);
            let mut a = theta_a.as_slice().to_vec();
            let mut b = theta_b.as_slice().to_vec();
            let mut next = vec![0.0; m * d];
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let mut out = Vec::with_capacity(iterations as usize + 1);
            out.push(sq(&a, &b));
            for t in 0..iterations {
                step_into(w, obj, noise.map(|nm| (nm, &key)), gamma, &a, t, &mut next, &mut ws);
                std::mem::swap(&mut a, &mut next);
                step_into(w, obj, noise.map(|nm| (nm, &key)), gamma, &b, t, &mut next, &mut ws);
                std::mem::swap(&mut b, &mut next);
                out.push(sq(&a, &b));
            }
            out
        })
        .collect();
    let r = replicates as f64;
    let len = iterations as usize + 1;
    let mut mean_sq_dist = vec![0.0; len];
    let mut std_error = vec![0.0; len];
    for t in 0..len {
        let mean = per_rep.iter().map(|v| v[t]).sum::<f64>() / r;
        mean_sq_dist[t] = mean;
        std_error[t] = if replicates > 1 {
            let var = per_rep.iter().map(|v| (v[t] - mean).powi(2)).sum::<f64>() / (r - 1.0);
            (var / r).sqrt()
        } else {
            0.0
        };
    }
    Ok(CoupledTrace {
        mean_sq_dist,
        std_error,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::Matrix;
    use approx::assert_abs_diff_eq;

    fn two_client() -> (CommMatrix, ObjectiveSet) {
        let w = CommMatrix::new(Matrix::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]])).unwrap();
        let obj = ObjectiveSet::isotropic_quadratic(&[1.0, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        (w, obj)
    }

    fn exact_opts() -> FixedPointOptions {
        FixedPointOptions {
            tol: 1e-12,
            ..FixedPointOptions::default()
        }
    }

    #[test]
    fn two_client_fixed_point() {
        let (w, obj) = two_client();
        let fp = fixed_point(&w, &obj, 0.1, exact_opts()).unwrap();
        assert_abs_diff_eq!(fp.theta.as_slice()[0], 1.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fp.theta.as_slice()[1], -1.0 / 11.0, epsilon = 1e-12);
        assert!(fp.residual <= 1e-11);
        let again = dgd_step(&w, &obj, 0.1, &fp.theta).unwrap();
        assert!(again.distance(&fp.theta) <= 1e-10);
    }

    #[test]
    fn unpolished_fixed_point_meets_tolerance() {
        let (w, obj) = two_client();
        let opts = FixedPointOptions {
            tol: 1e-10,
            polish: false,
            ..FixedPointOptions::default()
        };
        let fp = fixed_point(&w, &obj, 0.1, opts).unwrap();
        assert!(fp.residual <= 10.0 * 1e-10);
        assert_abs_diff_eq!(fp.theta.as_slice()[0], 1.0 / 11.0, epsilon = 1e-9);
    }

    #[test]
    fn homogeneous_and_full_fixed_points() {
        let homo = ObjectiveSet::isotropic_quadratic(&[1.0, 2.0, 3.0, 1.5], vec![vec![0.5, -1.0]; 4]).unwrap();
        let ring = CommMatrix::ring(4, 0.25).unwrap();
        let fp = fixed_point(&ring, &homo, 0.1, exact_opts()).unwrap();
        assert!(fp.theta.distance(&homo.stacked_optimum()) <= 1e-12);
        let step = dgd_step(&ring, &homo, 0.1, &homo.stacked_optimum()).unwrap();
        assert!(step.distance(&homo.stacked_optimum()) <= 1e-15);

        let het = crate::objectives::generate_quadratic_problem(4, 2, 1.0, 0.5, 2.0, false, 1).unwrap();
        let full = CommMatrix::fully_connected(4).unwrap();
        let fp = fixed_point(&full, &het, 0.1, exact_opts()).unwrap();
        assert!(fp.theta.distance(&het.stacked_optimum()) <= 1e-11);
    }

    #[test]
    fn single_client_is_plain_gradient_descent() {
        let obj = ObjectiveSet::isotropic_quadratic(&[2.0], vec![vec![1.0]]).unwrap();
        let w = CommMatrix::fully_connected(1).unwrap();
        let theta = StackedPoint::from_vec(1, 1, vec![3.0]).unwrap();
        let next = dgd_step(&w, &obj, 0.1, &theta).unwrap();
        assert_abs_diff_eq!(next.as_slice()[0], 3.0 - 0.1 * 2.0 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_noise_matches_dgd() {
        let obj = crate::objectives::generate_quadratic_problem(3, 2, 1.0, 0.5, 2.0, false, 2).unwrap();
        let w = CommMatrix::ring(3, 0.25).unwrap();
        let zero = NoiseModel::isotropic(3, 2, 0.0).unwrap();
        let theta = StackedPoint::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let key = StreamKey::new(1, 1);
        let a = dsgd_step(&w, &obj, &zero, 0.1, &theta, &key, 4).unwrap();
        let b = dgd_step(&w, &obj, 0.1, &theta).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_dsgd_is_ar1() {
        let obj = ObjectiveSet::isotropic_quadratic(&[1.5], vec![vec![0.0]]).unwrap();
        let w = CommMatrix::fully_connected(1).unwrap();
        let noise = NoiseModel::isotropic(1, 1, 2.0).unwrap();
        let key = StreamKey::new(3, 0);
        let gamma = 0.2;
        let mut theta = StackedPoint::from_vec(1, 1, vec![1.0]).unwrap();
        for t in 0..20 {
            let eps = noise.sample(&obj, &theta, &key, t).unwrap().as_slice()[0];
            let expected = (1.0 - gamma * 1.5) * theta.as_slice()[0] - gamma * eps;
            theta = dsgd_step(&w, &obj, &noise, gamma, &theta, &key, t).unwrap();
            assert_abs_diff_eq!(theta.as_slice()[0], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn one_step_conditional_mean() {
        let obj = crate::objectives::generate_logistic_problem(3, 10, 2, 1.0, 0.1, 6).unwrap();
        let w = CommMatrix::ring(3, 0.25).unwrap();
        let noise = NoiseModel::minibatch(2).unwrap();
        let theta = StackedPoint::from_vec(3, 2, vec![0.5, -0.5, 1.0, 0.2, -0.3, 0.8]).unwrap();
        let det = dgd_step(&w, &obj, 0.1, &theta).unwrap();
        let n = 100_000;
        let mut sum = vec![0.0; 6];
        let mut sum_sq = vec![0.0; 6];
        for t in 0..n {
            let key = StreamKey::new(11, t);
            let s = dsgd_step(&w, &obj, &noise, 0.1, &theta, &key, 0).unwrap();
            for i in 0..6 {
                sum[i] += s.as_slice()[i];
                sum_sq[i] += s.as_slice()[i].powi(2);
            }
        }
        for i in 0..6 {
            let mean = sum[i] / n as f64;
            let se = ((sum_sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - det.as_slice()[i]).abs() <= 4.0 * se + 1e-15, "coordinate {i}");
        }
    }

    #[test]
    fn run_records_and_determinism() {
        let (w, obj) = two_client();
        let noise = NoiseModel::isotropic(2, 1, 1.0).unwrap();
        let mut cfg = RunConfig::new(Algorithm::Dsgd, 0.1, 50);
        cfg.replicates = 2;
        cfg.seed = 9;
        cfg.record_every = 7;
        cfg.burn_in = Some(10);
        let theta0 = StackedPoint::zeros(2, 1);
        let a = run(&w, &obj, Some(&noise), &cfg, &theta0, None).unwrap();
        let b = run(&w, &obj, Some(&noise), &cfg, &theta0, None).unwrap();
        let csv = |r: &RunRecord| {
            let mut buf = Vec::new();
            r.write_trace_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(csv(&a), csv(&b));
        for (x, y) in a.replicates.iter().zip(&b.replicates) {
            assert_eq!(x.final_iterate, y.final_iterate);
            assert_eq!(x.moments, y.moments);
        }
        let ts: Vec<u64> = a.replicates[0].rows.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 7, 14, 21, 28, 35, 42, 49, 50]);
        assert_eq!(a.replicates[0].moments.count, 41);
        assert_ne!(a.replicates[0].final_iterate, a.replicates[1].final_iterate);
        assert!(a.rows().all(|r| r.dist_opt >= 0.0 && r.dist_det.is_nan()));

        cfg.iterations = 0;
        cfg.burn_in = None;
        let empty = run(&w, &obj, Some(&noise), &cfg, &theta0, None).unwrap();
        assert_eq!(empty.replicates[0].rows.len(), 1);
        assert_eq!(empty.replicates[0].rows[0].t, 0);
        assert_eq!(empty.replicates[0].final_iterate, theta0);

        let mut buf = Vec::new();
        empty.write_trace_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,replicate,dist_opt,dist_det,consensus_err,disagreement_norm\n"));
    }

    #[test]
    fn run_rejects_bad_configs() {
        let (w, obj) = two_client();
        let theta0 = StackedPoint::zeros(2, 1);
        let cfg = RunConfig::new(Algorithm::Dsgd, 0.1, 10);
        assert!(run(&w, &obj, None, &cfg, &theta0, None).is_err());
        let mut bad = RunConfig::new(Algorithm::Dgd, 0.1, 10);
        bad.burn_in = Some(10);
        assert!(run(&w, &obj, None, &bad, &theta0, None).is_err());
        assert!(run(&w, &obj, None, &RunConfig::new(Algorithm::Dgd, 0.0, 10), &theta0, None).is_err());
        assert!(run(&w, &obj, None, &RunConfig::new(Algorithm::Dgd, 0.1, 10), &StackedPoint::zeros(3, 1), None).is_err());
    }

    #[test]
    fn dgd_contracts_to_fixed_point() {
        let (w, obj) = two_client();
        let gamma = 0.1;
        let det = fixed_point(&w, &obj, gamma, exact_opts()).unwrap().theta;
        let cfg = RunConfig::new(Algorithm::Dgd, gamma, 200);
        let theta0 = StackedPoint::from_vec(2, 1, vec![5.0, 3.0]).unwrap();
        let rec = run(&w, &obj, None, &cfg, &theta0, Some(&det)).unwrap();
        let d0 = rec.replicates[0].rows[0].dist_det;
        for r in &rec.replicates[0].rows {
            assert!(r.dist_det <= (1.0 - gamma * obj.mu()).powi(r.t as i32) * d0 + 1e-12);
        }
    }

    #[test]
    fn rr_two_client_limit() {
        let (w, obj) = two_client();
        let cfg = RunConfig::new(Algorithm::Dgd, 0.1, 2000);
        let rec = rr_run(&w, &obj, None, &cfg, &StackedPoint::zeros(2, 1), None).unwrap();
        let fin = rec.replicates[0].final_iterate.as_slice();
        let expected = 2.0 * (0.025 / 0.525) - 0.05 / 0.55;
        assert_abs_diff_eq!(fin[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(fin[1], -expected, epsilon = 1e-12);
    }

    #[test]
    fn rr_homogeneous_limit_is_optimum() {
        let homo = ObjectiveSet::isotropic_quadratic(&[1.0, 2.0, 3.0], vec![vec![0.5]; 3]).unwrap();
        let w = CommMatrix::ring(3, 0.2).unwrap();
        let cfg = RunConfig::new(Algorithm::RrDgd, 0.1, 3000);
        let rec = run(&w, &homo, None, &cfg, &StackedPoint::zeros(3, 1), None).unwrap();
        assert!(rec.replicates[0].final_iterate.distance(&homo.stacked_optimum()) <= 1e-12);
    }

    #[test]
    fn coupled_chains() {
        let obj = crate::objectives::generate_quadratic_problem(3, 2, 1.0, 0.5, 2.0, false, 4).unwrap();
        let w = CommMatrix::ring(3, 0.25).unwrap();
        let noise = NoiseModel::isotropic(3, 2, 1.0).unwrap();
        let a = StackedPoint::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let b = StackedPoint::from_vec(3, 2, vec![-1.0, 2.0, 0.0, 0.0, 3.0, 1.0]).unwrap();
        let gamma = 0.3;
        let same = coupled_run(&w, &obj, Some(&noise), gamma, 20, &a, &a, 0, 3).unwrap();
        assert!(same.mean_sq_dist.iter().all(|&v| v == 0.0));
        let tr = coupled_run(&w, &obj, Some(&noise), gamma, 50, &a, &b, 0, 3).unwrap();
        let q = (1.0 - gamma * obj.mu()).powi(2);
        for win in tr.mean_sq_dist.windows(2) {
            assert!(win[1] <= q * win[0] * (1.0 + 1e-12) + 1e-300);
        }
        assert!(coupled_run(&w, &obj, Some(&noise), 2.0 / obj.smoothness(), 5, &a, &b, 0, 1).is_err());
    }

    #[test]
    fn burn_in_default() {
        assert_eq!(default_burn_in(0.1, 1.0), (1e-6f64.ln() / 0.9f64.ln()).ceil() as u64);
        let mut cfg = RunConfig::new(Algorithm::Dgd, 1e-3, 100);
        assert_eq!(cfg.effective_burn_in(1.0), 50);
        cfg.iterations = 1_000_000;
        assert_eq!(cfg.effective_burn_in(1.0), default_burn_in(1e-3, 1.0));
    }
}
