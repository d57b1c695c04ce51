//! Closed-form predictions and explicit bounds for a `(W, objectives, noise, γ)`
//! tuple: the exact quadratic fixed point, the first-order deterministic bias,
//! the first-order stationary variance and stochastic bias, explicit bounds on
//! the deterministic error, and the term-wise non-asymptotic diagnostics.

use std::io::Write;

use crate::error::{LabError, Result};
use crate::io::fmt_f64;
use crate::matops::{inverse, solve, sylvester_solve, Matrix};
use crate::noise::NoiseModel;
use crate::objectives::ObjectiveSet;
use crate::stacked::StackedPoint;
use crate::topology::CommMatrix;

/// Scalars consumed by the bound formulas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemConstants {
    pub m: usize,
    pub mu: f64,
    pub l: f64,
    pub k3: f64,
    pub zeta_star: f64,
    pub big_lambda: f64,
    pub rho: f64,
    pub tau2: f64,
    pub tau4: f64,
}

impl ProblemConstants {
    /// Collects the constants; τ₂, τ₄ are exact for Gaussian noise and
    /// estimated from `n_draws` draws otherwise. Without noise both are 0.
    pub fn new(w: &CommMatrix, obj: &ObjectiveSet, noise: Option<&NoiseModel>, n_draws: usize, seed: u64) -> Result<Self> {
        let (tau2, tau4) = match noise {
            Some(nm) => nm.tau_pair(obj, n_draws, seed)?,
            None => (0.0, 0.0),
        };
        let p = w.spectral_profile();
        Ok(Self {
            m: obj.m(),
            mu: obj.mu(),
            l: obj.smoothness(),
            k3: obj.k3(),
            zeta_star: obj.zeta_star(),
            big_lambda: p.big_lambda,
            rho: p.rho,
            tau2,
            tau4,
        })
    }

    /// `ρ²/(1 − ρ²)`.
    pub fn rho_ratio(&self) -> f64 {
        let r2 = self.rho * self.rho;
        if r2 >= 1.0 {
            f64::INFINITY
        } else {
            r2 / (1.0 - r2)
        }
    }

    /// `min(1/(ΛL), 1/L)`, with `1/(ΛL) = ∞` when Λ = 0.
    pub fn det_bias_step_limit(&self) -> f64 {
        (1.0 / (self.big_lambda * self.l)).min(1.0 / self.l)
    }

    /// `min(1/(ΛL), 1/(10L))`.
    pub fn nonasymptotic_step_limit(&self) -> f64 {
        (1.0 / (self.big_lambda * self.l)).min(0.1 / self.l)
    }

    /// `2/((1 + L/μ)LΛ)`, infinite when Λ = 0.
    pub fn quad_step_limit(&self) -> f64 {
        2.0 / ((1.0 + self.l / self.mu) * self.l * self.big_lambda)
    }

    /// `K₃ζ*²/(μ√m) + Lζ*`.
    fn expansion_scale(&self) -> f64 {
        self.k3 * self.zeta_star * self.zeta_star / (self.mu * (self.m as f64).sqrt()) + self.l * self.zeta_star
    }
}

fn check_step(gamma: f64, limit: f64, strict: bool, condition: &'static str) -> Result<()> {
    let ok = gamma > 0.0 && if strict { gamma < limit } else { gamma <= limit };
    if ok {
        Ok(())
    } else {
        Err(LabError::StepTooLarge {
            condition,
            gamma,
            limit,
        })
    }
}

pub const DET_BIAS_CONDITION: &str = "γ ≤ min(1/(ΛL), 1/L)";
pub const QUAD_CONDITION: &str = "γ < 2/((1+L/μ)LΛ)";
pub const NONASYMPTOTIC_CONDITION: &str = "γ ≤ min(1/(ΛL), 1/(10L))";

/// Block-diagonal `diag(A_1, …, A_m)` as a dense md×md matrix.
fn block_diag(blocks: &[Matrix]) -> Matrix {
    let d = blocks[0].rows();
    let n = blocks.len() * d;
    let mut out = Matrix::zeros(n, n);
    for (k, b) in blocks.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                out[(k * d + i, k * d + j)] = b[(i, j)];
            }
        }
    }
    out
}

/// `M ⊗ I_d` for an m×m matrix.
fn kron_identity(op: &Matrix, d: usize) -> Matrix {
    let m = op.rows();
    let mut out = Matrix::zeros(m * d, m * d);
    for k in 0..m {
        for l in 0..m {
            for i in 0..d {
                out[(k * d + i, l * d + i)] = op[(k, l)];
            }
        }
    }
    out
}

/// `H = P Ā⁻¹ 𝐀`: block (k, l) is `(1/m) Ā⁻¹ A_l`.
fn h_operator(hessians: &[Matrix], abar_inv: &Matrix) -> Matrix {
    let m = hessians.len();
    let d = abar_inv.rows();
    let mut out = Matrix::zeros(m * d, m * d);
    let cols: Vec<Matrix> = hessians.iter().map(|a| (abar_inv * a).scale(1.0 / m as f64)).collect();
    for k in 0..m {
        for (l, c) in cols.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    out[(k * d + i, l * d + j)] = c[(i, j)];
                }
            }
        }
    }
    out
}

/// Applies `I − H` block-wise: `u_k − Ā⁻¹ (1/m) Σ_l A_l u_l`.
fn apply_i_minus_h(hessians: &[Matrix], abar_inv: &Matrix, u: &StackedPoint) -> StackedPoint {
    let m = hessians.len();
    let d = u.d();
    let mut acc = vec![0.0; d];
    for (l, a) in hessians.iter().enumerate() {
        for (x, v) in acc.iter_mut().zip(a.matvec(u.block(l))) {
            *x += v / m as f64;
        }
    }
    let hu = abar_inv.matvec(&acc);
    let mut out = u.clone();
    for k in 0..m {
        for (o, h) in out.block_mut(k).iter_mut().zip(&hu) {
            *o -= h;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadFixedPoint {
    pub theta: StackedPoint,
    pub consensus: StackedPoint,
    pub disagreement: StackedPoint,
}

/// Exact DGD fixed point for quadratics:
/// `Θ_det = Θ* + γ(I − H)(I − γBH)⁻¹B(Θ*_loc − Θ*)` with
/// `B = (I + γG𝐀)⁻¹G𝐀`.
pub fn quad_exact_fixed_point(w: &CommMatrix, obj: &ObjectiveSet, gamma: f64) -> Result<QuadFixedPoint> {
    let quad = obj
        .as_quadratic()
        .ok_or_else(|| LabError::UnsupportedCombination("closed-form fixed point needs quadratic objectives".into()))?;
    if w.m() != obj.m() {
        return Err(LabError::ShapeMismatch(format!("W has m = {}, objectives m = {}", w.m(), obj.m())));
    }
    let big_lambda = w.spectral_profile().big_lambda;
    let star = obj.stacked_optimum();
    if big_lambda == 0.0 {
        if !(gamma > 0.0) {
            return Err(LabError::InvalidStep(format!("γ must be positive, got {gamma}")));
        }
        return Ok(QuadFixedPoint {
            consensus: star.clone(),
            disagreement: StackedPoint::zeros(obj.m(), obj.d()),
            theta: star,
        });
    }
    let limit = 2.0 / ((1.0 + obj.smoothness() / obj.mu()) * obj.smoothness() * big_lambda);
    check_step(gamma, limit, true, QUAD_CONDITION)?;

    let (m, d) = (obj.m(), obj.d());
    let n = m * d;
    let a_blk = block_diag(&quad.a);
    let g_blk = kron_identity(w.gossip_operator(), d);
    let abar_inv = inverse(quad.abar())?;
    let h = h_operator(&quad.a, &abar_inv);
    let ga = &g_blk * &a_blk;
    let b = &inverse(&(&Matrix::identity(n) + &ga.scale(gamma)))? * &ga;
    let v = quad.stacked_local_minimizers().sub(&star);
    let bv = b.matvec(v.as_slice());
    let lhs = &Matrix::identity(n) - &(&b * &h).scale(gamma);
    let z = StackedPoint::from_vec(m, d, solve(&lhs, &bv)?)?;
    let corr = apply_i_minus_h(&quad.a, &abar_inv, &z);
    let mut theta = star;
    theta.axpy(gamma, &corr);
    Ok(QuadFixedPoint {
        consensus: theta.consensus(),
        disagreement: theta.disagreement(),
        theta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetBiasExpansion {
    /// `Θ* − γ(I − H)G∇F(Θ*)`.
    pub prediction: StackedPoint,
    /// `−(I − H)G∇F(Θ*)`, the coefficient of γ.
    pub first_order: StackedPoint,
    /// `γ²(L²/2μ²)Λ²(K₃ζ*²/(μ√m) + Lζ*)`.
    pub residual_bound: f64,
}

/// First-order expansion of Θ_det with `𝐀 = diag(∇²f_k(θ*))`, `Ā` the mean
/// Hessian at θ*.
pub fn det_bias_expansion(w: &CommMatrix, obj: &ObjectiveSet, gamma: f64) -> Result<DetBiasExpansion> {
    let c = ProblemConstants::new(w, obj, None, 0, 0)?;
    check_step(gamma, c.det_bias_step_limit(), false, DET_BIAS_CONDITION)?;
    let star = obj.stacked_optimum();
    let hessians: Vec<Matrix> = (0..obj.m())
        .map(|k| obj.hess_local(k, obj.theta_star()))
        .collect::<Result<_>>()?;
    let abar_inv = inverse(&obj.mean_hessian(obj.theta_star()))?;
    let grad = obj.grad_stacked(&star)?;
    let g_grad = crate::topology::apply_block_operator(w.gossip_operator(), &grad);
    let first_order = apply_i_minus_h(&hessians, &abar_inv, &g_grad).scale(-1.0);
    let mut prediction = star;
    prediction.axpy(gamma, &first_order);
    let residual_bound =
        gamma * gamma * c.l * c.l / (2.0 * c.mu * c.mu) * c.big_lambda * c.big_lambda * c.expansion_scale();
    Ok(DetBiasExpansion {
        prediction,
        first_order,
        residual_bound,
    })
}

/// `γLΛζ*/μ`, a bound on `‖Θ_det − Θ*‖`.
pub fn det_bias_bound(obj: &ObjectiveSet, w: &CommMatrix, gamma: f64) -> Result<f64> {
    let c = ProblemConstants::new(w, obj, None, 0, 0)?;
    check_step(gamma, c.det_bias_step_limit(), false, DET_BIAS_CONDITION)?;
    Ok(gamma * c.l * c.big_lambda * c.zeta_star / c.mu)
}

/// `γ²(L²/μ²)Λ²(K₃ζ*²/(μ√m) + Lζ*)`, a bound on the deterministic RR error.
pub fn rr_bias_bound(obj: &ObjectiveSet, w: &CommMatrix, gamma: f64) -> Result<f64> {
    let c = ProblemConstants::new(w, obj, None, 0, 0)?;
    check_step(gamma, c.det_bias_step_limit(), false, DET_BIAS_CONDITION)?;
    Ok(gamma * gamma * c.l * c.l / (c.mu * c.mu) * c.big_lambda * c.big_lambda * c.expansion_scale())
}

/// `J C̄(θ*)`, the solution X of `ĀX + XĀ = C̄(θ*)`.
fn j_cov(obj: &ObjectiveSet, noise: &NoiseModel) -> Result<Matrix> {
    let cov = noise.covariance_at(obj, obj.theta_star())?;
    sylvester_solve(&obj.mean_hessian(obj.theta_star()), &cov)
}

/// `(γ/m)·J·C̄(θ*)`, the predicted common block of the stationary covariance.
pub fn variance_first_order(obj: &ObjectiveSet, noise: &NoiseModel, gamma: f64) -> Result<Matrix> {
    Ok(j_cov(obj, noise)?.symmetrize().scale(gamma / obj.m() as f64))
}

/// `−(γ/2m)·Ā⁻¹·∇³f(θ*)[J C̄(θ*)]`, the predicted `θ_sto^i − θ_det^i`.
pub fn stochastic_bias_first_order(obj: &ObjectiveSet, noise: &NoiseModel, gamma: f64) -> Result<Vec<f64>> {
    let x = j_cov(obj, noise)?;
    let t = obj.third_contract_matrix(obj.theta_star(), &x);
    let v = solve(&obj.mean_hessian(obj.theta_star()), &t)?;
    let s = -gamma / (2.0 * obj.m() as f64);
    Ok(v.into_iter().map(|x| s * x).collect())
}

/// Term-wise evaluation of the stationary-variance bound and of the
/// non-asymptotic bound (absolute constants set to 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundDiagnostics {
    /// `B = (τ₄² + γ²(L⁴/μ²)Λ²ζ*²)/μ`.
    pub b: f64,
    /// `C = (LB + K₃B^{3/2}γ^{1/2} + ½γ²K₃²B² + τ₂²)/τ₂²`, NaN when τ₂ = 0.
    pub c: f64,
    pub psi0: f64,
    /// `(γτ₂² + γ^{3/2}K₃B^{3/2})/(μm)`.
    pub variance_leading: f64,
    /// `γ²ρ²/(1 − ρ²)·τ₂²·C`.
    pub variance_topology: f64,
    /// `(1 − γμ)^t ψ₀` at the requested horizon.
    pub transient: f64,
    /// `γτ₂²/(μm)`.
    pub term_gamma: f64,
    /// `γ^{3/2}K₃B^{3/2}/(μm)`.
    pub term_gamma_3_2: f64,
    /// `γ²(L²Λ²ζ*²/μ² + LBρ²/(1−ρ²) + ρ²τ₂²/(1−ρ²))`.
    pub term_gamma_2: f64,
    /// `γ^{5/2}ρ²/(1−ρ²)(K₃B^{3/2} + γ^{3/2}K₃²B²)`.
    pub term_gamma_5_2: f64,
    pub total: f64,
}

pub fn bound_diagnostics(c: &ProblemConstants, gamma: f64, dist0_sq: f64, t: u64) -> Result<BoundDiagnostics> {
    check_step(gamma, c.nonasymptotic_step_limit(), false, NONASYMPTOTIC_CONDITION)?;
    let mu = c.mu;
    let m = c.m as f64;
    let het = c.big_lambda * c.big_lambda * c.zeta_star * c.zeta_star;
    let b = (c.tau4 * c.tau4 + gamma * gamma * c.l.powi(4) / (mu * mu) * het) / mu;
    let tau2_sq = c.tau2 * c.tau2;
    let cc = if tau2_sq > 0.0 {
        (c.l * b + c.k3 * b.powf(1.5) * gamma.sqrt() + 0.5 * gamma * gamma * c.k3 * c.k3 * b * b + tau2_sq) / tau2_sq
    } else {
        f64::NAN
    };
    let rr = c.rho_ratio();
    let psi0 = dist0_sq
        + gamma * gamma * c.l * c.l / (mu * mu) * het
        + gamma / mu * (tau2_sq + gamma * gamma * 4.0 * c.l.powi(4) / (mu * mu) * het);
    let term_gamma = gamma * tau2_sq / (mu * m);
    let term_gamma_3_2 = gamma.powf(1.5) * c.k3 * b.powf(1.5) / (mu * m);
    let term_gamma_2 = gamma * gamma * (c.l * c.l / (mu * mu) * het + c.l * b * rr + rr * tau2_sq);
    let term_gamma_5_2 = gamma.powf(2.5) * rr * (c.k3 * b.powf(1.5) + gamma.powf(1.5) * c.k3 * c.k3 * b * b);
    let transient = (1.0 - gamma * mu).max(0.0).powf(t as f64) * psi0;
    let variance_topology = if tau2_sq > 0.0 { gamma * gamma * rr * tau2_sq * cc } else { 0.0 };
    Ok(BoundDiagnostics {
        b,
        c: cc,
        psi0,
        variance_leading: (gamma * tau2_sq + gamma.powf(1.5) * c.k3 * b.powf(1.5)) / (mu * m),
        variance_topology,
        transient,
        term_gamma,
        term_gamma_3_2,
        term_gamma_2,
        term_gamma_5_2,
        total: transient + term_gamma + term_gamma_3_2 + term_gamma_2 + term_gamma_5_2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleVariant {
    Dsgd,
    Rr,
}

/// Step size and horizon from the sample-complexity formulas, absolute
/// constants set to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub gamma: f64,
    pub iterations: f64,
    /// The max(...) factor before the logarithm.
    pub horizon_factor: f64,
    /// `max(1, log(ψ₀/ε))`.
    pub log_factor: f64,
    /// ψ₀ evaluated at the recommended γ.
    pub psi0: f64,
}

pub fn recommend_schedule(c: &ProblemConstants, epsilon: f64, dist0_sq: f64, variant: ScheduleVariant) -> Result<Schedule> {
    if !(epsilon > 0.0) {
        return Err(LabError::InvalidParam(format!("ε must be positive, got {epsilon}")));
    }
    let (mu, l) = (c.mu, c.l);
    let lz = l * c.big_lambda * c.zeta_star;
    let het_eps = match variant {
        ScheduleVariant::Dsgd => epsilon,
        ScheduleVariant::Rr => epsilon.sqrt(),
    };
    let tau2_sq = c.tau2 * c.tau2;
    let rho2 = c.rho * c.rho;
    let gap = 1.0 - rho2;
    // B depends on γ only through a γ² heterogeneity term; evaluate it at 1/L.
    let b_at = |g: f64| (c.tau4 * c.tau4 + g * g * l.powi(4) / (mu * mu) * lz * lz / (l * l)) / mu;
    let b = b_at(1.0 / l);
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    let gamma = [
        1.0 / l,
        ratio(mu, l * lz),
        ratio(mu * c.m as f64 * epsilon * epsilon, tau2_sq),
        ratio(mu * het_eps, lz),
        epsilon * ratio(gap, l * b * rho2).sqrt(),
        epsilon * ratio(gap, tau2_sq * rho2).sqrt(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let horizon_factor = [
        l / mu,
        l * lz / (mu * mu),
        tau2_sq / (mu * mu * c.m as f64 * epsilon * epsilon),
        lz / (mu * mu * het_eps),
        c.tau2 / (mu * epsilon) * c.rho_ratio().sqrt(),
    ]
    .into_iter()
    .filter(|v| v.is_finite())
    .fold(0.0, f64::max);
    let het = c.big_lambda * c.big_lambda * c.zeta_star * c.zeta_star;
    let psi0 = dist0_sq
        + gamma * gamma * l * l / (mu * mu) * het
        + gamma / mu * (tau2_sq + gamma * gamma * 4.0 * l.powi(4) / (mu * mu) * het);
    let log_factor = (psi0 / epsilon).ln().max(1.0);
    Ok(Schedule {
        gamma,
        iterations: (horizon_factor * log_factor).ceil(),
        horizon_factor,
        log_factor,
        psi0,
    })
}

struct Violations<'a>(&'a mut Vec<(String, f64)>);

impl Violations<'_> {
    /// Turns a step-range violation into `None`, recording the condition.
    fn keep<T>(&mut self, r: Result<T>) -> Result<Option<T>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(LabError::StepTooLarge { condition, limit, .. }) => {
                if !self.0.iter().any(|(c, _)| c == condition) {
                    self.0.push((condition.to_string(), limit));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Every closed-form prediction and bound for one configuration. Fields are
/// `None` when outside their step-size range or not applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryReport {
    pub gamma: f64,
    pub constants: ProblemConstants,
    pub spectral_gap: f64,
    pub theta_star: Vec<f64>,
    pub theta_det_pred: Option<StackedPoint>,
    pub bias_first_order: Option<StackedPoint>,
    pub det_residual_bound: Option<f64>,
    pub det_bias_bound: Option<f64>,
    pub rr_bias_bound: Option<f64>,
    pub variance_first_order: Option<Matrix>,
    pub stochastic_bias_first_order: Option<Vec<f64>>,
    pub diagnostics: Option<BoundDiagnostics>,
    pub schedule_dsgd: Option<Schedule>,
    pub schedule_rr: Option<Schedule>,
    /// Conditions that were violated, with the limit that applied.
    pub violations: Vec<(String, f64)>,
}

impl TheoryReport {
    /// Evaluates everything available. Step-range violations are recorded in
    /// `violations`; other errors propagate.
    pub fn build(
        w: &CommMatrix,
        obj: &ObjectiveSet,
        noise: Option<&NoiseModel>,
        gamma: f64,
        theta0: &StackedPoint,
        horizon: u64,
        epsilon: f64,
    ) -> Result<Self> {
        let constants = ProblemConstants::new(w, obj, noise, 100_000, 0)?;
        let mut violations = Vec::new();
        let mut keep = Violations(&mut violations);
        let theta_det_pred = if obj.is_quadratic() {
            keep.keep(quad_exact_fixed_point(w, obj, gamma).map(|q| q.theta))?
        } else {
            None
        };
        let expansion = keep.keep(det_bias_expansion(w, obj, gamma))?;
        let det_bias = keep.keep(det_bias_bound(obj, w, gamma))?;
        let rr = keep.keep(rr_bias_bound(obj, w, gamma))?;
        let dist0_sq = theta0.distance(&obj.stacked_optimum()).powi(2);
        let diagnostics = keep.keep(bound_diagnostics(&constants, gamma, dist0_sq, horizon))?;
        let (variance, sto_bias) = match noise {
            Some(nm) => (
                Some(variance_first_order(obj, nm, gamma)?),
                Some(stochastic_bias_first_order(obj, nm, gamma)?),
            ),
            None => (None, None),
        };
        let schedule_dsgd = Some(recommend_schedule(&constants, epsilon, dist0_sq, ScheduleVariant::Dsgd)?);
        let schedule_rr = Some(recommend_schedule(&constants, epsilon, dist0_sq, ScheduleVariant::Rr)?);
        Ok(Self {
            gamma,
            constants,
            spectral_gap: w.spectral_profile().gap,
            theta_star: obj.theta_star().to_vec(),
            theta_det_pred: theta_det_pred.or_else(|| expansion.as_ref().map(|e| e.prediction.clone())),
            bias_first_order: expansion.as_ref().map(|e| e.first_order.clone()),
            det_residual_bound: expansion.map(|e| e.residual_bound),
            det_bias_bound: det_bias,
            rr_bias_bound: rr,
            variance_first_order: variance,
            stochastic_bias_first_order: sto_bias,
            diagnostics,
            schedule_dsgd,
            schedule_rr,
            violations,
        })
    }

    /// `(quantity, value)` pairs in a fixed order.
    pub fn scalar_rows(&self) -> Vec<(String, f64)> {
        let c = &self.constants;
        let mut rows: Vec<(String, f64)> = vec![
            ("gamma".into(), self.gamma),
            ("m".into(), c.m as f64),
            ("mu".into(), c.mu),
            ("L".into(), c.l),
            ("K3".into(), c.k3),
            ("zeta_star".into(), c.zeta_star),
            ("Lambda".into(), c.big_lambda),
            ("rho".into(), c.rho),
            ("gap".into(), self.spectral_gap),
            ("tau2".into(), c.tau2),
            ("tau4".into(), c.tau4),
        ];
        for (i, v) in self.theta_star.iter().enumerate() {
            rows.push((format!("theta_star[{i}]"), *v));
        }
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        if let Some(p) = &self.theta_det_pred {
            for (i, v) in p.as_slice().iter().enumerate() {
                rows.push((format!("theta_det_pred[{i}]"), *v));
            }
            rows.push(("theta_det_dist".into(), p.distance(&StackedPoint::replicate(&self.theta_star, c.m))));
        }
        if let Some(b) = &self.bias_first_order {
            for (i, v) in b.as_slice().iter().enumerate() {
                rows.push((format!("bias_first_order[{i}]"), *v));
            }
        }
        rows.push(("det_residual_bound".into(), opt(self.det_residual_bound)));
        rows.push(("det_bias_bound".into(), opt(self.det_bias_bound)));
        rows.push(("rr_bias_bound".into(), opt(self.rr_bias_bound)));
        if let Some(s) = &self.stochastic_bias_first_order {
            for (i, v) in s.iter().enumerate() {
                rows.push((format!("stochastic_bias_first_order[{i}]"), *v));
            }
        }
        if let Some(v) = &self.variance_first_order {
            rows.push(("variance_first_order_trace".into(), v.trace()));
        }
        if let Some(dg) = &self.diagnostics {
            rows.extend([
                ("diag_B".into(), dg.b),
                ("diag_C".into(), dg.c),
                ("diag_psi0".into(), dg.psi0),
                ("diag_variance_leading".into(), dg.variance_leading),
                ("diag_variance_topology".into(), dg.variance_topology),
                ("diag_transient".into(), dg.transient),
                ("diag_term_gamma".into(), dg.term_gamma),
                ("diag_term_gamma_3_2".into(), dg.term_gamma_3_2),
                ("diag_term_gamma_2".into(), dg.term_gamma_2),
                ("diag_term_gamma_5_2".into(), dg.term_gamma_5_2),
                ("diag_total".into(), dg.total),
            ]);
        }
        for (name, s) in [("dsgd", &self.schedule_dsgd), ("rr", &self.schedule_rr)] {
            if let Some(s) = s {
                rows.push((format!("schedule_{name}_gamma"), s.gamma));
                rows.push((format!("schedule_{name}_T"), s.iterations));
            }
        }
        rows
    }

    /// Writes the `quantity,value` table followed by the d×d variance block
    /// as `row,col,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["quantity", "value"])?;
        for (q, v) in self.scalar_rows() {
            w.write_record([q, fmt_f64(v)])?;
        }
        if let Some(v) = &self.variance_first_order {
            w.write_record(["variance_first_order", "row", "col", "value"])?;
            for i in 0..v.rows() {
                for j in 0..v.cols() {
                    w.write_record([String::new(), i.to_string(), j.to_string(), fmt_f64(v[(i, j)])])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
