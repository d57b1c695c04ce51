//! Local objectives `f_k`, their derivatives, the global optimum `θ*`, the
//! heterogeneity `ζ*` and the regularity constants `μ`, `L`, `K₃`.
//!
//! Two families are supported:
//!
//! * quadratics `f_k(θ) = ½ (θ − θ*_k)ᵀ A_k (θ − θ*_k)` with `A_k ≻ 0`;
//! * unlabeled ridge-logistic losses
//!   `f_k(θ) = (1/n) Σ_i log(1 + exp⟨θ, x_{k,i}⟩) + (λ/2)‖θ‖²`.
//!
//! The logistic constants are conservative analytic bounds: `μ = λ`,
//! `L = λ + ¼·max_k λ_max((1/n)Σ x xᵀ)` and `K₃ = max|σ''|·max‖x‖³`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::io::fmt_f64;
use crate::matops::{solve, sym_eig, Lu, Matrix};
use crate::rng;
use crate::stacked::StackedPoint;

/// `max_z |σ'(z)(1 − 2σ(z))| = 1/(6√3)`.
pub const LOGISTIC_THIRD_CONST: f64 = 0.096_225_044_864_937_63;

const NEWTON_MAX_ITER: usize = 200;
/// Default gradient-norm tolerance for the global optimum.
pub const OPTIMUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct QuadraticSpec {
    /// `A_k`, one SPD d×d matrix per client.
    pub a: Vec<Matrix>,
    /// Local minimizers `θ*_k`.
    pub local_minimizers: Vec<Vec<f64>>,
    abar: Matrix,
}

impl QuadraticSpec {
    /// `Ā = (1/m) Σ A_k`.
    pub fn abar(&self) -> &Matrix {
        &self.abar
    }

    /// Stacked local minimizers `Θ*_loc`.
    pub fn stacked_local_minimizers(&self) -> StackedPoint {
        StackedPoint::from_blocks(&self.local_minimizers).expect("validated at construction")
    }
}

#[derive(Clone, Debug)]
pub struct LogisticSpec {
    /// `data[k][i]` is the i-th vector of client k.
    pub data: Vec<Vec<Vec<f64>>>,
    pub lambda_reg: f64,
}

#[derive(Clone, Debug)]
pub enum ObjectiveKind {
    Quadratic(QuadraticSpec),
    Logistic(LogisticSpec),
}

/// The m local objectives together with their cached global quantities.
#[derive(Clone, Debug)]
pub struct ObjectiveSet {
    m: usize,
    d: usize,
    kind: ObjectiveKind,
    theta_star: Vec<f64>,
    mu: f64,
    smoothness: f64,
    k3: f64,
    zeta_star: f64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ObjectiveSet {
    /// Quadratic objectives from per-client curvature matrices and minimizers.
    pub fn quadratic(a: Vec<Matrix>, local_minimizers: Vec<Vec<f64>>) -> Result<Self> {
        let m = a.len();
        if m == 0 || local_minimizers.len() != m {
            return Err(LabError::InvalidParam(format!(
                "{m} curvature matrices for {} minimizers",
                local_minimizers.len()
            )));
        }
        let d = local_minimizers[0].len();
        if d == 0 {
            return Err(LabError::InvalidParam("dimension must be at least 1".into()));
        }
        let mut mu = f64::INFINITY;
        let mut smoothness: f64 = 0.0;
        let mut abar = Matrix::zeros(d, d);
        for (k, (ak, tk)) in a.iter().zip(&local_minimizers).enumerate() {
            if ak.rows() != d || ak.cols() != d || tk.len() != d {
                return Err(LabError::ShapeMismatch(format!("client {k} has inconsistent shapes")));
            }
            let spec = sym_eig(ak)?;
            if spec.min_eigenvalue() <= 0.0 {
                return Err(LabError::NotPositiveDefinite {
                    min_eigenvalue: spec.min_eigenvalue(),
                });
            }
            mu = mu.min(spec.min_eigenvalue());
            smoothness = smoothness.max(spec.max_eigenvalue());
            abar = &abar + ak;
        }
        let abar = abar.scale(1.0 / m as f64);
        let spec = QuadraticSpec {
            a,
            local_minimizers,
            abar,
        };
        let mut obj = Self {
            m,
            d,
            kind: ObjectiveKind::Quadratic(spec),
            theta_star: vec![0.0; d],
            mu,
            smoothness,
            k3: 0.0,
            zeta_star: 0.0,
        };
        obj.finish(OPTIMUM_TOL)?;
        Ok(obj)
    }

    /// Quadratics with `A_k = a_k·I`.
    pub fn isotropic_quadratic(curvatures: &[f64], local_minimizers: Vec<Vec<f64>>) -> Result<Self> {
        let d = local_minimizers.first().map_or(0, Vec::len);
        let a = curvatures
            .iter()
            .map(|&c| Matrix::identity(d).scale(c))
            .collect();
        Self::quadratic(a, local_minimizers)
    }

    /// Ridge-logistic objectives over per-client datasets.
    pub fn logistic(data: Vec<Vec<Vec<f64>>>, lambda_reg: f64) -> Result<Self> {
        let m = data.len();
        if m == 0 {
            return Err(LabError::InvalidParam("need at least one client".into()));
        }
        if !(lambda_reg > 0.0) {
            return Err(LabError::InvalidParam(format!(
                "ridge weight must be positive, got {lambda_reg}"
            )));
        }
        let d = data
            .iter()
            .find_map(|c| c.first().map(Vec::len))
            .ok_or_else(|| LabError::InvalidParam("empty datasets".into()))?;
        if d == 0 {
            return Err(LabError::InvalidParam("dimension must be at least 1".into()));
        }
        let mut max_cov_eig: f64 = 0.0;
        let mut max_norm: f64 = 0.0;
        for (k, client) in data.iter().enumerate() {
            if client.is_empty() {
                return Err(LabError::InvalidParam(format!("client {k} has no data")));
            }
            let mut cov = Matrix::zeros(d, d);
            for x in client {
                if x.len() != d {
                    return Err(LabError::ShapeMismatch(format!(
                        "client {k} has a vector of length {}",
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::InvalidParam(format!("client {k} has non-finite data")));
                }
                cov = &cov + &Matrix::outer(x, x);
                max_norm = max_norm.max(dot(x, x).sqrt());
            }
            let cov = cov.scale(1.0 / client.len() as f64);
            max_cov_eig = max_cov_eig.max(sym_eig(&cov)?.max_eigenvalue());
        }
        let mut obj = Self {
            m,
            d,
            kind: ObjectiveKind::Logistic(LogisticSpec { data, lambda_reg }),
            theta_star: vec![0.0; d],
            mu: lambda_reg,
            smoothness: lambda_reg + 0.25 * max_cov_eig,
            k3: LOGISTIC_THIRD_CONST * max_norm.powi(3),
            zeta_star: 0.0,
        };
        obj.finish(OPTIMUM_TOL)?;
        Ok(obj)
    }

    fn finish(&mut self, tol: f64) -> Result<()> {
        self.theta_star = self.solve_global_optimum(tol)?;
        self.zeta_star = self.heterogeneity().sqrt();
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticSpec> {
        match &self.kind {
            ObjectiveKind::Quadratic(q) => Some(q),
            ObjectiveKind::Logistic(_) => None,
        }
    }

    pub fn as_logistic(&self) -> Option<&LogisticSpec> {
        match &self.kind {
            ObjectiveKind::Logistic(l) => Some(l),
            ObjectiveKind::Quadratic(_) => None,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        self.as_quadratic().is_some()
    }

    /// Global optimum `θ*`.
    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    /// `Θ* = 1_m ⊗ θ*`.
    pub fn stacked_optimum(&self) -> StackedPoint {
        StackedPoint::replicate(&self.theta_star, self.m)
    }

    /// Strong convexity constant μ.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Smoothness constant L.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Third-derivative bound K₃.
    pub fn k3(&self) -> f64 {
        self.k3
    }

    /// Heterogeneity ζ* (not squared).
    pub fn zeta_star(&self) -> f64 {
        self.zeta_star
    }

    fn check_client(&self, k: usize) -> Result<()> {
        if k >= self.m {
            return Err(LabError::IndexOutOfRange {
                index: k,
                len: self.m,
            });
        }
        Ok(())
    }

    pub fn value_local(&self, k: usize, theta: &[f64]) -> Result<f64> {
        self.check_client(k)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic(q) => {
                let diff: Vec<f64> = theta.iter().zip(&q.local_minimizers[k]).map(|(a, b)| a - b).collect();
                0.5 * dot(&diff, &q.a[k].matvec(&diff))
            }
            ObjectiveKind::Logistic(l) => {
                let client = &l.data[k];
                let loss: f64 = client.iter().map(|x| softplus(dot(theta, x))).sum();
                loss / client.len() as f64 + 0.5 * l.lambda_reg * dot(theta, theta)
            }
        })
    }

    /// `f(θ) = (1/m) Σ f_k(θ)`.
    pub fn value_global(&self, theta: &[f64]) -> f64 {
        (0..self.m)
            .map(|k| self.value_local(k, theta).expect("k in range"))
            .sum::<f64>()
            / self.m as f64
    }

    pub fn grad_local(&self, k: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_client(k)?;
        let mut out = vec![0.0; self.d];
        self.grad_local_into(k, theta, &mut out);
        Ok(out)
    }

    /// Unchecked gradient into a caller-provided buffer.
    pub fn grad_local_into(&self, k: usize, theta: &[f64], out: &mut [f64]) {
        match &self.kind {
            ObjectiveKind::Quadratic(q) => {
                let a = &q.a[k];
                let tk = &q.local_minimizers[k];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = a
                        .row(i)
                        .iter()
                        .zip(theta.iter().zip(tk))
                        .map(|(aij, (t, s))| aij * (t - s))
                        .sum();
                }
            }
            ObjectiveKind::Logistic(l) => {
                let client = &l.data[k];
                let inv_n = 1.0 / client.len() as f64;
                for (o, t) in out.iter_mut().zip(theta) {
                    *o = l.lambda_reg * t;
                }
                for x in client {
                    let s = sigmoid(dot(theta, x)) * inv_n;
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o += s * xi;
                    }
                }
            }
        }
    }

    /// Gradient of the i-th sample's term `log(1+e^{⟨θ,x⟩}) + (λ/2)‖θ‖²`.
    pub(crate) fn sample_grad_into(&self, k: usize, i: usize, theta: &[f64], out: &mut [f64]) {
        if let ObjectiveKind::Logistic(l) = &self.kind {
            let x = &l.data[k][i];
            let s = sigmoid(dot(theta, x));
            for ((o, xi), t) in out.iter_mut().zip(x).zip(theta) {
                *o = s * xi + l.lambda_reg * t;
            }
        }
    }

    pub fn hess_local(&self, k: usize, theta: &[f64]) -> Result<Matrix> {
        self.check_client(k)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic(q) => q.a[k].clone(),
            ObjectiveKind::Logistic(l) => {
                let client = &l.data[k];
                let inv_n = 1.0 / client.len() as f64;
                let mut h = Matrix::identity(self.d).scale(l.lambda_reg);
                for x in client {
                    let s = sigmoid(dot(theta, x));
                    let w = s * (1.0 - s) * inv_n;
                    for i in 0..self.d {
                        for j in 0..self.d {
                            h[(i, j)] += w * x[i] * x[j];
                        }
                    }
                }
                h
            }
        })
    }

    /// `∇³f_k(θ)·u^{⊗2}`.
    pub fn third_contract_local(&self, k: usize, theta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_client(k)?;
        let uu = Matrix::outer(u, u);
        Ok(self.third_contract_client(k, theta, &uu))
    }

    /// `Σ_{b,c} ∂³f_k/∂θ_a∂θ_b∂θ_c · M_bc`.
    fn third_contract_client(&self, k: usize, theta: &[f64], mat: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        if let ObjectiveKind::Logistic(l) = &self.kind {
            let client = &l.data[k];
            let inv_n = 1.0 / client.len() as f64;
            for x in client {
                let s = sigmoid(dot(theta, x));
                let third = s * (1.0 - s) * (1.0 - 2.0 * s);
                let quad = dot(x, &mat.matvec(x));
                for (o, xi) in out.iter_mut().zip(x) {
                    *o += third * quad * inv_n * xi;
                }
            }
        }
        out
    }

    /// Mean third derivative contracted against a d×d matrix:
    /// `T_a = Σ_{b,c} (∇³f(θ))_{abc} M_bc` with `f = (1/m)Σ f_k`.
    pub fn third_contract_matrix(&self, theta: &[f64], mat: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for k in 0..self.m {
            for (o, v) in out.iter_mut().zip(self.third_contract_client(k, theta, mat)) {
                *o += v / self.m as f64;
            }
        }
        out
    }

    /// Finite-difference version of [`Self::third_contract_matrix`]: the
    /// a-th entry is the directional derivative of `tr(∇²f(θ)·M)` along `e_a`.
    pub fn third_contract_matrix_fd(&self, theta: &[f64], mat: &Matrix) -> Vec<f64> {
        let scale = theta.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        let h = f64::EPSILON.cbrt() * scale;
        let contract = |t: &[f64]| -> f64 {
            let h = self.mean_hessian(t);
            (0..self.d)
                .map(|i| (0..self.d).map(|j| h[(i, j)] * mat[(i, j)]).sum::<f64>())
                .sum()
        };
        (0..self.d)
            .map(|a| {
                let mut plus = theta.to_vec();
                let mut minus = theta.to_vec();
                plus[a] += h;
                minus[a] -= h;
                (contract(&plus) - contract(&minus)) / (2.0 * h)
            })
            .collect()
    }

    /// `(1/m) Σ ∇²f_k(θ)`.
    pub fn mean_hessian(&self, theta: &[f64]) -> Matrix {
        let mut acc = Matrix::zeros(self.d, self.d);
        for k in 0..self.m {
            acc = &acc + &self.hess_local(k, theta).expect("k in range");
        }
        acc.scale(1.0 / self.m as f64)
    }

    /// `(1/m) Σ ∇f_k(θ)`.
    pub fn mean_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        let mut buf = vec![0.0; self.d];
        for k in 0..self.m {
            self.grad_local_into(k, theta, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        acc.iter_mut().for_each(|v| *v /= self.m as f64);
        acc
    }

    /// Stacked gradient `∇F(Θ)`.
    pub fn grad_stacked(&self, theta: &StackedPoint) -> Result<StackedPoint> {
        if theta.m() != self.m || theta.d() != self.d {
            return Err(LabError::ShapeMismatch(format!(
                "stacked point is {}x{}, objectives are {}x{}",
                theta.m(),
                theta.d(),
                self.m,
                self.d
            )));
        }
        let mut out = StackedPoint::zeros(self.m, self.d);
        self.grad_stacked_into(theta.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    pub fn grad_stacked_into(&self, theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        for k in 0..self.m {
            self.grad_local_into(k, &theta[k * d..(k + 1) * d], &mut out[k * d..(k + 1) * d]);
        }
    }

    /// Solves `(1/m) Σ ∇f_k(θ) = 0`: a linear solve for quadratics, damped
    /// Newton with backtracking on `f` otherwise.
    pub fn solve_global_optimum(&self, tol: f64) -> Result<Vec<f64>> {
        match &self.kind {
            ObjectiveKind::Quadratic(q) => {
                let mut rhs = vec![0.0; self.d];
                for (a, t) in q.a.iter().zip(&q.local_minimizers) {
                    for (r, v) in rhs.iter_mut().zip(a.matvec(t)) {
                        *r += v / self.m as f64;
                    }
                }
                solve(&q.abar, &rhs)
            }
            ObjectiveKind::Logistic(_) => {
                let mut theta = vec![0.0; self.d];
                for _ in 0..NEWTON_MAX_ITER {
                    let g = self.mean_gradient(&theta);
                    let gnorm = dot(&g, &g).sqrt();
                    if gnorm <= tol {
                        return Ok(theta);
                    }
                    let h = self.mean_hessian(&theta);
                    let step = Lu::new(&h)?.solve(&g);
                    let f0 = self.value_global(&theta);
                    let slope = dot(&g, &step);
                    let mut alpha = 1.0;
                    let mut next: Vec<f64>;
                    loop {
                        next = theta.iter().zip(&step).map(|(t, s)| t - alpha * s).collect();
                        // near the optimum the decrease in f drops below its rounding
                        // error, so a shrinking gradient also accepts the step
                        let armijo = self.value_global(&next) <= f0 - 1e-4 * alpha * slope;
                        let g_next = self.mean_gradient(&next);
                        let shrinks = dot(&g_next, &g_next).sqrt() <= 0.5 * gnorm;
                        if armijo || shrinks || alpha < 1e-10 {
                            break;
                        }
                        alpha *= 0.5;
                    }
                    theta = next;
                }
                let g = self.mean_gradient(&theta);
                if dot(&g, &g).sqrt() <= tol {
                    Ok(theta)
                } else {
                    Err(LabError::NoConvergence {
                        iterations: NEWTON_MAX_ITER,
                    })
                }
            }
        }
    }

    /// `ζ*² = Σ_k ‖∇f_k(θ*)‖²`.
    pub fn heterogeneity(&self) -> f64 {
        let mut buf = vec![0.0; self.d];
        (0..self.m)
            .map(|k| {
                self.grad_local_into(k, &self.theta_star, &mut buf);
                dot(&buf, &buf)
            })
            .sum()
    }

    /// Writes the logistic dataset as `client,index,x_0..x_{d-1}`.
    pub fn write_dataset_csv<W: Write>(&self, out: W) -> Result<()> {
        let l = self.as_logistic().ok_or_else(|| {
            LabError::UnsupportedCombination("dataset export needs logistic objectives".into())
        })?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client".to_string(), "index".to_string()];
        header.extend((0..self.d).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for (k, client) in l.data.iter().enumerate() {
            for (i, x) in client.iter().enumerate() {
                let mut rec = vec![k.to_string(), i.to_string()];
                rec.extend(x.iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`Self::write_dataset_csv`].
    pub fn read_dataset_csv<R: Read>(input: R, lambda_reg: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let d = r.headers()?.len().saturating_sub(2);
        let mut data: Vec<Vec<Vec<f64>>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| LabError::Parse(format!("bad number {s:?}")))
            };
            let k: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| LabError::Parse(format!("bad client id {:?}", &rec[0])))?;
            let x = (0..d).map(|j| parse(&rec[j + 2])).collect::<Result<Vec<_>>>()?;
            if data.len() <= k {
                data.resize_with(k + 1, Vec::new);
            }
            data[k].push(x);
        }
        Self::logistic(data, lambda_reg)
    }
}

/// Mean of client `k` in the synthetic generators: `spread·(cos 2πk/m, sin 2πk/m, 0, …)`.
pub fn circle_point(k: usize, m: usize, d: usize, spread: f64) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
    let mut v = vec![0.0; d];
    v[0] = spread * angle.cos();
    if d > 1 {
        v[1] = spread * angle.sin();
    }
    v
}

/// Synthetic logistic problem: client k draws n i.i.d. `N(μ_k, I)` vectors
/// with `μ_k` on a circle of radius `heterogeneity_spread`.
pub fn generate_logistic_problem(
    m: usize,
    n: usize,
    d: usize,
    heterogeneity_spread: f64,
    lambda_reg: f64,
    seed: u64,
) -> Result<ObjectiveSet> {
    if m == 0 || n == 0 || d == 0 {
        return Err(LabError::InvalidParam(format!(
            "m, n, d must be positive (got {m}, {n}, {d})"
        )));
    }
    if !(lambda_reg > 0.0) || !heterogeneity_spread.is_finite() {
        return Err(LabError::InvalidParam(format!(
            "invalid λ = {lambda_reg} or spread = {heterogeneity_spread}"
        )));
    }
    let data = (0..m)
        .map(|k| {
            let mean = circle_point(k, m, d, heterogeneity_spread);
            let mut rng = rng::seeded(seed, k as u64);
            (0..n)
                .map(|_| {
                    mean.iter()
                        .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();
    ObjectiveSet::logistic(data, lambda_reg)
}

/// Synthetic quadratic problem: `A_k = Q_k diag(λ) Q_kᵀ` with eigenvalues
/// uniform in `[eig_min, eig_max]` and random rotations, minimizers on a
/// circle of radius `spread`. With `identical_curvature` every client shares
/// client 0's matrix.
pub fn generate_quadratic_problem(
    m: usize,
    d: usize,
    spread: f64,
    eig_min: f64,
    eig_max: f64,
    identical_curvature: bool,
    seed: u64,
) -> Result<ObjectiveSet> {
    if m == 0 || d == 0 {
        return Err(LabError::InvalidParam(format!("m, d must be positive (got {m}, {d})")));
    }
    if !(eig_min > 0.0) || eig_max < eig_min {
        return Err(LabError::InvalidParam(format!(
            "eigenvalue range [{eig_min}, {eig_max}] is not positive"
        )));
    }
    let a: Vec<Matrix> = (0..m)
        .map(|k| {
            let src = if identical_curvature { 0 } else { k };
            random_spd(d, eig_min, eig_max, &mut rng::seeded(seed, 1_000_000 + src as u64))
        })
        .collect();
    let minimizers = (0..m).map(|k| circle_point(k, m, d, spread)).collect();
    ObjectiveSet::quadratic(a, minimizers)
}

/// Random SPD matrix with spectrum in `[lo, hi]`.
pub fn random_spd<R: Rng>(d: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix {
    let q = random_orthogonal(d, rng);
    let eigs: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let scaled = &q * &Matrix::from_diag(&eigs);
    (&scaled * &q.transpose()).symmetrize()
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let p = dot(&v, c);
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    let mut q = Matrix::zeros(d, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            q[(i, j)] = *v;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_pair(a: [f64; 2], minima: [f64; 2]) -> ObjectiveSet {
        ObjectiveSet::isotropic_quadratic(&a, vec![vec![minima[0]], vec![minima[1]]]).unwrap()
    }

    fn toy_logistic() -> ObjectiveSet {
        generate_logistic_problem(3, 8, 2, 1.5, 0.1, 11).unwrap()
    }

    #[test]
    fn quadratic_derivatives() {
        let obj = ObjectiveSet::isotropic_quadratic(&[2.0], vec![vec![1.0]]).unwrap();
        assert_eq!(obj.grad_local(0, &[0.0]).unwrap(), vec![-2.0]);
        assert_eq!(obj.hess_local(0, &[0.0]).unwrap().as_slice(), &[2.0]);
        assert_eq!(obj.third_contract_local(0, &[0.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(obj.k3(), 0.0);
    }

    #[test]
    fn logistic_derivatives_at_origin() {
        let obj = ObjectiveSet::logistic(vec![vec![vec![1.0, 0.0]]], 0.1).unwrap();
        let g = obj.grad_local(0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-15);
        let h = obj.hess_local(0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 0.35, epsilon = 1e-15);
        assert_abs_diff_eq!(h[(1, 1)], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(h[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn index_out_of_range() {
        let obj = scalar_pair([1.0, 1.0], [1.0, -1.0]);
        assert!(matches!(
            obj.grad_local(2, &[0.0]),
            Err(LabError::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(obj.hess_local(5, &[0.0]).is_err());
    }

    #[test]
    fn stacked_gradient() {
        let obj = generate_quadratic_problem(3, 2, 1.0, 0.5, 2.0, false, 3).unwrap();
        let q = obj.as_quadratic().unwrap();
        let at_loc = obj.grad_stacked(&q.stacked_local_minimizers()).unwrap();
        assert!(at_loc.norm() < 1e-14);

        let theta = StackedPoint::from_vec(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let g = obj.grad_stacked(&theta).unwrap();
        for k in 0..3 {
            let diff: Vec<f64> = theta
                .block(k)
                .iter()
                .zip(&q.local_minimizers[k])
                .map(|(a, b)| a - b)
                .collect();
            let expected = q.a[k].matvec(&diff);
            for (x, y) in g.block(k).iter().zip(expected) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-14);
            }
        }
        assert!(obj.grad_stacked(&StackedPoint::zeros(2, 2)).is_err());

        let homo = generate_quadratic_problem(4, 2, 0.0, 0.5, 2.0, false, 3).unwrap();
        assert!(homo.grad_stacked(&homo.stacked_optimum()).unwrap().norm() < 1e-14);
    }

    #[test]
    fn global_optimum_examples() {
        assert_abs_diff_eq!(scalar_pair([1.0, 1.0], [1.0, -1.0]).theta_star()[0], 0.0);
        assert_abs_diff_eq!(
            scalar_pair([1.0, 3.0], [0.0, 4.0]).theta_star()[0],
            3.0,
            epsilon = 1e-14
        );
        let obj = ObjectiveSet::logistic(vec![vec![vec![0.0, 0.0]; 3]; 2], 1.0).unwrap();
        assert_eq!(obj.theta_star(), &[0.0, 0.0]);
    }

    #[test]
    fn heterogeneity_examples() {
        let homo = ObjectiveSet::isotropic_quadratic(&[2.0, 2.0], vec![vec![0.5], vec![0.5]]).unwrap();
        assert_abs_diff_eq!(homo.heterogeneity(), 0.0, epsilon = 1e-28);

        let obj = scalar_pair([1.0, 1.0], [1.0, -1.0]);
        assert_abs_diff_eq!(obj.heterogeneity(), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(obj.zeta_star(), 2f64.sqrt(), epsilon = 1e-14);

        let obj2 = scalar_pair([1.0, 1.0], [2.0, -2.0]);
        assert_abs_diff_eq!(obj2.heterogeneity(), 4.0 * obj.heterogeneity(), epsilon = 1e-13);
    }

    #[test]
    fn quadratic_optimum_formula() {
        let obj = generate_quadratic_problem(5, 3, 2.0, 0.2, 3.0, false, 9).unwrap();
        let g = obj.mean_gradient(obj.theta_star());
        assert!(dot(&g, &g).sqrt() <= 1e-12);
        let q = obj.as_quadratic().unwrap();
        let mut rhs = vec![0.0; 3];
        for (a, t) in q.a.iter().zip(&q.local_minimizers) {
            for (r, v) in rhs.iter_mut().zip(a.matvec(t)) {
                *r += v / 5.0;
            }
        }
        let inv = crate::matops::inverse(q.abar()).unwrap();
        for (x, y) in inv.matvec(&rhs).iter().zip(obj.theta_star()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn logistic_optimum_is_stationary() {
        let obj = toy_logistic();
        let g = obj.mean_gradient(obj.theta_star());
        assert!(dot(&g, &g).sqrt() <= OPTIMUM_TOL);
    }

    #[test]
    fn generator_contracts() {
        let a = generate_logistic_problem(4, 5, 3, 2.0, 0.1, 42).unwrap();
        let b = generate_logistic_problem(4, 5, 3, 2.0, 0.1, 42).unwrap();
        let (la, lb) = (a.as_logistic().unwrap(), b.as_logistic().unwrap());
        assert_eq!(la.data, lb.data);
        let c = generate_logistic_problem(4, 5, 3, 2.0, 0.1, 43).unwrap();
        assert_ne!(la.data, c.as_logistic().unwrap().data);

        assert!(generate_logistic_problem(0, 5, 3, 2.0, 0.1, 1).is_err());
        assert!(generate_logistic_problem(2, 5, 3, 2.0, 0.0, 1).is_err());

        assert_eq!(circle_point(0, 4, 3, 0.0), vec![0.0; 3]);
        assert_eq!(circle_point(3, 4, 3, 0.0), vec![0.0; 3]);
    }

    #[test]
    fn spread_increases_heterogeneity() {
        let mut wins = 0;
        for seed in 0..10 {
            let flat = generate_logistic_problem(4, 50, 2, 0.0, 0.1, seed).unwrap();
            let wide = generate_logistic_problem(4, 50, 2, 5.0, 0.1, seed).unwrap();
            if wide.heterogeneity() > flat.heterogeneity() {
                wins += 1;
            }
        }
        assert_eq!(wins, 10);
    }

    #[test]
    fn dataset_csv_roundtrip_is_exact() {
        let obj = toy_logistic();
        let mut buf = Vec::new();
        obj.write_dataset_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client,index,x_0,x_1\n"));
        let back = ObjectiveSet::read_dataset_csv(&buf[..], 0.1).unwrap();
        assert_eq!(back.as_logistic().unwrap().data, obj.as_logistic().unwrap().data);
        assert!(scalar_pair([1.0, 1.0], [0.0, 1.0]).write_dataset_csv(Vec::new()).is_err());
    }
}
