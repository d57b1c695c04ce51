//! Stochastic-gradient noise: additive Gaussian with fixed per-client
//! covariance, or minibatch sampling without replacement (logistic only).
//!
//! Draws are addressed by a [`StreamKey`] and a step index, so two chains
//! given the same key and step see the same noise.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::matops::{sym_eig, Matrix};
use crate::objectives::ObjectiveSet;
use crate::rng::StreamKey;
use crate::stacked::StackedPoint;

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseModel {
    AdditiveGaussian {
        covs: Vec<Matrix>,
        /// `F_k` with `F_k F_kᵀ = C_k`.
        factors: Vec<Matrix>,
    },
    Minibatch {
        batch: usize,
    },
}

/// Monte-Carlo estimate of `E[‖E(Θ*)‖^p]^{1/p}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauEstimate {
    pub p: u32,
    pub estimate: f64,
    pub std_error: f64,
    /// Closed form when available (Gaussian, p = 2).
    pub exact: Option<f64>,
}

impl NoiseModel {
    /// Gaussian noise with one PSD covariance per client.
    pub fn gaussian(covs: Vec<Matrix>) -> Result<Self> {
        let mut factors = Vec::with_capacity(covs.len());
        for c in &covs {
            let spec = sym_eig(c)?;
            let scale = c.max_abs().max(f64::MIN_POSITIVE);
            if spec.min_eigenvalue() < -1e-12 * scale {
                return Err(LabError::NotPositiveSemidefinite {
                    min_eigenvalue: spec.min_eigenvalue(),
                });
            }
            factors.push(spec.reconstruct_with(|l| l.max(0.0).sqrt()));
        }
        Ok(Self::AdditiveGaussian { covs, factors })
    }

    /// `C_k = σ²·I_d` for every client.
    pub fn isotropic(m: usize, d: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(LabError::InvalidParam(format!("σ² must be nonnegative, got {sigma2}")));
        }
        Self::gaussian(vec![Matrix::identity(d).scale(sigma2); m])
    }

    pub fn minibatch(batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(LabError::InvalidParam("batch size must be at least 1".into()));
        }
        Ok(Self::Minibatch { batch })
    }

    /// Checks the model against an objective set.
    pub fn check(&self, obj: &ObjectiveSet) -> Result<()> {
        match self {
            Self::AdditiveGaussian { covs, .. } => {
                if covs.len() != obj.m() {
                    return Err(LabError::ShapeMismatch(format!(
                        "{} noise covariances for {} clients",
                        covs.len(),
                        obj.m()
                    )));
                }
                if covs.iter().any(|c| c.rows() != obj.d() || c.cols() != obj.d()) {
                    return Err(LabError::ShapeMismatch("noise covariance dimension".into()));
                }
                Ok(())
            }
            Self::Minibatch { batch } => {
                let l = obj.as_logistic().ok_or_else(|| {
                    LabError::UnsupportedCombination(
                        "minibatch noise needs logistic objectives".into(),
                    )
                })?;
                if let Some(n) = l.data.iter().map(Vec::len).min() {
                    if *batch > n {
                        return Err(LabError::InvalidParam(format!(
                            "batch size {batch} exceeds the smallest client dataset ({n})"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// True when every draw is zero.
    pub fn is_degenerate(&self, obj: &ObjectiveSet) -> bool {
        match self {
            Self::AdditiveGaussian { covs, .. } => covs.iter().all(|c| c.max_abs() == 0.0),
            Self::Minibatch { batch } => obj
                .as_logistic()
                .is_some_and(|l| l.data.iter().all(|c| c.len() == *batch)),
        }
    }

    /// One draw of the stacked noise `E_{t+1}(Θ)`.
    pub fn sample(
        &self,
        obj: &ObjectiveSet,
        theta: &StackedPoint,
        key: &StreamKey,
        t: u64,
    ) -> Result<StackedPoint> {
        self.check(obj)?;
        if theta.m() != obj.m() || theta.d() != obj.d() {
            return Err(LabError::ShapeMismatch(format!(
                "stacked point is {}x{}, objectives are {}x{}",
                theta.m(),
                theta.d(),
                obj.m(),
                obj.d()
            )));
        }
        let mut out = StackedPoint::zeros(obj.m(), obj.d());
        let mut scratch = NoiseScratch::new(obj.d());
        self.sample_into(obj, theta.as_slice(), key, t, out.as_mut_slice(), &mut scratch);
        Ok(out)
    }

    /// Unchecked draw into `out`; `check` must have passed.
    pub fn sample_into(
        &self,
        obj: &ObjectiveSet,
        theta: &[f64],
        key: &StreamKey,
        t: u64,
        out: &mut [f64],
        scratch: &mut NoiseScratch,
    ) {
        let d = obj.d();
        for k in 0..obj.m() {
            let block = &mut out[k * d..(k + 1) * d];
            let mut rng = key.rng_at(t, k as u64);
            match self {
                Self::AdditiveGaussian { factors, .. } => {
                    for z in scratch.z.iter_mut() {
                        *z = rng.sample(StandardNormal);
                    }
                    let f = &factors[k];
                    for (i, b) in block.iter_mut().enumerate() {
                        *b = f.row(i).iter().zip(&scratch.z).map(|(a, z)| a * z).sum();
                    }
                }
                Self::Minibatch { batch } => {
                    let n = obj.as_logistic().expect("checked").data[k].len();
                    let th = &theta[k * d..(k + 1) * d];
                    obj.grad_local_into(k, th, &mut scratch.full);
                    block.iter_mut().for_each(|b| *b = 0.0);
                    for i in sample(&mut rng, n, *batch) {
                        obj.sample_grad_into(k, i, th, &mut scratch.g);
                        for (b, g) in block.iter_mut().zip(&scratch.g) {
                            *b += g;
                        }
                    }
                    let inv_b = 1.0 / *batch as f64;
                    for (b, f) in block.iter_mut().zip(&scratch.full) {
                        *b = *b * inv_b - f;
                    }
                }
            }
        }
    }

    /// Minibatch gradient `g_k(θ)` realized by the draw at `(key, t)`; used to
    /// check co-coercivity of the stochastic gradient maps.
    pub fn stochastic_gradient(
        &self,
        obj: &ObjectiveSet,
        theta: &StackedPoint,
        key: &StreamKey,
        t: u64,
    ) -> Result<StackedPoint> {
        let noise = self.sample(obj, theta, key, t)?;
        Ok(obj.grad_stacked(theta)?.add(&noise))
    }

    /// Per-client covariance `E[ε^{(k)}(θ)^{⊗2}]`.
    pub fn client_covariance(&self, obj: &ObjectiveSet, k: usize, theta: &[f64]) -> Result<Matrix> {
        self.check(obj)?;
        if k >= obj.m() {
            return Err(LabError::IndexOutOfRange {
                index: k,
                len: obj.m(),
            });
        }
        match self {
            Self::AdditiveGaussian { covs, .. } => Ok(covs[k].clone()),
            Self::Minibatch { batch } => {
                let d = obj.d();
                let n = obj.as_logistic().expect("checked").data[k].len();
                if n == 1 {
                    return Ok(Matrix::zeros(d, d));
                }
                let mut mean = vec![0.0; d];
                obj.grad_local_into(k, theta, &mut mean);
                let mut g = vec![0.0; d];
                let mut s = Matrix::zeros(d, d);
                for i in 0..n {
                    obj.sample_grad_into(k, i, theta, &mut g);
                    for (gi, mi) in g.iter_mut().zip(&mean) {
                        *gi -= mi;
                    }
                    s = &s + &Matrix::outer(&g, &g);
                }
                // finite-population correction for sampling without replacement
                let b = *batch as f64;
                let nf = n as f64;
                let factor = (nf - b) / (b * (nf - 1.0) * nf);
                Ok(s.scale(factor))
            }
        }
    }

    /// `C̄(θ) = (1/m) Σ_k E[ε^{(k)}(θ)^{⊗2}]`.
    pub fn covariance_at(&self, obj: &ObjectiveSet, theta: &[f64]) -> Result<Matrix> {
        let mut acc = Matrix::zeros(obj.d(), obj.d());
        for k in 0..obj.m() {
            acc = &acc + &self.client_covariance(obj, k, theta)?;
        }
        Ok(acc.scale(1.0 / obj.m() as f64))
    }

    /// `(Σ_k tr C_k)^{1/2}` for Gaussian noise.
    pub fn exact_tau2(&self) -> Option<f64> {
        match self {
            Self::AdditiveGaussian { covs, .. } => {
                Some(covs.iter().map(Matrix::trace).sum::<f64>().max(0.0).sqrt())
            }
            Self::Minibatch { .. } => None,
        }
    }

    /// `E[‖ε‖⁴]^{1/4}` for Gaussian noise: with `C = ⊕ C_k`,
    /// `E‖ε‖⁴ = (tr C)² + 2 tr(C²)`.
    pub fn exact_tau4(&self) -> Option<f64> {
        match self {
            Self::AdditiveGaussian { covs, .. } => {
                let tr: f64 = covs.iter().map(Matrix::trace).sum();
                let tr_sq: f64 = covs.iter().map(|c| (c * c).trace()).sum();
                Some((tr * tr + 2.0 * tr_sq).max(0.0).powf(0.25))
            }
            Self::Minibatch { .. } => None,
        }
    }

    /// Monte-Carlo estimate of τ_p at `theta` (normally `Θ*`), with the
    /// delta-method standard error.
    pub fn estimate_tau(
        &self,
        obj: &ObjectiveSet,
        theta: &StackedPoint,
        p: u32,
        n_draws: usize,
        seed: u64,
    ) -> Result<TauEstimate> {
        if p != 2 && p != 4 {
            return Err(LabError::InvalidParam(format!("moment order must be 2 or 4, got {p}")));
        }
        if n_draws < 2 {
            return Err(LabError::InsufficientSamples {
                have: n_draws,
                need: 2,
            });
        }
        self.check(obj)?;
        let key = StreamKey::new(seed, u64::MAX - 1);
        let mut buf = vec![0.0; theta.len()];
        let mut scratch = NoiseScratch::new(obj.d());
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for t in 0..n_draws {
            self.sample_into(obj, theta.as_slice(), &key, t as u64, &mut buf, &mut scratch);
            let n2: f64 = buf.iter().map(|v| v * v).sum();
            let v = n2.powi(p as i32 / 2);
            sum += v;
            sum_sq += v * v;
        }
        let n = n_draws as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        let se_mean = (var / n).sqrt();
        let estimate = mean.powf(1.0 / p as f64);
        // d(x^{1/p})/dx = x^{1/p − 1}/p
        let std_error = if mean > 0.0 {
            se_mean * mean.powf(1.0 / p as f64 - 1.0) / p as f64
        } else {
            0.0
        };
        let exact = match p {
            2 => self.exact_tau2(),
            _ => self.exact_tau4(),
        };
        Ok(TauEstimate {
            p,
            estimate,
            std_error,
            exact,
        })
    }

    /// Moment bounds `(τ₂, τ₄)` at `Θ*`: exact for Gaussian noise, otherwise
    /// estimated from `n_draws` draws.
    pub fn tau_pair(&self, obj: &ObjectiveSet, n_draws: usize, seed: u64) -> Result<(f64, f64)> {
        if let (Some(t2), Some(t4)) = (self.exact_tau2(), self.exact_tau4()) {
            return Ok((t2, t4));
        }
        let star = obj.stacked_optimum();
        let t2 = self.estimate_tau(obj, &star, 2, n_draws, seed)?.estimate;
        let t4 = self.estimate_tau(obj, &star, 4, n_draws, seed)?.estimate;
        Ok((t2, t4.max(t2)))
    }

    /// Smoothness constant of the stochastic gradient maps. For Gaussian noise
    /// it is the objective's L; each per-sample logistic map is
    /// `(λ + ¼‖x‖²)`-smooth, which bounds the minibatch maps.
    pub fn cocoercivity_constant(&self, obj: &ObjectiveSet) -> f64 {
        match (self, obj.as_logistic()) {
            (Self::Minibatch { .. }, Some(l)) => {
                let max_sq = l
                    .data
                    .iter()
                    .flatten()
                    .map(|x| x.iter().map(|v| v * v).sum::<f64>())
                    .fold(0.0, f64::max);
                l.lambda_reg + 0.25 * max_sq
            }
            _ => obj.smoothness(),
        }
    }
}

/// Reusable buffers for [`NoiseModel::sample_into`].
#[derive(Clone, Debug)]
pub struct NoiseScratch {
    z: Vec<f64>,
    g: Vec<f64>,
    full: Vec<f64>,
}

impl NoiseScratch {
    pub fn new(d: usize) -> Self {
        Self {
            z: vec![0.0; d],
            g: vec![0.0; d],
            full: vec![0.0; d],
        }
    }
}
