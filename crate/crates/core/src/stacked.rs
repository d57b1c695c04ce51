//! Stacked parameter vectors `Θ = (θ₁ᵀ, …, θ_mᵀ)ᵀ ∈ R^{m·d}`.

use crate::error::{LabError, Result};

/// A point in `R^{m·d}` stored block-contiguously: client `k` owns
/// `data[k·d .. (k+1)·d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedPoint {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl StackedPoint {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            data: vec![0.0; m * d],
        }
    }

    pub fn from_vec(m: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * d {
            return Err(LabError::ShapeMismatch(format!(
                "{} values for {m} blocks of dimension {d}",
                data.len()
            )));
        }
        Ok(Self { m, d, data })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let m = blocks.len();
        let d = blocks.first().map_or(0, Vec::len);
        if blocks.iter().any(|b| b.len() != d) {
            return Err(LabError::ShapeMismatch("blocks of unequal length".into()));
        }
        Ok(Self {
            m,
            d,
            data: blocks.concat(),
        })
    }

    /// `1_m ⊗ θ`.
    pub fn replicate(theta: &[f64], m: usize) -> Self {
        Self {
            m,
            d: theta.len(),
            data: theta.repeat(m),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d.max(1)).take(self.m)
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.m != other.m || self.d != other.d {
            return Err(LabError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.m, self.d, other.m, other.d
            )));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖self − other‖`.
    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            m: self.m,
            d: self.d,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!((self.m, self.d), (other.m, other.d));
        Self {
            m: self.m,
            d: self.d,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Average of the blocks, `(1/m)Σ_k θ_k`.
    pub fn block_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for b in self.blocks() {
            for (acc, v) in mean.iter_mut().zip(b) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.m.max(1) as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }

    /// `(1/m) Σ_k ‖θ_k − θ‖`.
    pub fn mean_block_distance(&self, theta: &[f64]) -> f64 {
        let total: f64 = self
            .blocks()
            .map(|b| {
                b.iter()
                    .zip(theta)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / self.m.max(1) as f64
    }

    /// Consensus projection `PΘ`: every block replaced by the block average.
    pub fn consensus(&self) -> Self {
        Self::replicate(&self.block_mean(), self.m)
    }

    /// Disagreement projection `QΘ = Θ − PΘ`.
    pub fn disagreement(&self) -> Self {
        let mean = self.block_mean();
        let mut out = self.clone();
        for k in 0..self.m {
            for (v, c) in out.block_mut(k).iter_mut().zip(&mean) {
                *v -= c;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        let x = StackedPoint::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(x.consensus().as_slice(), &[1.0, 1.0]);
        assert_eq!(x.disagreement().as_slice(), &[0.0, 0.0]);

        let x = StackedPoint::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(x.consensus().as_slice(), &[0.0, 0.0]);
        assert_eq!(x.disagreement().as_slice(), &[1.0, -1.0]);

        let x = StackedPoint::from_vec(2, 1, vec![3.0, 1.0]).unwrap();
        assert_eq!(x.consensus().as_slice(), &[2.0, 2.0]);
        assert_eq!(x.disagreement().as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn shape_checks() {
        assert!(StackedPoint::from_vec(2, 2, vec![0.0; 3]).is_err());
        let a = StackedPoint::zeros(2, 2);
        let b = StackedPoint::zeros(4, 1);
        assert!(a.check_shape(&b).is_err());
    }

    proptest! {
        #[test]
        fn projectors_are_complementary(
            m in 1usize..6,
            d in 1usize..4,
            seed in proptest::collection::vec(-10.0f64..10.0, 24),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(m * d).cloned().collect();
            let x = StackedPoint::from_vec(m, d, data).unwrap();
            let p = x.consensus();
            let q = x.disagreement();
            // P + Q = I
            prop_assert!(p.add(&q).distance(&x) <= 1e-12 * (1.0 + x.norm()));
            // P² = P, Q² = Q, PQ = 0
            prop_assert!(p.consensus().distance(&p) <= 1e-12 * (1.0 + x.norm()));
            prop_assert!(q.disagreement().distance(&q) <= 1e-12 * (1.0 + x.norm()));
            prop_assert!(q.consensus().norm() <= 1e-12 * (1.0 + x.norm()));
            // Pythagoras
            let lhs = p.norm_sq() + q.norm_sq();
            prop_assert!((lhs - x.norm_sq()).abs() <= 1e-12 * (1.0 + x.norm_sq()));
        }
    }
}
