//! Gossip matrices and their spectral profile.
//!
//! A [`CommMatrix`] is a validated symmetric stochastic matrix `W` with
//! `λ₂(W) < 1`. Validation happens once at construction; downstream formulas
//! divide by spectral gaps so an invalid `W` never escapes a constructor.

use std::sync::OnceLock;

use crate::error::{LabError, Result};
use crate::matops::{pinv_sym, sym_eig, Matrix, PINV_TOL};
use crate::stacked::StackedPoint;

const STOCHASTIC_TOL: f64 = 1e-12;
const CONNECTIVITY_TOL: f64 = 1e-12;

/// Default Laplacian step for rings: equal self and neighbor weights.
pub const DEFAULT_RING_STEP: f64 = 1.0 / 3.0;

/// Spectral quantities of a gossip matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralProfile {
    /// Second largest eigenvalue λ₂(W).
    pub lambda2: f64,
    /// Smallest eigenvalue λ_min(W).
    pub lambda_min: f64,
    /// `max(|λ₂|, |λ_min|)`, the contraction factor on the disagreement space.
    pub rho: f64,
    /// `2‖(I − W)†W‖₂`.
    pub big_lambda: f64,
    /// Spectral gap `1 − λ₂`.
    pub gap: f64,
}

impl SpectralProfile {
    fn single_client() -> Self {
        Self {
            lambda2: 0.0,
            lambda_min: 0.0,
            rho: 0.0,
            big_lambda: 0.0,
            gap: 1.0,
        }
    }

    /// `ρ²/(1 − ρ²)`, infinite when `ρ = 1`.
    pub fn rho_ratio(&self) -> f64 {
        let r2 = self.rho * self.rho;
        if r2 >= 1.0 {
            f64::INFINITY
        } else {
            r2 / (1.0 - r2)
        }
    }
}

/// Validated gossip matrix `W`.
#[derive(Debug)]
pub struct CommMatrix {
    w: Matrix,
    spectral: SpectralProfile,
    gossip: OnceLock<Matrix>,
}

impl Clone for CommMatrix {
    fn clone(&self) -> Self {
        Self {
            w: self.w.clone(),
            spectral: self.spectral,
            gossip: OnceLock::new(),
        }
    }
}

impl PartialEq for CommMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.w == other.w
    }
}

impl CommMatrix {
    /// Validates `w` (symmetric, stochastic, nonnegative, connected).
    pub fn new(w: Matrix) -> Result<Self> {
        let m = w.rows();
        if m == 0 || !w.is_square() {
            return Err(LabError::InvalidSize(format!(
                "gossip matrix must be square and non-empty, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let asym = w.asymmetry();
        if asym > STOCHASTIC_TOL {
            return Err(LabError::NotSymmetric { asymmetry: asym });
        }
        for i in 0..m {
            let row = w.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(LabError::NotStochastic(format!("row {i} sums to {sum}")));
            }
            if let Some(v) = row.iter().find(|&&v| v < -STOCHASTIC_TOL) {
                return Err(LabError::InvalidStep(format!(
                    "negative entry {v} in row {i}"
                )));
            }
        }
        let spectral = compute_profile(&w)?;
        Ok(Self {
            w,
            spectral,
            gossip: OnceLock::new(),
        })
    }

    /// `W = (1/m)·11ᵀ`.
    pub fn fully_connected(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(LabError::InvalidSize("m must be at least 1".into()));
        }
        let v = 1.0 / m as f64;
        Self::new(Matrix::from_row_slice(m, m, &vec![v; m * m])?)
    }

    /// `W = I − t·L` for the unweighted cycle on `m ≥ 3` nodes.
    pub fn ring(m: usize, t: f64) -> Result<Self> {
        if m < 3 {
            return Err(LabError::InvalidSize(format!("ring needs m >= 3, got {m}")));
        }
        if !(t > 0.0) || 1.0 - 2.0 * t < 0.0 {
            return Err(LabError::InvalidStep(format!(
                "ring step must lie in (0, 1/2], got {t}"
            )));
        }
        let mut lap = Matrix::zeros(m, m);
        for i in 0..m {
            add_edge(&mut lap, i, (i + 1) % m, 1.0);
        }
        Self::from_laplacian(&lap, t)
    }

    /// `k` complete clusters of size `m/k`, consecutive clusters joined by a
    /// single bridge edge of weight `bridge_weight` (cyclically for `k > 2`).
    pub fn clusters(m: usize, k: usize, t_intra: f64, bridge_weight: f64) -> Result<Self> {
        if k == 0 || m % k != 0 {
            return Err(LabError::InvalidPartition(format!(
                "{k} clusters do not divide {m} clients"
            )));
        }
        let size = m / k;
        if size < 2 {
            return Err(LabError::InvalidPartition(format!(
                "clusters need at least 2 clients, got {size}"
            )));
        }
        if !(bridge_weight > 0.0) {
            return Err(LabError::InvalidParam(format!(
                "bridge weight must be positive, got {bridge_weight}"
            )));
        }
        let mut lap = Matrix::zeros(m, m);
        for c in 0..k {
            let base = c * size;
            for i in 0..size {
                for j in (i + 1)..size {
                    add_edge(&mut lap, base + i, base + j, 1.0);
                }
            }
        }
        let bridges = match k {
            1 => 0,
            2 => 1,
            _ => k,
        };
        for c in 0..bridges {
            let from = c * size + size - 1;
            let to = ((c + 1) % k) * size;
            add_edge(&mut lap, from, to, bridge_weight);
        }
        Self::from_laplacian(&lap, t_intra)
    }

    /// `W = I − t·L` for a weighted graph Laplacian `L`.
    pub fn from_laplacian(lap: &Matrix, t: f64) -> Result<Self> {
        check_laplacian(lap)?;
        if !(t > 0.0) {
            return Err(LabError::InvalidStep(format!("t must be positive, got {t}")));
        }
        let m = lap.rows();
        let w = &Matrix::identity(m) - &lap.scale(t);
        for i in 0..m {
            for j in 0..m {
                if w[(i, j)] < -STOCHASTIC_TOL {
                    return Err(LabError::InvalidStep(format!(
                        "t = {t} makes W[{i},{j}] = {} negative",
                        w[(i, j)]
                    )));
                }
            }
        }
        // Row sums of I − tL are exactly 1 up to rounding of L's row sums.
        let mut w = w;
        for i in 0..m {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::new(w)
    }

    /// Builds `W` from a plain-text edge list (`i j weight` per line,
    /// 0-indexed, `#` comments). `m` defaults to the largest index plus one.
    pub fn from_edge_list(text: &str, m: Option<usize>, t: f64) -> Result<Self> {
        let lap = parse_edge_list(text, m)?;
        Self::from_laplacian(&lap, t)
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn spectral_profile(&self) -> &SpectralProfile {
        &self.spectral
    }

    /// `G = (I − W)†W`, the m×m operator; callers lift it block-wise.
    pub fn gossip_operator(&self) -> &Matrix {
        self.gossip.get_or_init(|| {
            let m = self.m();
            let i_minus_w = &Matrix::identity(m) - &self.w;
            let pinv = pinv_sym(&i_minus_w, PINV_TOL).expect("validated W is symmetric");
            &pinv * &self.w
        })
    }

    /// `(W ⊗ I_d)·x`.
    pub fn apply(&self, x: &StackedPoint) -> StackedPoint {
        apply_block_operator(&self.w, x)
    }

    /// `(W ⊗ I_d)·x` written into `out`.
    pub fn apply_into(&self, x: &[f64], d: usize, out: &mut [f64]) {
        apply_block_operator_into(&self.w, x, d, out);
    }

    /// True when `W = (1/m)11ᵀ` to rounding.
    pub fn is_fully_connected(&self) -> bool {
        let v = 1.0 / self.m() as f64;
        self.w.as_slice().iter().all(|x| (x - v).abs() < 1e-14)
    }
}

/// `(M ⊗ I_d)·x` for an m×m operator `M`.
pub fn apply_block_operator(op: &Matrix, x: &StackedPoint) -> StackedPoint {
    let mut out = StackedPoint::zeros(x.m(), x.d());
    apply_block_operator_into(op, x.as_slice(), x.d(), out.as_mut_slice());
    out
}

pub fn apply_block_operator_into(op: &Matrix, x: &[f64], d: usize, out: &mut [f64]) {
    let m = op.rows();
    debug_assert_eq!(x.len(), m * d);
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..m {
        let row = op.row(k);
        let dst = &mut out[k * d..(k + 1) * d];
        for (l, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(&x[l * d..(l + 1) * d]) {
                *o += w * v;
            }
        }
    }
}

pub fn project_consensus(x: &StackedPoint) -> StackedPoint {
    x.consensus()
}

pub fn project_disagreement(x: &StackedPoint) -> StackedPoint {
    x.disagreement()
}

fn add_edge(lap: &mut Matrix, i: usize, j: usize, w: f64) {
    lap[(i, j)] -= w;
    lap[(j, i)] -= w;
    lap[(i, i)] += w;
    lap[(j, j)] += w;
}

fn check_laplacian(lap: &Matrix) -> Result<()> {
    if !lap.is_square() || lap.rows() == 0 {
        return Err(LabError::NotLaplacian("not a non-empty square matrix".into()));
    }
    let scale = lap.max_abs().max(1.0);
    if lap.asymmetry() > 1e-12 * scale {
        return Err(LabError::NotLaplacian("not symmetric".into()));
    }
    let m = lap.rows();
    for i in 0..m {
        let sum: f64 = lap.row(i).iter().sum();
        if sum.abs() > 1e-10 * scale {
            return Err(LabError::NotLaplacian(format!("row {i} sums to {sum}")));
        }
        for j in 0..m {
            if i != j && lap[(i, j)] > 0.0 {
                return Err(LabError::NotLaplacian(format!(
                    "positive off-diagonal entry at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

const SNAP_TOL: f64 = 1e-13;

fn compute_profile(w: &Matrix) -> Result<SpectralProfile> {
    let m = w.rows();
    if m == 1 {
        return Ok(SpectralProfile::single_client());
    }
    let mut spec = sym_eig(w)?;
    // eigenvalues within rounding of 0 or 1 are reported exactly
    for l in spec.eigenvalues.iter_mut() {
        if l.abs() <= SNAP_TOL {
            *l = 0.0;
        } else if (*l - 1.0).abs() <= SNAP_TOL {
            *l = 1.0;
        }
    }
    let lambda2 = spec.eigenvalues[1];
    if lambda2 >= 1.0 - CONNECTIVITY_TOL {
        return Err(LabError::Disconnected { lambda2 });
    }
    let lambda_min = spec.min_eigenvalue();
    let rho = lambda2.abs().max(lambda_min.abs());
    let big_lambda = 2.0
        * spec.eigenvalues[1..]
            .iter()
            .map(|&l| (l / (1.0 - l)).abs())
            .fold(0.0, f64::max);
    Ok(SpectralProfile {
        lambda2,
        lambda_min,
        rho,
        big_lambda,
        gap: 1.0 - lambda2,
    })
}

/// Parses an edge list into a weighted Laplacian.
pub fn parse_edge_list(text: &str, m: Option<usize>) -> Result<Matrix> {
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(LabError::Parse(format!(
                "line {}: expected `i j [weight]`",
                lineno + 1
            )));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| LabError::Parse(format!("line {}: bad index {s:?}", lineno + 1)))
        };
        let i = parse_idx(fields[0])?;
        let j = parse_idx(fields[1])?;
        let weight = match fields.get(2) {
            Some(s) => s
                .parse::<f64>()
                .map_err(|_| LabError::Parse(format!("line {}: bad weight {s:?}", lineno + 1)))?,
            None => 1.0,
        };
        if i == j {
            return Err(LabError::Parse(format!("line {}: self loop", lineno + 1)));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(LabError::NotLaplacian(format!(
                "line {}: edge weight must be positive, got {weight}",
                lineno + 1
            )));
        }
        edges.push((i, j, weight));
    }
    let inferred = edges.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
    let m = m.unwrap_or(inferred);
    if m == 0 {
        return Err(LabError::InvalidSize("edge list defines no nodes".into()));
    }
    if inferred > m {
        return Err(LabError::IndexOutOfRange {
            index: inferred - 1,
            len: m,
        });
    }
    let mut lap = Matrix::zeros(m, m);
    for (i, j, w) in edges {
        add_edge(&mut lap, i, j, w);
    }
    Ok(lap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn check_valid(w: &CommMatrix) {
        let m = w.m();
        let mat = w.matrix();
        for i in 0..m {
            let s: f64 = mat.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..m {
                assert_eq!(mat[(i, j)], mat[(j, i)]);
                assert!(mat[(i, j)] >= -1e-12);
            }
        }
        assert!(w.spectral_profile().lambda2 < 1.0);
    }

    #[test]
    fn fully_connected_examples() {
        let w = CommMatrix::fully_connected(2).unwrap();
        assert_eq!(w.matrix().as_slice(), &[0.5; 4]);
        let w = CommMatrix::fully_connected(3).unwrap();
        let p = w.spectral_profile();
        assert_abs_diff_eq!(p.lambda2, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.big_lambda, 0.0, epsilon = 1e-13);
        assert!(w.gossip_operator().max_abs() < 1e-13);

        let w = CommMatrix::fully_connected(1).unwrap();
        assert_eq!(w.matrix().as_slice(), &[1.0]);
        assert_eq!(*w.spectral_profile(), SpectralProfile::single_client());
        assert_eq!(w.gossip_operator().as_slice(), &[0.0]);

        assert!(matches!(CommMatrix::fully_connected(0), Err(LabError::InvalidSize(_))));
    }

    #[test]
    fn fully_connected_profile_m4() {
        let p = *CommMatrix::fully_connected(4).unwrap().spectral_profile();
        assert_abs_diff_eq!(p.lambda2, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.lambda_min, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.rho, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.big_lambda, 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(p.gap, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn four_ring() {
        let w = CommMatrix::ring(4, 0.25).unwrap();
        let mat = w.matrix();
        assert_eq!(mat[(0, 0)], 0.5);
        assert_eq!(mat[(0, 1)], 0.25);
        assert_eq!(mat[(0, 3)], 0.25);
        assert_eq!(mat[(0, 2)], 0.0);
        let p = w.spectral_profile();
        assert_abs_diff_eq!(p.lambda2, 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(p.lambda_min, 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(p.rho, 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(p.big_lambda, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.gap, 0.5, epsilon = 1e-13);

        // G has eigenvalues λ/(1−λ) on the Fourier modes: {0, 1, 1, 0}
        let g = w.gossip_operator();
        let s = sym_eig(&g.symmetrize()).unwrap();
        for (a, b) in s.eigenvalues.iter().zip([1.0, 1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(g.matvec(&[1.0; 4]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn three_ring_is_complete() {
        let w = CommMatrix::ring(3, 1.0 / 3.0).unwrap();
        for v in w.matrix().as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(w.spectral_profile().lambda2, 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(w.spectral_profile().big_lambda, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ring_errors() {
        assert!(matches!(CommMatrix::ring(4, 0.6), Err(LabError::InvalidStep(_))));
        assert!(matches!(CommMatrix::ring(2, 0.25), Err(LabError::InvalidSize(_))));
        assert!(matches!(CommMatrix::ring(5, 0.0), Err(LabError::InvalidStep(_))));
    }

    #[test]
    fn cluster_examples() {
        let w = CommMatrix::clusters(4, 2, 0.2, 1.0).unwrap();
        check_valid(&w);
        let w = CommMatrix::clusters(12, 4, 0.1, 0.5).unwrap();
        check_valid(&w);
        assert!(w.spectral_profile().rho > 0.0);
        assert!(matches!(
            CommMatrix::clusters(5, 2, 0.1, 1.0),
            Err(LabError::InvalidPartition(_))
        ));
        assert!(matches!(
            CommMatrix::clusters(4, 4, 0.1, 1.0),
            Err(LabError::InvalidPartition(_))
        ));
        // size-6 cliques have degree 5, so t = 0.5 drives the diagonal negative
        assert!(matches!(
            CommMatrix::clusters(12, 2, 0.5, 1.0),
            Err(LabError::InvalidStep(_))
        ));
    }

    #[test]
    fn laplacian_constructor() {
        let lap = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let w = CommMatrix::from_laplacian(&lap, 0.5).unwrap();
        assert_eq!(w.matrix().as_slice(), &[0.5; 4]);

        let mut two_components = Matrix::zeros(4, 4);
        add_edge(&mut two_components, 0, 1, 1.0);
        add_edge(&mut two_components, 2, 3, 1.0);
        let err = CommMatrix::from_laplacian(&two_components, 0.25).unwrap_err();
        match err {
            LabError::Disconnected { lambda2 } => assert_abs_diff_eq!(lambda2, 1.0, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }

        let mut ring = Matrix::zeros(4, 4);
        for i in 0..4 {
            add_edge(&mut ring, i, (i + 1) % 4, 1.0);
        }
        let a = CommMatrix::from_laplacian(&ring, 0.25).unwrap();
        let b = CommMatrix::ring(4, 0.25).unwrap();
        assert_eq!(a, b);

        let bad = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(
            CommMatrix::from_laplacian(&bad, 0.1),
            Err(LabError::NotLaplacian(_))
        ));
        assert!(matches!(
            CommMatrix::from_laplacian(&lap, 0.0),
            Err(LabError::InvalidStep(_))
        ));
    }

    #[test]
    fn identity_is_disconnected() {
        assert!(matches!(
            CommMatrix::new(Matrix::identity(3)),
            Err(LabError::Disconnected { .. })
        ));
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# 4-ring\n0 1 1\n1 2\n2 3 1.0 # trailing\n\n3 0 1\n";
        let w = CommMatrix::from_edge_list(text, None, 0.25).unwrap();
        assert_eq!(w, CommMatrix::ring(4, 0.25).unwrap());

        assert!(CommMatrix::from_edge_list("0 1 1\n2 3 1\n", None, 0.25).is_err());
        assert!(matches!(parse_edge_list("0 x 1", None), Err(LabError::Parse(_))));
        assert!(matches!(parse_edge_list("0 0 1", None), Err(LabError::Parse(_))));
        assert!(matches!(
            parse_edge_list("0 1 -1", None),
            Err(LabError::NotLaplacian(_))
        ));
        assert!(parse_edge_list("0 5 1", Some(3)).is_err());
    }

    #[test]
    fn mixing_preserves_block_average() {
        let w = CommMatrix::ring(5, 0.3).unwrap();
        let x = StackedPoint::from_vec(5, 2, (0..10).map(|i| (i * i) as f64 - 3.0).collect())
            .unwrap();
        let before = project_consensus(&x);
        let after = project_consensus(&w.apply(&x));
        assert!(before.distance(&after) < 1e-12);
    }

    proptest! {
        #[test]
        fn constructors_are_valid(m in 3usize..12, t in 0.01f64..0.5) {
            let w = CommMatrix::ring(m, t).unwrap();
            check_valid(&w);
            let p = w.spectral_profile();
            let g_norm = crate::matops::spectral_norm(w.gossip_operator()).unwrap();
            prop_assert!((p.big_lambda - 2.0 * g_norm).abs() <= 1e-9 * (1.0 + p.big_lambda));
        }

        #[test]
        fn cluster_constructors_are_valid(
            k in 1usize..5,
            size in 2usize..5,
            t in 0.01f64..0.2,
            bridge in 0.1f64..2.0,
        ) {
            let w = CommMatrix::clusters(k * size, k, t, bridge).unwrap();
            check_valid(&w);
            let p = w.spectral_profile();
            let g_norm = crate::matops::spectral_norm(w.gossip_operator()).unwrap();
            prop_assert!((p.big_lambda - 2.0 * g_norm).abs() <= 1e-9 * (1.0 + p.big_lambda));
        }

        #[test]
        fn mixing_preserves_consensus(
            m in 3usize..8,
            t in 0.05f64..0.5,
            vals in proptest::collection::vec(-5.0f64..5.0, 16),
        ) {
            let w = CommMatrix::ring(m, t).unwrap();
            let data: Vec<f64> = vals.iter().cycle().take(m * 2).cloned().collect();
            let x = StackedPoint::from_vec(m, 2, data).unwrap();
            prop_assert!(project_consensus(&w.apply(&x)).distance(&project_consensus(&x)) < 1e-12);
        }
    }
}
