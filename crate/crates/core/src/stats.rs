//! Turning trajectories into numbers: stationary moments with standard
//! errors, log-log order fits, linear speed-up checks and contraction rates.

use std::io::Write;

use crate::dynamics::{fixed_point, run, Algorithm, FixedPointOptions, RunConfig, RunRecord};
use crate::error::{LabError, Result};
use crate::io::fmt_f64;
use crate::matops::Matrix;
use crate::noise::NoiseModel;
use crate::objectives::ObjectiveSet;
use crate::stacked::StackedPoint;
use crate::topology::CommMatrix;

/// Minimum number of retained samples for moment estimates.
pub const MIN_EFFECTIVE_SAMPLES: u64 = 100;

/// Stationary mean and Θ_det-centered second moment, with standard errors
/// computed from the spread of per-replicate time averages.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryMoments {
    pub m: usize,
    pub d: usize,
    /// Estimate of Θ_sto.
    pub mean: StackedPoint,
    pub mean_stderr: Vec<f64>,
    /// Estimate of `Σ_θ = E[(Θ − Θ_det)^{⊗2}]`, row-major md×md.
    pub second: Vec<f64>,
    pub second_stderr: Vec<f64>,
    pub n_effective: u64,
    pub replicates: usize,
}

impl StationaryMoments {
    fn n(&self) -> usize {
        self.m * self.d
    }

    /// `[Σ_θ]_{k,l}` as a d×d matrix.
    pub fn block(&self, k: usize, l: usize) -> Matrix {
        self.extract(&self.second, k, l)
    }

    pub fn block_stderr(&self, k: usize, l: usize) -> Matrix {
        self.extract(&self.second_stderr, k, l)
    }

    fn extract(&self, src: &[f64], k: usize, l: usize) -> Matrix {
        let (d, n) = (self.d, self.n());
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] = src[(k * d + i) * n + l * d + j];
            }
        }
        out
    }

    /// `(1/m) Σ_k tr [Σ_θ]_{k,k}` and its standard error (summed
    /// conservatively as if the entries were perfectly correlated).
    pub fn mean_diagonal_trace(&self) -> (f64, f64) {
        let n = self.n();
        let mut tr = 0.0;
        let mut se = 0.0;
        for i in 0..n {
            tr += self.second[i * n + i];
            se += self.second_stderr[i * n + i];
        }
        (tr / self.m as f64, se / self.m as f64)
    }

    /// Writes `k,l,i,j,value,stderr` for every block entry.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "l", "i", "j", "value", "stderr"])?;
        let (d, n) = (self.d, self.n());
        for k in 0..self.m {
            for l in 0..self.m {
                for i in 0..d {
                    for j in 0..d {
                        let idx = (k * d + i) * n + l * d + j;
                        w.write_record([
                            k.to_string(),
                            l.to_string(),
                            i.to_string(),
                            j.to_string(),
                            fmt_f64(self.second[idx]),
                            fmt_f64(self.second_stderr[idx]),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_and_stderr(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let r = samples.len() as f64;
    let n = samples[0].len();
    let mut mean = vec![0.0; n];
    for s in samples {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v / r;
        }
    }
    let stderr = if samples.len() > 1 {
        (0..n)
            .map(|i| {
                let var = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (r - 1.0);
                (var / r).sqrt()
            })
            .collect()
    } else {
        vec![f64::NAN; n]
    };
    (mean, stderr)
}

/// Moments of the retained iterates, centered at `theta_det`. Each replicate
/// contributes its time average; standard errors come from the spread across
/// replicates (NaN with a single replicate).
pub fn stationary_moments(record: &RunRecord, theta_det: &StackedPoint) -> Result<StationaryMoments> {
    let first = record
        .replicates
        .first()
        .ok_or(LabError::InsufficientSamples { have: 0, need: MIN_EFFECTIVE_SAMPLES as usize })?;
    theta_det.check_shape(&first.moments.center)?;
    let n_effective: u64 = record.replicates.iter().map(|r| r.moments.count).sum();
    if n_effective < MIN_EFFECTIVE_SAMPLES || record.replicates.iter().any(|r| r.moments.count == 0) {
        return Err(LabError::InsufficientSamples {
            have: n_effective as usize,
            need: MIN_EFFECTIVE_SAMPLES as usize,
        });
    }
    let (m, d) = (theta_det.m(), theta_det.d());
    let n = m * d;
    let mut means = Vec::with_capacity(record.replicates.len());
    let mut seconds = Vec::with_capacity(record.replicates.len());
    for rep in &record.replicates {
        // recenter from the accumulation center c to Θ_det: δ = Θ_det − c
        let delta: Vec<f64> = theta_det
            .as_slice()
            .iter()
            .zip(rep.moments.center.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let md = rep.moments.mean_deviation();
        let mut s2 = rep.moments.second_moment();
        if delta.iter().any(|&v| v != 0.0) {
            for i in 0..n {
                for j in 0..n {
                    s2[i * n + j] += -md[i] * delta[j] - delta[i] * md[j] + delta[i] * delta[j];
                }
            }
        }
        means.push(md.iter().zip(rep.moments.center.as_slice()).map(|(a, c)| a + c).collect::<Vec<f64>>());
        seconds.push(s2);
    }
    let (mean, mean_stderr) = mean_and_stderr(&means);
    let (second, second_stderr) = mean_and_stderr(&seconds);
    Ok(StationaryMoments {
        m,
        d,
        mean: StackedPoint::from_vec(m, d, mean)?,
        mean_stderr,
        second,
        second_stderr,
        n_effective,
        replicates: record.replicates.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `log y` on `log x`.
pub fn order_fit(xs: &[f64], ys: &[f64]) -> Result<OrderFit> {
    if xs.len() != ys.len() {
        return Err(LabError::ShapeMismatch(format!("{} x values, {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(LabError::TooFewPoints { have: xs.len(), need: 3 });
    }
    if let Some(&bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0)) {
        return Err(LabError::NonPositive(bad));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::InvalidParam("x values must be distinct".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(OrderFit { slope, intercept, r2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeedupStatus {
    Fitted,
    /// All traces are zero (no noise); nothing to fit.
    SkippedZeroNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupReport {
    /// `(m, mean diagonal-block trace, standard error)`.
    pub rows: Vec<(usize, f64, f64)>,
    pub fit: Option<OrderFit>,
    pub status: SpeedupStatus,
}

impl SpeedupReport {
    /// Fits log(trace) against log(m).
    pub fn from_rows(rows: Vec<(usize, f64, f64)>) -> Result<Self> {
        if rows.iter().all(|r| r.1 == 0.0) {
            return Ok(Self {
                rows,
                fit: None,
                status: SpeedupStatus::SkippedZeroNoise,
            });
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let fit = order_fit(&xs, &ys)?;
        Ok(Self {
            rows,
            fit: Some(fit),
            status: SpeedupStatus::Fitted,
        })
    }
}

/// Estimates the stationary mean diagonal-block trace for each m by running
/// DSGD from Θ_det on the problem returned by `build(m)`, then fits the
/// slope against m. `config.algorithm` is forced to DSGD.
pub fn speedup_check<F>(m_list: &[usize], config: &RunConfig, build: F) -> Result<SpeedupReport>
where
    F: Fn(usize) -> Result<(CommMatrix, ObjectiveSet, NoiseModel)>,
{
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let (w, obj, noise) = build(m)?;
        if noise.is_degenerate(&obj) {
            rows.push((m, 0.0, 0.0));
            continue;
        }
        let det = fixed_point(&w, &obj, config.gamma, FixedPointOptions::default())?.theta;
        let mut cfg = config.clone();
        cfg.algorithm = Algorithm::Dsgd;
        let rec = run(&w, &obj, Some(&noise), &cfg, &det, Some(&det))?;
        let mom = stationary_moments(&rec, &det)?;
        let (tr, se) = mom.mean_diagonal_trace();
        rows.push((m, tr, se));
    }
    SpeedupReport::from_rows(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionEstimate {
    /// `D_{t+1}/D_t` until collapse.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// First t with `D_t = 0`, after which ratios are undefined.
    pub collapsed_at: Option<usize>,
}

/// Per-step ratios of a squared-distance trajectory.
pub fn contraction_estimate(sq_dists: &[f64]) -> ContractionEstimate {
    let mut ratios = Vec::new();
    let mut collapsed_at = None;
    for (t, win) in sq_dists.windows(2).enumerate() {
        if win[0] <= 0.0 {
            collapsed_at = Some(t);
            break;
        }
        ratios.push(win[1] / win[0]);
    }
    if collapsed_at.is_none() && sq_dists.last().is_some_and(|&v| v <= 0.0) {
        collapsed_at = Some(sq_dists.len() - 1);
    }
    let max_ratio = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ContractionEstimate {
        ratios,
        max_ratio,
        collapsed_at,
    }
}

/// Largest excess of `D_t` over the envelope `factor^t D_0`, in units of the
/// standard error at t (0 where the trajectory is below the envelope).
pub fn envelope_excess(sq_dists: &[f64], std_error: &[f64], factor: f64) -> f64 {
    let d0 = sq_dists.first().copied().unwrap_or(0.0);
    sq_dists
        .iter()
        .zip(std_error)
        .enumerate()
        .map(|(t, (&d, &se))| {
            let env = factor.powi(t as i32) * d0;
            if d <= env {
                0.0
            } else if se > 0.0 {
                (d - env) / se
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}
