//! Soft dynamic time warping.
//!
//! The forward recursion is
//! `R(i,j) = d(x_i, y_j) + softmin_γ(R(i-1,j-1), R(i-1,j), R(i,j-1))`
//! with `softmin_γ(v) = -γ log Σ exp(-v/γ)`. The gradient with respect to
//! `x` comes from the backward recursion over expected path occupancy `E`,
//! which is also returned as the soft alignment matrix.
//!
//! Classic DTW and exhaustive path enumeration live alongside as oracles.
//! All dynamic programs run in `f64`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise frame cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    #[default]
    SquaredEuclidean,
    /// Squared Euclidean divided by the channel count.
    MeanSquared,
}

impl CostMetric {
    fn scale(self, d: usize) -> f64 {
        match self {
            CostMetric::SquaredEuclidean => 1.0,
            CostMetric::MeanSquared => 1.0 / d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftDtwConfig {
    /// Smoothing temperature; 0 selects the hard minimum.
    pub gamma: f64,
    pub metric: CostMetric,
    /// Divide the divergence (and gradient) by `T_x + T_y`.
    pub normalize_by_length: bool,
}

impl Default for SoftDtwConfig {
    fn default() -> Self {
        Self { gamma: 1.0, metric: CostMetric::SquaredEuclidean, normalize_by_length: false }
    }
}

impl SoftDtwConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub value: f64,
    /// d value / d x, same shape as `x`.
    pub grad_x: Array2<f64>,
    /// Expected occupancy of each cell by the alignment path, `T_x x T_y`.
    pub soft_alignment: Array2<f64>,
}

/// Smoothed minimum `-γ log Σ exp(-v_i/γ)`; the hard minimum when `γ == 0`.
pub fn soft_min(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("soft_min of an empty list".into()));
    }
    if gamma < 0.0 {
        return Err(Error::Argument(format!("gamma must be non-negative, got {gamma}")));
    }
    Ok(soft_min_unchecked(values, gamma))
}

fn soft_min_unchecked(values: &[f64], gamma: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if gamma == 0.0 || m == f64::INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|&v| (-(v - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

fn check_pair(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Argument("soft-DTW needs non-empty sequences".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("channel mismatch: {} vs {}", x.ncols(), y.ncols())));
    }
    Ok(())
}

/// Pairwise cost matrix `D[i,j] = scale * ||x_i - y_j||^2`.
pub fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>, metric: CostMetric) -> Array2<f64> {
    let scale = metric.scale(x.ncols());
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        let d: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
        d * scale
    })
}

/// Forward table with a padded border: `R` is `(n+1) x (m+1)`, `R[0,0] = 0`.
fn forward_table(cost: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let (n, m) = cost.dim();
    let mut r = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let prev = [r[[i - 1, j - 1]], r[[i - 1, j]], r[[i, j - 1]]];
            r[[i, j]] = cost[[i - 1, j - 1]] + soft_min_unchecked(&prev, gamma);
        }
    }
    r
}

/// Expected occupancy `E` (`n x m`) from the backward recursion.
fn occupancy(cost: &Array2<f64>, r: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let (n, m) = cost.dim();
    if gamma == 0.0 {
        return hard_path_occupancy(r, n, m);
    }
    // Work on (n+2) x (m+2) tables indexed 1..=n, 1..=m like the forward pass.
    let mut rr = Array2::from_elem((n + 2, m + 2), f64::NEG_INFINITY);
    let mut dd = Array2::zeros((n + 2, m + 2));
    for i in 1..=n {
        for j in 1..=m {
            rr[[i, j]] = r[[i, j]];
            dd[[i, j]] = cost[[i - 1, j - 1]];
        }
    }
    rr[[n + 1, m + 1]] = r[[n, m]];
    let mut e = Array2::zeros((n + 2, m + 2));
    e[[n + 1, m + 1]] = 1.0;
    for j in (1..=m).rev() {
        for i in (1..=n).rev() {
            let here = rr[[i, j]];
            let a = ((rr[[i + 1, j]] - here - dd[[i + 1, j]]) / gamma).exp();
            let b = ((rr[[i, j + 1]] - here - dd[[i, j + 1]]) / gamma).exp();
            let c = ((rr[[i + 1, j + 1]] - here - dd[[i + 1, j + 1]]) / gamma).exp();
            e[[i, j]] = e[[i + 1, j]] * a + e[[i, j + 1]] * b + e[[i + 1, j + 1]] * c;
        }
    }
    e.slice(ndarray::s![1..=n, 1..=m]).to_owned()
}

/// Indicator of one optimal hard path, ties broken toward the diagonal.
fn hard_path_occupancy(r: &Array2<f64>, n: usize, m: usize) -> Array2<f64> {
    let mut e = Array2::zeros((n, m));
    let (mut i, mut j) = (n, m);
    loop {
        e[[i - 1, j - 1]] = 1.0;
        if i == 1 && j == 1 {
            break;
        }
        let diag = r[[i - 1, j - 1]];
        let up = r[[i - 1, j]];
        let left = r[[i, j - 1]];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    e
}

fn length_scale(cfg: &SoftDtwConfig, n: usize, m: usize) -> f64 {
    if cfg.normalize_by_length {
        1.0 / (n + m) as f64
    } else {
        1.0
    }
}

/// Divergence value only (no backward pass).
pub fn soft_dtw_value(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &SoftDtwConfig) -> Result<f64> {
    check_pair(&x, &y)?;
    check_gamma(cfg.gamma)?;
    let cost = cost_matrix(x, y, cfg.metric);
    let r = forward_table(&cost, cfg.gamma);
    Ok(r[[x.nrows(), y.nrows()]] * length_scale(cfg, x.nrows(), y.nrows()))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Argument(format!("gamma must be finite and non-negative, got {gamma}")));
    }
    Ok(())
}

/// Soft-DTW divergence with its exact gradient with respect to `x`.
pub fn soft_dtw(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &SoftDtwConfig) -> Result<AlignmentResult> {
    check_pair(&x, &y)?;
    check_gamma(cfg.gamma)?;
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());
    let cost = cost_matrix(x, y, cfg.metric);
    let r = forward_table(&cost, cfg.gamma);
    let e = occupancy(&cost, &r, cfg.gamma);
    let scale = length_scale(cfg, n, m);
    let metric_scale = cfg.metric.scale(d);
    let mut grad_x = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..m {
            let w = e[[i, j]];
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_x[[i, k]] += w * 2.0 * (x[[i, k]] - y[[j, k]]) * metric_scale * scale;
            }
        }
    }
    Ok(AlignmentResult { value: r[[n, m]] * scale, grad_x, soft_alignment: e })
}

/// Hard-minimum DTW under the same cost metric.
pub fn classic_dtw(x: ArrayView2<f64>, y: ArrayView2<f64>, metric: CostMetric) -> Result<f64> {
    check_pair(&x, &y)?;
    let cost = cost_matrix(x, y, metric);
    let (n, m) = cost.dim();
    let mut r = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            r[[i, j]] = cost[[i - 1, j - 1]] + r[[i - 1, j - 1]].min(r[[i - 1, j]]).min(r[[i, j - 1]]);
        }
    }
    Ok(r[[n, m]])
}

/// Longest sequence the enumeration oracle accepts.
pub const BRUTE_FORCE_MAX_LEN: usize = 8;

/// `-γ log Σ_paths exp(-cost(path)/γ)` by explicit enumeration of every
/// monotone alignment path. Exponential in length; guarded to `T <= 8`.
pub fn brute_force_soft_dtw(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    gamma: f64,
    metric: CostMetric,
) -> Result<f64> {
    check_pair(&x, &y)?;
    check_gamma(gamma)?;
    if x.nrows() > BRUTE_FORCE_MAX_LEN || y.nrows() > BRUTE_FORCE_MAX_LEN {
        return Err(Error::Argument(format!(
            "path enumeration limited to length {BRUTE_FORCE_MAX_LEN}, got {}x{}",
            x.nrows(),
            y.nrows()
        )));
    }
    let cost = cost_matrix(x, y, metric);
    let mut path_costs = Vec::new();
    enumerate_paths(&cost, 0, 0, cost[[0, 0]], &mut path_costs);
    Ok(soft_min_unchecked(&path_costs, gamma))
}

fn enumerate_paths(cost: &Array2<f64>, i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
    let (n, m) = cost.dim();
    if i == n - 1 && j == m - 1 {
        out.push(acc);
        return;
    }
    if i + 1 < n {
        enumerate_paths(cost, i + 1, j, acc + cost[[i + 1, j]], out);
    }
    if j + 1 < m {
        enumerate_paths(cost, i, j + 1, acc + cost[[i, j + 1]], out);
    }
    if i + 1 < n && j + 1 < m {
        enumerate_paths(cost, i + 1, j + 1, acc + cost[[i + 1, j + 1]], out);
    }
}

/// Maximum relative error between the analytic gradient and central finite
/// differences of the value with step `h`.
///
/// Relative error per entry is `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn soft_dtw_grad_check(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &SoftDtwConfig, h: f64) -> Result<f64> {
    let analytic = soft_dtw(x, y, cfg)?.grad_x;
    let mut probe = x.to_owned();
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = soft_dtw_value(probe.view(), y, cfg)?;
        probe[idx] = orig - h;
        let down = soft_dtw_value(probe.view(), y, cfg)?;
        probe[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = analytic[idx];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
