//! Drift energy across depth and the Laplacian smoothing that lowers it.
//!
//! Layer updates are stacked as rows `u_1..u_L` of an [`UpdateStack`]. With a
//! depth Laplacian `L`, the drift energy is `E(U) = sum_ij L_ij <u_i, u_j>`,
//! which for a chain is `sum_l |u_{l+1} - u_l|^2`. A smoothing step
//! `U <- U - eta (L (x) I) U` is a gradient step on `E`, and for
//! `0 < eta < 1/lambda_max` it satisfies
//!
//! `E(U+) <= E(U) - eta (1 - eta lambda_max) |(L (x) I) U|^2`.
//!
//! The Kronecker product is never materialised: `(L (x) I) U` is just `L U`
//! with `U` viewed as an `L x F` matrix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{lambda_max, symmetric_eigenvalues, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
use crate::matrix::Matrix;

/// Rows are the vectorised per-layer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStack {
    rows: Matrix,
}

impl UpdateStack {
    pub fn new(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::Domain(format!(
                "an update stack needs at least 2 layers, got {}",
                rows.rows()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite { op: "update stack" });
        }
        Ok(Self { rows })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let slices: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        Self::new(Matrix::stack_rows(&slices)?)
    }

    /// Flattens each update matrix row-major.
    pub fn from_updates(updates: &[Matrix]) -> Result<Self> {
        let slices: Vec<&[f64]> = updates.iter().map(Matrix::data).collect();
        Self::new(Matrix::stack_rows(&slices)?)
    }

    pub fn layers(&self) -> usize {
        self.rows.rows()
    }

    pub fn width(&self) -> usize {
        self.rows.cols()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        self.rows.row(l)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows.scale(c),
        }
    }

    /// Depth-mean `(1/L) sum_l u_l`.
    pub fn mean(&self) -> Vec<f64> {
        let l = self.layers() as f64;
        (0..self.width())
            .map(|j| (0..self.layers()).map(|i| self.rows.get(i, j)).sum::<f64>() / l)
            .collect()
    }

    /// `(max_l |u_l - mean|, sqrt(sum_l |u_l - mean|^2))`.
    pub fn distance_to_mean(&self) -> (f64, f64) {
        let mean = self.mean();
        let mut max_row: f64 = 0.0;
        let mut total = 0.0;
        for l in 0..self.layers() {
            let sq: f64 = self
                .layer(l)
                .iter()
                .zip(&mean)
                .map(|(a, m)| (a - m) * (a - m))
                .sum();
            max_row = max_row.max(sq.sqrt());
            total += sq;
        }
        (max_row, total.sqrt())
    }
}

fn check_lap(u: &UpdateStack, lap: &Matrix) -> Result<()> {
    if lap.rows() != lap.cols() || lap.rows() != u.layers() {
        return Err(Error::dim(
            "laplacian vs update stack",
            lap.shape(),
            (u.layers(), u.width()),
        ));
    }
    Ok(())
}

/// `(L (x) I) U`, blockwise.
pub fn laplacian_action(u: &UpdateStack, lap: &Matrix) -> Result<Matrix> {
    check_lap(u, lap)?;
    lap.matmul(&u.rows)
}

/// `E(U) = U^T (L (x) I) U`.
pub fn drift_energy(u: &UpdateStack, lap: &Matrix) -> Result<f64> {
    check_lap(u, lap)?;
    let n = u.layers();
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = lap.get(i, j);
            if w != 0.0 {
                let dot: f64 = u.layer(i).iter().zip(u.layer(j)).map(|(a, b)| a * b).sum();
                e += w * dot;
            }
        }
    }
    Ok(e)
}

/// `U - eta (L (x) I) U`.
pub fn smoothing_step(u: &UpdateStack, lap: &Matrix, eta: f64) -> Result<UpdateStack> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!(
            "smoothing step size must be >= 0, got {eta}"
        )));
    }
    let lu = laplacian_action(u, lap)?;
    let mut next = u.rows.clone();
    next.axpy(-eta, &lu)?;
    UpdateStack::new(next)
}

/// Largest Laplacian eigenvalue for step-size checks: the certified power
/// iteration estimate, tightened by a dense eigensolve.
pub fn certified_lambda_max(lap: &Matrix) -> f64 {
    let power = lambda_max(lap, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL);
    let dense = symmetric_eigenvalues(lap).last().copied().unwrap_or(0.0);
    if power.loose {
        dense
    } else {
        dense.max(power.estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub energy_before: f64,
    /// `E(U+)`.
    pub lhs: f64,
    /// `E(U) - eta (1 - eta lambda_max) |(L (x) I) U|^2`.
    pub rhs: f64,
    pub lambda_max: f64,
    pub eta: f64,
    /// `|(L (x) I) U|`.
    pub action_norm: f64,
    /// `lhs <= rhs + 1e-9`.
    pub holds: bool,
    /// `lhs < E(U) - 1e-12`.
    pub strict: bool,
    /// Strict decrease is owed whenever `action_norm > 1e-9`.
    pub strict_required: bool,
}

impl TheoremCheck {
    pub fn passed(&self) -> bool {
        self.holds && (!self.strict_required || self.strict)
    }
}

/// Checks the one-step energy-decrease bound for a single smoothing step.
pub fn verify_theorem(u: &UpdateStack, lap: &Matrix, eta: f64) -> Result<TheoremCheck> {
    check_lap(u, lap)?;
    let lmax = certified_lambda_max(lap);
    if !(eta > 0.0 && eta * lmax < 1.0) {
        return Err(Error::Precondition(format!(
            "step size {eta} must lie in (0, 1/lambda_max) = (0, {}) with lambda_max = {lmax}",
            1.0 / lmax
        )));
    }
    let energy_before = drift_energy(u, lap)?;
    let action = laplacian_action(u, lap)?;
    let action_sq: f64 = action.data().iter().map(|v| v * v).sum();
    let next = smoothing_step(u, lap, eta)?;
    let lhs = drift_energy(&next, lap)?;
    let rhs = energy_before - eta * (1.0 - eta * lmax) * action_sq;
    let action_norm = action_sq.sqrt();
    Ok(TheoremCheck {
        energy_before,
        lhs,
        rhs,
        lambda_max: lmax,
        eta,
        action_norm,
        holds: lhs <= rhs + 1e-9,
        strict: lhs < energy_before - 1e-12,
        strict_required: action_norm > 1e-9,
    })
}

fn is_connected_laplacian(lap: &Matrix) -> bool {
    let n = lap.rows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    if n == 0 {
        return true;
    }
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for w in 0..n {
            if w != v && lap.get(v, w) != 0.0 && !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OversmoothResult {
    pub stack: UpdateStack,
    /// `max_l |u_l - mean|` after the final step.
    pub dist_to_mean: f64,
    /// `max_l |u_l - mean|` after each step, index 0 is the input.
    pub dist_trace: Vec<f64>,
    /// Frobenius distance to the depth-mean after each step.
    pub deviation_trace: Vec<f64>,
    /// Largest change of any depth-mean coordinate over the run.
    pub mean_drift: f64,
}

/// Applies `steps` smoothing steps and tracks collapse toward the depth-mean.
///
/// The deviation from the mean contracts by at most `1 - eta * lambda_2` per
/// step in the Frobenius norm.
pub fn oversmooth_iterate(
    u: &UpdateStack,
    lap: &Matrix,
    eta: f64,
    steps: usize,
) -> Result<OversmoothResult> {
    check_lap(u, lap)?;
    let lmax = certified_lambda_max(lap);
    if !(eta > 0.0 && eta * lmax < 1.0) {
        return Err(Error::Precondition(format!(
            "step size {eta} must lie in (0, 1/lambda_max) = (0, {})",
            1.0 / lmax
        )));
    }
    if !is_connected_laplacian(lap) {
        return Err(Error::Precondition(
            "oversmoothing needs a connected graph".into(),
        ));
    }
    let mean0 = u.mean();
    let (d0, f0) = u.distance_to_mean();
    let mut dist_trace = vec![d0];
    let mut deviation_trace = vec![f0];
    let mut mean_drift: f64 = 0.0;
    let mut cur = u.clone();
    for _ in 0..steps {
        cur = smoothing_step(&cur, lap, eta)?;
        let (d, f) = cur.distance_to_mean();
        dist_trace.push(d);
        deviation_trace.push(f);
        let drift = cur
            .mean()
            .iter()
            .zip(&mean0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        mean_drift = mean_drift.max(drift);
    }
    Ok(OversmoothResult {
        dist_to_mean: *dist_trace.last().expect("non-empty"),
        stack: cur,
        dist_trace,
        deviation_trace,
        mean_drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetrics {
    /// Chain drift energy `sum_l |u_{l+1} - u_l|^2`.
    pub energy: f64,
    pub cos_adj: f64,
    /// `None` where either vector of the pair is zero.
    pub per_pair_cos: Vec<Option<f64>>,
}

impl DriftMetrics {
    pub fn skipped_pairs(&self) -> Vec<usize> {
        self.per_pair_cos
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean adjacent-layer cosine; pairs touching a zero vector are skipped.
pub fn cos_adj(u: &UpdateStack) -> Result<DriftMetrics> {
    let per_pair: Vec<Option<f64>> = (0..u.layers() - 1)
        .map(|l| cosine(u.layer(l), u.layer(l + 1)))
        .collect();
    let valid: Vec<f64> = per_pair.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric(
            "every adjacent pair contains a zero update".into(),
        ));
    }
    Ok(DriftMetrics {
        energy: laplacian_penalty(u),
        cos_adj: valid.iter().sum::<f64>() / valid.len() as f64,
        per_pair_cos: per_pair,
    })
}

/// `sum_l (1 - cos(u_l, u_{l+1}))` over pairs without a zero vector, and the
/// indices of skipped pairs.
pub fn cosine_penalty(u: &UpdateStack) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut skipped = Vec::new();
    for l in 0..u.layers() - 1 {
        match cosine(u.layer(l), u.layer(l + 1)) {
            Some(c) => total += 1.0 - c,
            None => skipped.push(l),
        }
    }
    (total, skipped)
}

/// `sum_l |u_{l+1} - u_l|^2`.
pub fn laplacian_penalty(u: &UpdateStack) -> f64 {
    (0..u.layers() - 1)
        .map(|l| {
            u.layer(l + 1)
                .iter()
                .zip(u.layer(l))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Cosine penalty over `1 x F` row nodes; zero-valued rows are skipped.
pub fn tape_cosine_penalty(tape: &Tape, rows: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for pair in rows.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if tape.value(a).frobenius_norm() == 0.0 || tape.value(b).frobenius_norm() == 0.0 {
            continue;
        }
        let dot = tape.sum(tape.mul(a, b)?)?;
        let na = tape.sum_squares(a)?;
        let nb = tape.sum_squares(b)?;
        let denom = tape.sqrt(tape.mul(na, nb)?)?;
        let cos = tape.div(dot, denom)?;
        terms.push(tape.offset(tape.scale(cos, -1.0)?, 1.0)?);
    }
    let mut total = tape.constant(Matrix::scalar(0.0))?;
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Chain Laplacian penalty over `1 x F` row nodes.
pub fn tape_laplacian_penalty(tape: &Tape, rows: &[Var]) -> Result<Var> {
    let mut total = tape.constant(Matrix::scalar(0.0))?;
    for pair in rows.windows(2) {
        let diff = tape.sub(pair[1], pair[0])?;
        total = tape.add(total, tape.sum_squares(diff)?)?;
    }
    Ok(total)
}
