//! Per-bit coefficient fitting.
//!
//! With the bit-planes of all fitting samples stacked as the columns of a
//! binary matrix `B` (rows = activation elements) and `y = x - clip_lo`, the
//! fit minimizes
//!
//! ```text
//! ||y - B alpha||^2 + lambda * ||alpha||_1
//!   = yty - 2 alpha'bty + alpha'G alpha + lambda * ||alpha||_1
//! ```
//!
//! Only the `D x D` Gram matrix `G = B'B`, `bty = B'y` and `yty` are kept, so
//! every solve is independent of the number of activation elements. `G` is
//! built from popcounts and holds exact integer counts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bitplane::{BitplaneCodebook, MAX_BITS};
use crate::tensor_store::ActivationTensor;
use crate::{Error, Result};

/// Coefficients with magnitude at or below this are exactly zero.
pub const ZERO_THRESHOLD: f64 = 1e-8;

/// Largest `D` the exhaustive subset oracle accepts.
pub const ORACLE_MAX_BITS: usize = MAX_BITS as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    bits: usize,
    rows: u64,
    gram: Vec<f64>,
    bty: Vec<f64>,
    yty: f64,
}

/// Stacks the planes of aligned `(codebook, original)` pairs into one system.
///
/// Samples are reduced in input order so the result does not depend on how
/// the per-sample work is scheduled.
pub fn build_design(
    codebooks: &[BitplaneCodebook],
    originals: &[ActivationTensor],
) -> Result<DesignSystem> {
    let first = codebooks.first().ok_or(Error::Empty("no codebooks"))?;
    if codebooks.len() != originals.len() {
        return Err(Error::LengthMismatch {
            expected: codebooks.len(),
            actual: originals.len(),
        });
    }
    if codebooks.iter().any(|c| c.spec != first.spec) {
        return Err(Error::SpecMismatch);
    }
    for (cb, x) in codebooks.iter().zip(originals) {
        if cb.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: codebook has {} elements, activation has {}",
                x.sample_id,
                cb.len(),
                x.len()
            )));
        }
    }
    let bits = first.bits();
    let clip_lo = first.spec.clip_lo();

    let partials: Vec<(Vec<u64>, Vec<f64>, f64, u64)> = codebooks
        .par_iter()
        .zip(originals.par_iter())
        .map(|(cb, x)| {
            let planes: Vec<Vec<u64>> = (1..=bits).map(|j| cb.packed_plane(j)).collect();
            let mut counts = vec![0u64; bits * bits];
            for j in 0..bits {
                for k in j..bits {
                    let c: u64 = planes[j]
                        .iter()
                        .zip(&planes[k])
                        .map(|(a, b)| (a & b).count_ones() as u64)
                        .sum();
                    counts[j * bits + k] = c;
                    counts[k * bits + j] = c;
                }
            }
            let mut bty = vec![0.0; bits];
            let mut yty = 0.0;
            for (code, &v) in cb.codes().zip(x.values()) {
                let y = v as f64 - clip_lo;
                yty += y * y;
                for (j, acc) in bty.iter_mut().enumerate() {
                    if code >> j & 1 == 1 {
                        *acc += y;
                    }
                }
            }
            (counts, bty, yty, cb.len() as u64)
        })
        .collect();

    let mut counts = vec![0u64; bits * bits];
    let mut bty = vec![0.0; bits];
    let mut yty = 0.0;
    let mut rows = 0;
    for (c, b, y, m) in partials {
        counts.iter_mut().zip(c).for_each(|(acc, v)| *acc += v);
        bty.iter_mut().zip(b).for_each(|(acc, v)| *acc += v);
        yty += y;
        rows += m;
    }
    if rows == 0 {
        return Err(Error::Empty("design has no rows"));
    }
    Ok(DesignSystem {
        bits,
        rows,
        gram: counts.into_iter().map(|c| c as f64).collect(),
        bty,
        yty,
    })
}

impl DesignSystem {
    /// Builds a system from explicit binary columns and a target vector.
    pub fn from_columns(columns: &[Vec<u8>], y: &[f64]) -> Result<Self> {
        let bits = columns.len();
        if bits == 0 || y.is_empty() {
            return Err(Error::Empty("design needs columns and rows"));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != y.len()) {
            return Err(Error::LengthMismatch {
                expected: y.len(),
                actual: c.len(),
            });
        }
        if columns.iter().flatten().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("design columns must be binary".into()));
        }
        let mut gram = vec![0.0; bits * bits];
        for j in 0..bits {
            for k in 0..bits {
                gram[j * bits + k] = columns[j]
                    .iter()
                    .zip(&columns[k])
                    .filter(|(a, b)| **a == 1 && **b == 1)
                    .count() as f64;
            }
        }
        let bty = columns
            .iter()
            .map(|c| c.iter().zip(y).filter(|(b, _)| **b == 1).map(|(_, v)| v).sum())
            .collect();
        Ok(DesignSystem {
            bits,
            rows: y.len() as u64,
            gram,
            bty,
            yty: y.iter().map(|v| v * v).sum(),
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn gram(&self, j: usize, k: usize) -> f64 {
        self.gram[j * self.bits + k]
    }

    pub fn bty(&self) -> &[f64] {
        &self.bty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    /// `||y - B alpha||^2` evaluated through the Gram system, floored at 0.
    pub fn residual_sse(&self, alpha: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for j in 0..self.bits {
            lin += alpha[j] * self.bty[j];
            let row: f64 = (0..self.bits).map(|k| self.gram(j, k) * alpha[k]).sum();
            quad += alpha[j] * row;
        }
        (self.yty - 2.0 * lin + quad).max(0.0)
    }

    /// Gradient of the squared-error term, `2 (G alpha - bty)`.
    pub fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        (0..self.bits)
            .map(|j| {
                let row: f64 = (0..self.bits).map(|k| self.gram(j, k) * alpha[k]).sum();
                2.0 * (row - self.bty[j])
            })
            .collect()
    }

    /// Smallest penalty at which the all-zero vector is optimal.
    pub fn lambda_max(&self) -> f64 {
        2.0 * self.bty.iter().fold(0.0f64, |m, b| m.max(b.abs()))
    }

    /// Exact least squares restricted to `support` (1-based bit numbers).
    /// Singular subsystems take the minimum-norm solution.
    pub fn least_squares_on(&self, support: &[usize]) -> CoefficientVector {
        let mut alpha = vec![0.0; self.bits];
        if !support.is_empty() {
            let idx: Vec<usize> = support.iter().map(|j| j - 1).collect();
            let n = idx.len();
            let g = DMatrix::from_fn(n, n, |r, c| self.gram(idx[r], idx[c]));
            let b = DVector::from_fn(n, |r, _| self.bty[idx[r]]);
            let solution = refined_cholesky_solve(&g, &b)
                .unwrap_or_else(|| {
                    let eps = 1e-12 * g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    g.svd(true, true)
                        .solve(&b, eps)
                        .expect("SVD was computed with both factors")
                });
            for (r, &j) in idx.iter().enumerate() {
                alpha[j] = solution[r];
            }
        }
        let sse = self.residual_sse(&alpha);
        CoefficientVector::from_raw(alpha, 0.0, sse)
    }
}

/// Per-bit coefficients `alpha` (index `j - 1` holds bit `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub alpha: Vec<f64>,
    /// 1-based bit numbers with `|alpha_j| > ZERO_THRESHOLD`, ascending.
    pub support: Vec<usize>,
    pub lambda: f64,
    pub residual_sse: f64,
}

impl CoefficientVector {
    /// Zeroes sub-threshold entries and derives the support.
    pub fn from_raw(mut alpha: Vec<f64>, lambda: f64, residual_sse: f64) -> Self {
        for a in alpha.iter_mut() {
            if a.abs() <= ZERO_THRESHOLD {
                *a = 0.0;
            }
        }
        let support = alpha
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(j, _)| j + 1)
            .collect();
        CoefficientVector {
            alpha,
            support,
            lambda,
            residual_sse,
        }
    }

    pub fn effective_rate(&self) -> usize {
        self.support.len()
    }

    pub fn l1_norm(&self) -> f64 {
        self.alpha.iter().map(|a| a.abs()).sum()
    }

    /// Penalized objective `sse + lambda * ||alpha||_1`.
    pub fn objective(&self) -> f64 {
        self.residual_sse + self.lambda * self.l1_norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub nonnegative: bool,
    /// Maximum number of full coordinate sweeps.
    pub max_iter: usize,
    /// Converged when the largest coordinate change in a sweep is below
    /// `tol * (1 + ||alpha||_inf)`.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            nonnegative: false,
            max_iter: 100_000,
            tol: 1e-10,
        }
    }
}

pub fn solve_lasso(sys: &DesignSystem, lambda: f64, opts: &SolverOptions) -> Result<CoefficientVector> {
    solve_lasso_from(sys, lambda, opts, &vec![0.0; sys.bits])
}

/// Cyclic coordinate descent on the Gram system from a warm start.
///
/// After convergence, coefficients at or below [`ZERO_THRESHOLD`] are zeroed
/// and the remaining ones are refined by solving the stationarity equations
/// on the support with the signs held fixed, when that keeps the signs.
pub fn solve_lasso_from(
    sys: &DesignSystem,
    lambda: f64,
    opts: &SolverOptions,
    warm: &[f64],
) -> Result<CoefficientVector> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    if warm.len() != sys.bits {
        return Err(Error::LengthMismatch {
            expected: sys.bits,
            actual: warm.len(),
        });
    }
    let d = sys.bits;
    let half_lambda = lambda / 2.0;
    let mut alpha = warm.to_vec();
    for (j, a) in alpha.iter_mut().enumerate() {
        if sys.gram(j, j) == 0.0 || (opts.nonnegative && *a < 0.0) {
            *a = 0.0;
        }
    }

    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mut max_change = 0.0f64;
        for j in 0..d {
            let gjj = sys.gram(j, j);
            if gjj == 0.0 {
                continue;
            }
            let mut r = sys.bty[j];
            for k in 0..d {
                if k != j {
                    r -= sys.gram(j, k) * alpha[k];
                }
            }
            let shrunk = if r > half_lambda {
                r - half_lambda
            } else if r < -half_lambda && !opts.nonnegative {
                r + half_lambda
            } else {
                0.0
            };
            let next = shrunk / gjj;
            max_change = max_change.max((next - alpha[j]).abs());
            alpha[j] = next;
        }
        last_change = max_change;
        let scale = 1.0 + alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if max_change < opts.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: opts.max_iter,
            last_change,
            alpha,
        });
    }

    let thresholded = CoefficientVector::from_raw(alpha, lambda, 0.0);
    let alpha = polish(sys, half_lambda, &thresholded.alpha, opts.nonnegative)
        .unwrap_or(thresholded.alpha);
    let sse = sys.residual_sse(&alpha);
    Ok(CoefficientVector::from_raw(alpha, lambda, sse))
}

/// Solves `G_SS a = bty_S - (lambda/2) sign(alpha_S)` on the current support.
/// Returns `None` when the subsystem is singular, a sign flips, or the
/// optimality residual does not improve.
fn polish(sys: &DesignSystem, half_lambda: f64, alpha: &[f64], nonnegative: bool) -> Option<Vec<f64>> {
    let idx: Vec<usize> = (0..sys.bits).filter(|&j| alpha[j] != 0.0).collect();
    if idx.is_empty() {
        return None;
    }
    let n = idx.len();
    let g = DMatrix::from_fn(n, n, |r, c| sys.gram(idx[r], idx[c]));
    let rhs = DVector::from_fn(n, |r, _| {
        sys.bty[idx[r]] - half_lambda * alpha[idx[r]].signum()
    });
    let solution = refined_cholesky_solve(&g, &rhs)?;
    let mut refined = alpha.to_vec();
    for (r, &j) in idx.iter().enumerate() {
        let v = solution[r];
        if !v.is_finite() || v.signum() != alpha[j].signum() || (nonnegative && v < 0.0) {
            return None;
        }
        refined[j] = v;
    }
    let certificate = |a: &[f64]| {
        let fit = CoefficientVector::from_raw(a.to_vec(), 2.0 * half_lambda, 0.0);
        optimality_violation(sys, &fit, nonnegative)
    };
    (certificate(&refined) < certificate(alpha)).then_some(refined)
}

/// Cholesky solve followed by one step of iterative refinement. `None` when
/// the matrix is not numerically positive definite.
fn refined_cholesky_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = g.clone().cholesky()?;
    let mut x = chol.solve(b);
    let residual = b - g * &x;
    x += chol.solve(&residual);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves for every `lambda` in ascending order, warm-starting each solve
/// from the previous one. The result is sorted by ascending `lambda`.
pub fn lasso_path(
    sys: &DesignSystem,
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<CoefficientVector>> {
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {bad}"
        )));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut warm = vec![0.0; sys.bits];
    let mut path = Vec::with_capacity(sorted.len());
    for lambda in sorted {
        let fit = solve_lasso_from(sys, lambda, opts, &warm).map_err(|e| Error::AtLambda {
            lambda,
            source: Box::new(e),
        })?;
        warm.clone_from(&fit.alpha);
        path.push(fit);
    }
    Ok(path)
}

/// Geometric grid `lambda_max * [min_factor .. max_factor]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaGrid {
    pub min_factor: f64,
    pub max_factor: f64,
    pub points: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid {
            min_factor: 1e-4,
            max_factor: 1.0,
            points: 32,
        }
    }
}

impl LambdaGrid {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_factor > 0.0
            && self.min_factor.is_finite()
            && self.max_factor.is_finite()
            && self.points >= 1
            && (self.min_factor < self.max_factor || (self.points == 1 && self.min_factor <= self.max_factor));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "lambda grid needs 0 < min_factor < max_factor and at least one point, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Strictly ascending penalties. A zero `lambda_max` collapses the grid
    /// to the single point `0`.
    pub fn values(&self, lambda_max: f64) -> Vec<f64> {
        if lambda_max <= 0.0 {
            return vec![0.0];
        }
        if self.points == 1 {
            return vec![lambda_max * self.max_factor];
        }
        let (lo, hi) = (self.min_factor.ln(), self.max_factor.ln());
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|n| {
                if n == self.points - 1 {
                    lambda_max * self.max_factor
                } else {
                    lambda_max * (lo + (hi - lo) * n as f64 / last).exp()
                }
            })
            .collect()
    }
}

/// Best least-squares fit over every support of exactly `k` bits, for
/// `k = 0..=bits`. Ties keep the lexicographically smallest support.
pub fn best_subsets(sys: &DesignSystem) -> Result<Vec<CoefficientVector>> {
    if sys.bits > ORACLE_MAX_BITS {
        return Err(Error::TooManyBits {
            bits: sys.bits,
            max: ORACLE_MAX_BITS,
        });
    }
    let tie = tie_tolerance(sys);
    let mut best: Vec<Option<CoefficientVector>> = vec![None; sys.bits + 1];
    for (k, slot) in best.iter_mut().enumerate() {
        for support in Combinations::new(sys.bits, k) {
            let fit = sys.least_squares_on(&support);
            let better = match slot {
                None => true,
                Some(current) => fit.residual_sse < current.residual_sse - tie,
            };
            if better {
                *slot = Some(fit);
            }
        }
    }
    Ok(best.into_iter().map(|b| b.expect("every size has a subset")).collect())
}

/// Exact minimizer of `||y - B alpha||^2` subject to `||alpha||_0 <= eta`,
/// by enumeration. Ties prefer smaller supports, then lexicographic order.
pub fn oracle_l0(sys: &DesignSystem, eta: usize) -> Result<CoefficientVector> {
    if eta > sys.bits {
        return Err(Error::InvalidArgument(format!(
            "eta {eta} exceeds D = {}",
            sys.bits
        )));
    }
    let per_size = best_subsets(sys)?;
    let tie = tie_tolerance(sys);
    let mut best = per_size[0].clone();
    for fit in per_size.into_iter().take(eta + 1).skip(1) {
        if fit.residual_sse < best.residual_sse - tie {
            best = fit;
        }
    }
    Ok(best)
}

fn tie_tolerance(sys: &DesignSystem) -> f64 {
    1e-12 * sys.yty.max(1.0)
}

/// Lexicographic `k`-subsets of `1..=n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            current: (k <= n).then(|| (1..=k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.take()?;
        let k = out.len();
        let mut next = out.clone();
        // Advance the rightmost position that still has room.
        let mut i = k;
        while i > 0 {
            i -= 1;
            if next[i] < self.n - (k - 1 - i) {
                next[i] += 1;
                for m in i + 1..k {
                    next[m] = next[m - 1] + 1;
                }
                self.current = Some(next);
                return Some(out);
            }
        }
        Some(out)
    }
}

/// Distortions at one support size `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportComparison {
    pub d: usize,
    /// Exact best subset with at most `d` bits.
    pub oracle_sse: f64,
    /// Lowest residual among path solutions with exactly `d` nonzero bits.
    pub path_sse: Option<f64>,
    /// The same path supports refitted by unpenalized least squares.
    pub path_refit_sse: Option<f64>,
    pub truncation_sse: Option<f64>,
}

/// Lines up the L0 oracle, a LASSO path and an optional truncation baseline
/// (`truncation(d)` returns the coefficients to evaluate) for `d = 0..=eta`.
pub fn compare_supports(
    sys: &DesignSystem,
    path: &[CoefficientVector],
    eta: usize,
    truncation: impl Fn(usize) -> Option<Vec<f64>>,
) -> Result<Vec<SupportComparison>> {
    if eta > sys.bits {
        return Err(Error::InvalidArgument(format!("eta {eta} exceeds D = {}", sys.bits)));
    }
    let per_size = best_subsets(sys)?;
    let mut running = f64::INFINITY;
    let mut rows = Vec::with_capacity(eta + 1);
    for (d, best) in per_size.iter().enumerate().take(eta + 1) {
        running = running.min(best.residual_sse);
        let at_d: Vec<&CoefficientVector> = path.iter().filter(|c| c.effective_rate() == d).collect();
        let min_of = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
        rows.push(SupportComparison {
            d,
            oracle_sse: running,
            path_sse: min_of(&mut at_d.iter().map(|c| c.residual_sse)),
            path_refit_sse: min_of(&mut at_d.iter().map(|c| sys.least_squares_on(&c.support).residual_sse)),
            truncation_sse: truncation(d).map(|alpha| sys.residual_sse(&alpha)),
        });
    }
    Ok(rows)
}

/// Subgradient optimality residuals for a penalized solution: for `j` off the
/// support, how far `|grad_j|` exceeds `lambda`; on the support, the distance
/// of `grad_j + lambda * sign(alpha_j)` from zero. Returns the largest.
pub fn optimality_violation(sys: &DesignSystem, fit: &CoefficientVector, nonnegative: bool) -> f64 {
    let grad = sys.gradient(&fit.alpha);
    grad.iter()
        .zip(&fit.alpha)
        .enumerate()
        .map(|(j, (g, a))| {
            if sys.gram(j, j) == 0.0 {
                0.0
            } else if *a != 0.0 {
                (g + fit.lambda * a.signum()).abs()
            } else if nonnegative {
                (-g - fit.lambda).max(0.0)
            } else {
                (g.abs() - fit.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}
