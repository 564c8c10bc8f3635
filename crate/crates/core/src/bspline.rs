//! Knot grids, Cox–de Boor basis evaluation, least-squares fitting and
//! quantile-driven grid adaptation.
//!
//! A grid of `G` intervals and degree `k` carries `G + 2k + 1` knots: the
//! `G + 1` knots spanning `[lo, hi]` plus `k` extension knots on each side.
//! It defines `G + k` basis functions. Inputs outside `[lo, hi]` are clamped
//! before evaluation, so the spline is constant outside its range and its
//! derivative there is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported spline degree. Basis scratch space lives on the stack.
pub const MAX_DEGREE: usize = 15;

/// Ridge damping added to every least-squares normal matrix.
pub const RIDGE: f64 = 1e-8;
/// Refinement passes applied after the ridge-damped solve.
pub const REFINE_STEPS: usize = 3;

/// Default weight of the uniform grid when adapting knots to data.
pub const DEFAULT_GRID_BLEND: f64 = 0.02;

/// Minimum spacing between adapted knots, relative to the previous range.
const MIN_KNOT_SPACING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    degree: usize,
    intervals: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Coefficients of one spline, one per basis function.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCoeffs(pub Vec<f64>);

impl SplineCoeffs {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Nonzero basis values at a point: functions `start ..= start + degree`.
#[derive(Clone, Copy, Debug)]
pub struct LocalBasis {
    pub start: usize,
    pub values: [f64; MAX_DEGREE + 1],
    pub derivs: [f64; MAX_DEGREE + 1],
    /// False when `x` was clamped into range; derivatives are then zero.
    pub in_range: bool,
}

impl LocalBasis {
    pub fn values(&self, degree: usize) -> &[f64] {
        &self.values[..=degree]
    }

    pub fn derivs(&self, degree: usize) -> &[f64] {
        &self.derivs[..=degree]
    }
}

/// Builds `G + 2k + 1` equally spaced knots, `k` steps beyond each end of `[lo, hi]`.
pub fn make_uniform_grid(lo: f64, hi: f64, intervals: usize, degree: usize) -> Result<KnotGrid> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidRange { lo, hi });
    }
    if intervals < 1 {
        return Err(Error::InvalidGridSize(intervals));
    }
    if degree > MAX_DEGREE {
        return Err(Error::DegreeTooLarge {
            degree,
            max: MAX_DEGREE,
        });
    }
    let knots = uniform_knots(lo, hi, intervals, degree);
    Ok(KnotGrid {
        degree,
        intervals,
        lo,
        hi,
        knots,
    })
}

fn uniform_knots(lo: f64, hi: f64, intervals: usize, degree: usize) -> Vec<f64> {
    let h = (hi - lo) / intervals as f64;
    let k = degree as f64;
    (0..intervals + 2 * degree + 1)
        .map(|i| {
            // Anchor the range ends exactly instead of accumulating steps.
            let t = i as f64 - k;
            if i == degree {
                lo
            } else if i == degree + intervals {
                hi
            } else {
                lo + t * h
            }
        })
        .collect()
}

impl KnotGrid {
    /// Builds a grid from an explicit knot vector; `lo`/`hi` are read off it.
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<KnotGrid> {
        if degree > MAX_DEGREE {
            return Err(Error::DegreeTooLarge {
                degree,
                max: MAX_DEGREE,
            });
        }
        if knots.len() < 2 * degree + 2 {
            return Err(Error::InvalidGridSize(0));
        }
        let intervals = knots.len() - 2 * degree - 1;
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(
                "knot vector must be strictly increasing".into(),
            ));
        }
        Ok(KnotGrid {
            degree,
            intervals,
            lo: knots[degree],
            hi: knots[degree + intervals],
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Index `i` of the knot interval `[t_i, t_{i+1})` holding clamped `x`;
    /// `x == hi` belongs to the last interval.
    fn span(&self, x: f64) -> usize {
        let k = self.degree;
        let last = k + self.intervals - 1;
        if x >= self.knots[last] {
            return last;
        }
        // Largest i in [k, last] with knots[i] <= x.
        let inner = &self.knots[k..=last];
        k + inner.partition_point(|&t| t <= x).saturating_sub(1)
    }

    /// Nonzero basis values and their derivatives at `x` (Cox–de Boor,
    /// triangular form). Derivatives use the degree-reduction identity
    /// `B'_{m,k} = k/(t_{m+k}-t_m) B_{m,k-1} - k/(t_{m+k+1}-t_{m+1}) B_{m+1,k-1}`.
    pub fn local_basis(&self, x: f64) -> LocalBasis {
        let p = self.degree;
        let in_range = x >= self.lo && x <= self.hi;
        let x = self.clamp(x);
        let i = self.span(x);
        let t = &self.knots;

        let mut n = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        let mut lower = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            if j == p {
                lower = n;
            }
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let mut derivs = [0.0; MAX_DEGREE + 1];
        let start = i - p;
        if p > 0 && in_range {
            let pf = p as f64;
            for (r, d) in derivs.iter_mut().enumerate().take(p + 1) {
                let m = start + r;
                let mut v = 0.0;
                if r >= 1 {
                    v += pf * lower[r - 1] / (t[m + p] - t[m]);
                }
                if r < p {
                    v -= pf * lower[r] / (t[m + p + 1] - t[m + 1]);
                }
                *d = v;
            }
        }

        LocalBasis {
            start,
            values: n,
            derivs,
            in_range,
        }
    }

    /// All `G + k` basis values at `x`.
    pub fn basis_eval(&self, x: f64) -> Vec<f64> {
        let local = self.local_basis(x);
        let mut out = vec![0.0; self.basis_count()];
        out[local.start..=local.start + self.degree].copy_from_slice(local.values(self.degree));
        out
    }

    /// All `G + k` basis derivatives at `x`; zero outside `[lo, hi]`.
    pub fn basis_derivative(&self, x: f64) -> Vec<f64> {
        let local = self.local_basis(x);
        let mut out = vec![0.0; self.basis_count()];
        out[local.start..=local.start + self.degree].copy_from_slice(local.derivs(self.degree));
        out
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.basis_count() {
            return Err(Error::LengthMismatch {
                expected: self.basis_count(),
                got: coeffs.len(),
            });
        }
        Ok(())
    }
}

pub fn basis_eval(grid: &KnotGrid, x: f64) -> Vec<f64> {
    grid.basis_eval(x)
}

pub fn basis_derivative(grid: &KnotGrid, x: f64) -> Vec<f64> {
    grid.basis_derivative(x)
}

/// `Σ_m c_m B_m(x)`.
pub fn spline_eval(grid: &KnotGrid, coeffs: &SplineCoeffs, x: f64) -> Result<f64> {
    grid.check_coeffs(&coeffs.0)?;
    Ok(eval_local(grid, &coeffs.0, &grid.local_basis(x)))
}

/// Spline derivative at `x`.
pub fn spline_derivative(grid: &KnotGrid, coeffs: &SplineCoeffs, x: f64) -> Result<f64> {
    grid.check_coeffs(&coeffs.0)?;
    let local = grid.local_basis(x);
    Ok(local
        .derivs(grid.degree)
        .iter()
        .zip(&coeffs.0[local.start..])
        .fold(0.0, |acc, (d, c)| acc + d * c))
}

pub(crate) fn eval_local(grid: &KnotGrid, coeffs: &[f64], local: &LocalBasis) -> f64 {
    local
        .values(grid.degree)
        .iter()
        .zip(&coeffs[local.start..])
        .fold(0.0, |acc, (b, c)| acc + b * c)
}

/// Ridge-damped normal equations for least-squares fits on a fixed grid and
/// sample set, factored once so several right-hand sides can share it.
pub struct LeastSquares {
    grid: KnotGrid,
    locals: Vec<LocalBasis>,
    /// Lower-triangular Cholesky factor, row-major `n x n`.
    chol: Vec<f64>,
}

impl LeastSquares {
    pub fn new(grid: &KnotGrid, xs: &[f64]) -> Result<Self> {
        let n = grid.basis_count();
        let p = grid.degree;
        let locals: Vec<LocalBasis> = xs.iter().map(|&x| grid.local_basis(x)).collect();
        let mut a = vec![0.0; n * n];
        for local in &locals {
            let v = local.values(p);
            for r in 0..=p {
                for c in 0..=p {
                    a[(local.start + r) * n + local.start + c] += v[r] * v[c];
                }
            }
        }
        for d in 0..n {
            a[d * n + d] += RIDGE;
        }
        let chol = cholesky(&a, n).ok_or(Error::SingularSystem)?;
        Ok(LeastSquares {
            grid: grid.clone(),
            locals,
            chol,
        })
    }

    pub fn solve(&self, ys: &[f64]) -> Result<SplineCoeffs> {
        if ys.len() != self.locals.len() {
            return Err(Error::LengthMismatch {
                expected: self.locals.len(),
                got: ys.len(),
            });
        }
        let n = self.grid.basis_count();
        let p = self.grid.degree;
        let mut rhs = vec![0.0; n];
        for (local, &y) in self.locals.iter().zip(ys) {
            for (r, v) in local.values(p).iter().enumerate() {
                rhs[local.start + r] += v * y;
            }
        }
        // Iterated Tikhonov: c <- c0 + ridge * M^-1 c shrinks the ridge bias
        // geometrically while directions with no sample support stay at zero.
        let c0 = cholesky_solve(&self.chol, n, rhs);
        let mut c = c0.clone();
        for _ in 0..REFINE_STEPS {
            let correction = cholesky_solve(&self.chol, n, c.iter().map(|v| RIDGE * v).collect());
            c = c0.iter().zip(&correction).map(|(a, b)| a + b).collect();
        }
        Ok(SplineCoeffs(c))
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, mut b: Vec<f64>) -> Vec<f64> {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    b
}

/// Coefficients minimizing `Σ (spline(x_i) - y_i)²` plus a `1e-8` ridge term.
pub fn fit_least_squares(grid: &KnotGrid, xs: &[f64], ys: &[f64]) -> Result<SplineCoeffs> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    LeastSquares::new(grid, xs)?.solve(ys)
}

/// Moves the `G + 1` range knots toward the empirical quantiles of `samples`.
///
/// Range knots become `blend * uniform + (1 - blend) * quantile`, where the
/// uniform part spans `[min(lo, min s), max(hi, max s)]`. Tied quantiles are
/// spread to a minimum spacing of `1e-6 * (hi - lo)`. Extension knots continue
/// with the new average spacing.
pub fn adapt_knots(grid: &KnotGrid, samples: &[f64], blend: f64) -> Result<KnotGrid> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidConfig(format!(
            "grid blend {blend} outside [0, 1]"
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("non-finite grid-adaptation sample".into()));
    }
    let g = grid.intervals;
    let k = grid.degree;

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let smin = sorted[0];
    let smax = sorted[sorted.len() - 1];

    let uniform = uniform_knots(grid.lo.min(smin), grid.hi.max(smax), g, 0);

    let last = (sorted.len() - 1) as f64;
    let mut quantile: Vec<f64> = (0..=g)
        .map(|t| {
            let pos = t as f64 * last / g as f64;
            let below = pos.floor() as usize;
            let frac = pos - below as f64;
            if frac == 0.0 || below + 1 >= sorted.len() {
                sorted[below]
            } else {
                sorted[below] + frac * (sorted[below + 1] - sorted[below])
            }
        })
        .collect();
    separate_ties(&mut quantile, MIN_KNOT_SPACING * (grid.hi - grid.lo));

    let range: Vec<f64> = uniform
        .iter()
        .zip(&quantile)
        .map(|(u, q)| {
            if blend == 1.0 {
                *u
            } else if blend == 0.0 {
                *q
            } else {
                blend * u + (1.0 - blend) * q
            }
        })
        .collect();

    let lo = range[0];
    let hi = range[g];
    let h = (hi - lo) / g as f64;
    let mut knots = Vec::with_capacity(g + 2 * k + 1);
    knots.extend((0..k).map(|j| lo - (k - j) as f64 * h));
    knots.extend_from_slice(&range);
    knots.extend((1..=k).map(|j| hi + j as f64 * h));
    KnotGrid::from_knots(knots, k)
}

/// Spreads runs of equal (or too-close) knots symmetrically around their
/// value, then pushes any remaining overlaps forward.
fn separate_ties(knots: &mut [f64], spacing: f64) {
    let mut i = 0;
    while i < knots.len() {
        let mut j = i + 1;
        while j < knots.len() && knots[j] - knots[i] < spacing * 0.5 {
            j += 1;
        }
        let run = j - i;
        if run > 1 {
            let centre = knots[i];
            for (r, knot) in knots[i..j].iter_mut().enumerate() {
                *knot = centre + (r as f64 - (run - 1) as f64 / 2.0) * spacing;
            }
        }
        i = j;
    }
    for i in 1..knots.len() {
        if knots[i] < knots[i - 1] + spacing {
            knots[i] = knots[i - 1] + spacing;
        }
    }
}

/// Re-places knots by [`adapt_knots`] and refits coefficients so the spline
/// keeps its values on `samples`.
pub fn adapt_grid(
    grid: &KnotGrid,
    coeffs: &SplineCoeffs,
    samples: &[f64],
    blend: f64,
) -> Result<(KnotGrid, SplineCoeffs)> {
    grid.check_coeffs(&coeffs.0)?;
    let new_grid = adapt_knots(grid, samples, blend)?;
    let targets: Vec<f64> = samples
        .iter()
        .map(|&x| eval_local(grid, &coeffs.0, &grid.local_basis(x)))
        .collect();
    let fitted = LeastSquares::new(&new_grid, samples)?.solve(&targets)?;
    Ok((new_grid, fitted))
}
