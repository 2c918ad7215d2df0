//! Jittered Cholesky factorization, triangular solves and the Cholesky adjoint.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default base jitter, relative to the mean diagonal.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Number of escalation attempts (`base * 10^k`, k = 0..6).
pub const JITTER_ATTEMPTS: u32 = 7;

/// Lower-triangular factor `L` with `L Lᵀ = M + jitter_applied · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter_applied: f64,
    /// d(jitter)/d(M_ii); zero when the jitter scale did not depend on the diagonal.
    jitter_slope: f64,
}

impl CholFactor {
    /// Wraps an already-computed lower-triangular factor.
    pub fn from_lower(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::invalid("Cholesky factor must be square"));
        }
        if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0)) {
            return Err(Error::invalid("Cholesky factor diagonal must be strictly positive"));
        }
        Ok(CholFactor {
            l: l.lower_triangle(),
            jitter_applied: 0.0,
            jitter_slope: 0.0,
        })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    /// `L Lᵀ`, i.e. the factored matrix including jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(&self.l, &mut x);
        x
    }

    /// `L⁻ᵀ B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_upper_in_place(&self.l, &mut x);
        x
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        solve_lower_in_place(&self.l, &mut x);
        DVector::from_column_slice(x.as_slice())
    }

    /// `(L Lᵀ)⁻¹ b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        solve_lower_in_place(&self.l, &mut x);
        solve_upper_in_place(&self.l, &mut x);
        DVector::from_column_slice(x.as_slice())
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        solve_lower_in_place(&self.l, &mut x);
        solve_upper_in_place(&self.l, &mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = self.solve(&DMatrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    /// Maps the gradient with respect to `L` (lower triangle read) to a symmetric
    /// gradient with respect to the factored matrix `M + jitter · I`.
    pub fn backprop(&self, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
        cholesky_adjoint(&self.l, l_bar)
    }

    /// Converts a gradient with respect to `M + jitter · I` into one with respect to `M`,
    /// accounting for the jitter's dependence on the mean diagonal.
    pub fn backprop_jitter(&self, bar: &mut DMatrix<f64>) {
        if self.jitter_slope == 0.0 {
            return;
        }
        let extra = self.jitter_slope * bar.trace();
        for i in 0..bar.nrows() {
            bar[(i, i)] += extra;
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky with jitter escalation.
///
/// Attempt `k` adds `base_jitter · 10^k · s · I`, where `s` is the mean diagonal
/// of `m` (or 1 when that is not positive). Fails after [`JITTER_ATTEMPTS`].
pub fn cholesky(m: &DMatrix<f64>, base_jitter: f64) -> Result<CholFactor> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            what: "cholesky input columns",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if !(base_jitter >= 0.0) {
        return Err(Error::invalid("base jitter must be non-negative"));
    }
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cholesky input contains non-finite values"));
    }
    let scale_ref = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for j in 0..n {
        for i in j + 1..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale_ref.max(f64::MIN_POSITIVE) {
                return Err(Error::invalid("cholesky input is not symmetric"));
            }
        }
    }
    cholesky_unchecked(m, base_jitter)
}

pub(crate) fn cholesky_unchecked(m: &DMatrix<f64>, base_jitter: f64) -> Result<CholFactor> {
    let n = m.nrows();
    let mean_diag = if n == 0 { 0.0 } else { m.trace() / n as f64 };
    let (scale, relative) = if mean_diag > 0.0 { (mean_diag, true) } else { (1.0, false) };
    let mut last_jitter = 0.0;
    let mut rel = base_jitter;
    for _ in 0..JITTER_ATTEMPTS {
        let jitter = rel * scale;
        let mut work = m.clone();
        for i in 0..n {
            work[(i, i)] += jitter;
        }
        if factor_in_place(&mut work) {
            return Ok(CholFactor {
                l: work,
                jitter_applied: jitter,
                jitter_slope: if relative { rel / n as f64 } else { 0.0 },
            });
        }
        last_jitter = jitter;
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last_jitter })
}

/// Runs `$body` through a copy compiled with AVX2 when the CPU has it. No fused
/// multiply-add is enabled, so both paths give identical results.
macro_rules! dispatch_avx2 {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        fn $name($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) -> $ret {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch_avx2!(factor_in_place, factor_body, (a: &mut DMatrix<f64>) -> bool);
dispatch_avx2!(adjoint_in_place, adjoint_body, (ld: &[f64], ad: &mut [f64], n: usize) -> ());

/// Right-looking column Cholesky on a column-major buffer. Zeroes the strict upper
/// triangle. Returns false on a non-positive pivot.
#[inline(always)]
fn factor_body(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    let data = a.as_mut_slice();
    for j in 0..n {
        let (head, tail) = data.split_at_mut((j + 1) * n);
        let colj = &mut head[j * n..];
        let d = colj[j];
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        colj[j] = d;
        let inv = 1.0 / d;
        for v in &mut colj[j + 1..] {
            *v *= inv;
        }
        for k in j + 1..n {
            let lkj = colj[k];
            if lkj == 0.0 {
                continue;
            }
            let colk = &mut tail[(k - j - 1) * n..(k - j) * n];
            for (dst, src) in colk[k..].iter_mut().zip(&colj[k..]) {
                *dst -= lkj * src;
            }
        }
    }
    for j in 1..n {
        for v in &mut data[j * n..j * n + j] {
            *v = 0.0;
        }
    }
    true
}

/// Solves `L X = B` in place for lower-triangular `L`.
pub(crate) fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    let ld = l.as_slice();
    let cols = b.ncols();
    let bd = b.as_mut_slice();
    for c in 0..cols {
        let x = &mut bd[c * n..(c + 1) * n];
        for j in 0..n {
            let lcol = &ld[j * n..(j + 1) * n];
            let xj = x[j] / lcol[j];
            x[j] = xj;
            if xj != 0.0 {
                for (xi, li) in x[j + 1..].iter_mut().zip(&lcol[j + 1..]) {
                    *xi -= xj * li;
                }
            }
        }
    }
}

/// Solves `Lᵀ X = B` in place for lower-triangular `L`.
pub(crate) fn solve_upper_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    let ld = l.as_slice();
    let cols = b.ncols();
    let bd = b.as_mut_slice();
    for c in 0..cols {
        let x = &mut bd[c * n..(c + 1) * n];
        for j in (0..n).rev() {
            let lcol = &ld[j * n..(j + 1) * n];
            let s = dot(&x[j + 1..], &lcol[j + 1..]);
            x[j] = (x[j] - s) / lcol[j];
        }
    }
}

#[inline(always)]
fn adjoint_body(ld: &[f64], ad: &mut [f64], n: usize) {
    for j in (0..n).rev() {
        let d = ld[j * n + j];
        let c = &ld[j * n + j + 1..(j + 1) * n];
        let (left, right) = ad.split_at_mut(j * n);
        let colj = &mut right[..n];
        let cbar_dot = dot(c, &colj[j + 1..]);
        let mut dbar = colj[j] - cbar_dot / d;
        dbar /= d;
        for v in &mut colj[j + 1..] {
            *v /= d;
        }
        let cbar = &colj[j + 1..];
        for k in 0..j {
            let lcol = &ld[k * n..(k + 1) * n];
            let r_k = lcol[j];
            let bcol = &mut left[k * n..(k + 1) * n];
            bcol[j] -= dbar * r_k + dot(cbar, &lcol[j + 1..]);
            if r_k != 0.0 {
                for (dst, cb) in bcol[j + 1..].iter_mut().zip(cbar) {
                    *dst -= r_k * cb;
                }
            }
        }
        colj[j] = 0.5 * dbar;
    }
}

/// Reverse-mode Cholesky: given `L` and the gradient `l_bar` with respect to its lower
/// triangle, returns the symmetric gradient with respect to the factored matrix.
///
/// Unblocked level-2 algorithm, O(n³/3).
pub(crate) fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut abar = l_bar.lower_triangle();
    adjoint_in_place(l.as_slice(), abar.as_mut_slice(), n);
    // lower-triangle gradient -> symmetric full-matrix gradient
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * abar[(i, j)];
            abar[(i, j)] = v;
            abar[(j, i)] = v;
        }
    }
    abar
}

/// Truncated Cholesky with diagonal pivoting of a positive semidefinite matrix.
///
/// `factor` is `n × r` in the original row order with `factor · factorᵀ ≈ M`. Pivots
/// are taken while the largest remaining diagonal exceeds `rel_tol` times the largest
/// diagonal of `M`; the residual left out has no diagonal entry above that threshold.
/// Every column is a combination of columns of `M`, so rows for nearly equal inputs of
/// a smooth kernel stay nearly equal. Nothing is added to the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedFactor {
    pub factor: DMatrix<f64>,
    /// Row chosen at each pivot step.
    pub pivots: Vec<usize>,
}

pub fn pivoted_cholesky(m: &DMatrix<f64>, rel_tol: f64) -> PivotedFactor {
    let n = m.nrows();
    let mut residual: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let top = residual.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = rel_tol * top;
    let mut done = vec![false; n];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    loop {
        let mut pick = None;
        let mut best = tol;
        for i in 0..n {
            if !done[i] && residual[i] > best {
                best = residual[i];
                pick = Some(i);
            }
        }
        let Some(p) = pick else { break };
        done[p] = true;
        let mut col: Vec<f64> = m.column(p).iter().copied().collect();
        for c in &cols {
            let f = c[p];
            if f != 0.0 {
                for (v, ci) in col.iter_mut().zip(c) {
                    *v -= f * ci;
                }
            }
        }
        let piv = best.sqrt();
        for i in 0..n {
            col[i] = if done[i] { 0.0 } else { col[i] / piv };
        }
        col[p] = piv;
        for i in 0..n {
            if !done[i] {
                residual[i] -= col[i] * col[i];
            }
        }
        cols.push(col);
        pivots.push(p);
    }
    let r = cols.len();
    PivotedFactor {
        factor: DMatrix::from_fn(n, r, |i, j| cols[j][i]),
        pivots,
    }
}
