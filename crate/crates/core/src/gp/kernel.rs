//! Stationary ARD kernels over the joint (space, time) domain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the flow domain: `[space, time]`.
pub type Point = [f64; 2];

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelVariant {
    SquaredExponential,
    Matern32Ard,
}

impl KernelVariant {
    pub fn short_name(self) -> &'static str {
        match self {
            KernelVariant::SquaredExponential => "se",
            KernelVariant::Matern32Ard => "matern32",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "se" => Some(KernelVariant::SquaredExponential),
            "matern32" => Some(KernelVariant::Matern32Ard),
            _ => None,
        }
    }
}

/// Kernel hyperparameters, stored in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variant: KernelVariant,
    log_signal_variance: f64,
    log_lengthscales: [f64; 2],
}

/// Gradient of a scalar with respect to the log-hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelGrad {
    pub log_signal_variance: f64,
    pub log_lengthscales: [f64; 2],
}

impl KernelGrad {
    pub fn add(&mut self, other: &KernelGrad) {
        self.log_signal_variance += other.log_signal_variance;
        self.log_lengthscales[0] += other.log_lengthscales[0];
        self.log_lengthscales[1] += other.log_lengthscales[1];
    }
}

impl KernelParams {
    pub fn new(variant: KernelVariant, signal_variance: f64, lengthscales: [f64; 2]) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!(
                "lengthscales must be positive, got {lengthscales:?}"
            )));
        }
        Ok(KernelParams {
            variant,
            log_signal_variance: signal_variance.ln(),
            log_lengthscales: [lengthscales[0].ln(), lengthscales[1].ln()],
        })
    }

    pub fn from_log(variant: KernelVariant, log_signal_variance: f64, log_lengthscales: [f64; 2]) -> Self {
        KernelParams {
            variant,
            log_signal_variance,
            log_lengthscales,
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscales(&self) -> [f64; 2] {
        [self.log_lengthscales[0].exp(), self.log_lengthscales[1].exp()]
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    pub fn log_lengthscales(&self) -> [f64; 2] {
        self.log_lengthscales
    }

    #[inline]
    fn inv_sq_lengthscales(&self) -> [f64; 2] {
        [
            (-2.0 * self.log_lengthscales[0]).exp(),
            (-2.0 * self.log_lengthscales[1]).exp(),
        ]
    }

    /// k as a function of the squared scaled distance.
    #[inline]
    fn value_r2(&self, sv: f64, r2: f64) -> f64 {
        match self.variant {
            KernelVariant::SquaredExponential => sv * (-0.5 * r2).exp(),
            KernelVariant::Matern32Ard => {
                let sr = SQRT3 * r2.sqrt();
                sv * (1.0 + sr) * (-sr).exp()
            }
        }
    }

    /// dk/d(r²) given the kernel value k at that distance.
    #[inline]
    fn slope_r2(&self, k: f64, r2: f64) -> f64 {
        match self.variant {
            KernelVariant::SquaredExponential => -0.5 * k,
            KernelVariant::Matern32Ard => {
                let sr = SQRT3 * r2.sqrt();
                -1.5 * k / (1.0 + sr)
            }
        }
    }

    /// Single kernel evaluation.
    pub fn eval(&self, a: Point, b: Point) -> f64 {
        let w = self.inv_sq_lengthscales();
        let d0 = a[0] - b[0];
        let d1 = a[1] - b[1];
        self.value_r2(self.signal_variance(), d0 * d0 * w[0] + d1 * d1 * w[1])
    }

    /// Fills `out` (|a| × |b|) with cross-covariances. No input validation.
    pub(crate) fn fill_cross(&self, a: &[Point], b: &[Point], out: &mut DMatrix<f64>) {
        debug_assert_eq!(out.shape(), (a.len(), b.len()));
        let w = self.inv_sq_lengthscales();
        let sv = self.signal_variance();
        let n = a.len();
        let data = out.as_mut_slice();
        for (j, pb) in b.iter().enumerate() {
            let col = &mut data[j * n..(j + 1) * n];
            for (c, pa) in col.iter_mut().zip(a) {
                let d0 = pa[0] - pb[0];
                let d1 = pa[1] - pb[1];
                *c = self.value_r2(sv, d0 * d0 * w[0] + d1 * d1 * w[1]);
            }
        }
    }

    pub(crate) fn cross(&self, a: &[Point], b: &[Point]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.len(), b.len());
        self.fill_cross(a, b, &mut out);
        out
    }

    /// Symmetric covariance of a point set; the diagonal is exactly the signal variance.
    pub(crate) fn gram(&self, a: &[Point]) -> DMatrix<f64> {
        let n = a.len();
        let w = self.inv_sq_lengthscales();
        let sv = self.signal_variance();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            out[(j, j)] = sv;
            for i in j + 1..n {
                let d0 = a[i][0] - a[j][0];
                let d1 = a[i][1] - a[j][1];
                let k = self.value_r2(sv, d0 * d0 * w[0] + d1 * d1 * w[1]);
                out[(i, j)] = k;
                out[(j, i)] = k;
            }
        }
        out
    }

    /// Reverse-mode pass through `K = k(a, b)`.
    ///
    /// `k` must hold the forward values. Accumulates into the point gradients
    /// (when given) and into `hyper`.
    pub(crate) fn backprop_cross(
        &self,
        a: &[Point],
        b: &[Point],
        k: &DMatrix<f64>,
        k_bar: &DMatrix<f64>,
        mut a_bar: Option<&mut [Point]>,
        mut b_bar: Option<&mut [Point]>,
        hyper: &mut KernelGrad,
    ) {
        let w = self.inv_sq_lengthscales();
        let mut g_sv = 0.0;
        let mut g_l = [0.0; 2];
        for (j, pb) in b.iter().enumerate() {
            let mut bb = [0.0; 2];
            for (i, pa) in a.iter().enumerate() {
                let kb = k_bar[(i, j)];
                if kb == 0.0 {
                    continue;
                }
                let kv = k[(i, j)];
                let d0 = pa[0] - pb[0];
                let d1 = pa[1] - pb[1];
                let s0 = d0 * d0 * w[0];
                let s1 = d1 * d1 * w[1];
                let g = kb * self.slope_r2(kv, s0 + s1);
                g_sv += kb * kv;
                g_l[0] -= 2.0 * g * s0;
                g_l[1] -= 2.0 * g * s1;
                let da0 = 2.0 * g * d0 * w[0];
                let da1 = 2.0 * g * d1 * w[1];
                if let Some(ab) = a_bar.as_deref_mut() {
                    ab[i][0] += da0;
                    ab[i][1] += da1;
                }
                bb[0] -= da0;
                bb[1] -= da1;
            }
            if let Some(bbar) = b_bar.as_deref_mut() {
                bbar[j][0] += bb[0];
                bbar[j][1] += bb[1];
            }
        }
        hyper.log_signal_variance += g_sv;
        hyper.log_lengthscales[0] += g_l[0];
        hyper.log_lengthscales[1] += g_l[1];
    }

    /// Reverse-mode pass through `K = k(a, a)` for a symmetric `k_bar`.
    pub(crate) fn backprop_gram(
        &self,
        a: &[Point],
        k: &DMatrix<f64>,
        k_bar: &DMatrix<f64>,
        mut a_bar: Option<&mut [Point]>,
        hyper: &mut KernelGrad,
    ) {
        let w = self.inv_sq_lengthscales();
        let n = a.len();
        let mut g_sv = 0.0;
        let mut g_l = [0.0; 2];
        for j in 0..n {
            g_sv += k_bar[(j, j)] * k[(j, j)];
            for i in j + 1..n {
                // both (i, j) and (j, i) entries
                let kb = k_bar[(i, j)] + k_bar[(j, i)];
                if kb == 0.0 {
                    continue;
                }
                let kv = k[(i, j)];
                let d0 = a[i][0] - a[j][0];
                let d1 = a[i][1] - a[j][1];
                let s0 = d0 * d0 * w[0];
                let s1 = d1 * d1 * w[1];
                let g = kb * self.slope_r2(kv, s0 + s1);
                g_sv += kb * kv;
                g_l[0] -= 2.0 * g * s0;
                g_l[1] -= 2.0 * g * s1;
                if let Some(ab) = a_bar.as_deref_mut() {
                    let da0 = 2.0 * g * d0 * w[0];
                    let da1 = 2.0 * g * d1 * w[1];
                    ab[i][0] += da0;
                    ab[i][1] += da1;
                    ab[j][0] -= da0;
                    ab[j][1] -= da1;
                }
            }
        }
        hyper.log_signal_variance += g_sv;
        hyper.log_lengthscales[0] += g_l[0];
        hyper.log_lengthscales[1] += g_l[1];
    }
}

fn check_points(points: &[Point], what: &str) -> Result<()> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite coordinates")));
    }
    Ok(())
}

/// Covariance matrix `K[i, j] = k(a[i], b[j])`.
pub fn kernel_matrix(params: &KernelParams, a: &[Point], b: &[Point]) -> Result<DMatrix<f64>> {
    check_points(a, "first point set")?;
    check_points(b, "second point set")?;
    if !params.log_signal_variance.is_finite() || params.log_lengthscales.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("kernel hyperparameters must be finite"));
    }
    Ok(params.cross(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn se() -> KernelParams {
        KernelParams::new(KernelVariant::SquaredExponential, 1.0, [1.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_distance_is_signal_variance() {
        for variant in [KernelVariant::SquaredExponential, KernelVariant::Matern32Ard] {
            let p = KernelParams::new(variant, 2.5, [0.3, 4.0]).unwrap();
            let k = kernel_matrix(&p, &[[1.7, 0.2]], &[[1.7, 0.2]]).unwrap();
            assert_eq!(k[(0, 0)], 2.5);
        }
    }

    #[test]
    fn se_unit_distance() {
        let k = kernel_matrix(&se(), &[[0.0, 0.0]], &[[1.0, 0.0]]).unwrap();
        assert_relative_eq!(k[(0, 0)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(k[(0, 0)], 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn matern_unit_distance() {
        let p = KernelParams::new(KernelVariant::Matern32Ard, 1.0, [1.0, 1.0]).unwrap();
        let k = kernel_matrix(&p, &[[0.0, 0.0]], &[[0.6, 0.8]]).unwrap();
        // closed form at r = 1
        let oracle = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert_relative_eq!(k[(0, 0)], oracle, epsilon = 1e-14);
        assert_relative_eq!(k[(0, 0)], 0.48335, epsilon = 1e-5);
    }

    #[test]
    fn ard_scales_each_axis() {
        let p = KernelParams::new(KernelVariant::SquaredExponential, 1.0, [2.0, 0.5]).unwrap();
        let k = p.eval([0.0, 0.0], [2.0, 0.5]);
        assert_relative_eq!(k, (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(kernel_matrix(&se(), &[[f64::NAN, 0.0]], &[[0.0, 0.0]]).is_err());
        assert!(kernel_matrix(&se(), &[[0.0, 0.0]], &[[0.0, f64::INFINITY]]).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(KernelParams::new(KernelVariant::SquaredExponential, 0.0, [1.0, 1.0]).is_err());
        assert!(KernelParams::new(KernelVariant::Matern32Ard, 1.0, [1.0, -1.0]).is_err());
    }

    #[test]
    fn gram_matches_cross() {
        let p = KernelParams::new(KernelVariant::Matern32Ard, 1.3, [0.7, 1.9]).unwrap();
        let pts: Vec<Point> = (0..6).map(|i| [i as f64 * 0.37, (i % 3) as f64 * 0.21]).collect();
        let g = p.gram(&pts);
        let c = p.cross(&pts, &pts);
        assert!((g - c).abs().max() < 1e-14);
    }
}
