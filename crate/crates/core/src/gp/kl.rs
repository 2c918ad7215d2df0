//! KL(N(m, S) ‖ N(0, K)) in closed form using triangular solves.

use nalgebra::{DMatrix, DVector};

use super::linalg::CholFactor;
use crate::error::{Error, Result};

/// KL divergence between `N(m, L_S L_Sᵀ)` and `N(0, K)` with `K = L_K L_Kᵀ`.
pub fn gaussian_kl(m: &DVector<f64>, s_factor: &CholFactor, prior_factor: &CholFactor) -> Result<f64> {
    check_dims(m, s_factor.l(), prior_factor)?;
    Ok(kl_lower(m, s_factor.l(), prior_factor))
}

fn check_dims(m: &DVector<f64>, s_l: &DMatrix<f64>, prior: &CholFactor) -> Result<()> {
    let dim = prior.dim();
    if m.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "KL mean",
            expected: dim,
            got: m.len(),
        });
    }
    if s_l.nrows() != dim || s_l.ncols() != dim {
        return Err(Error::DimensionMismatch {
            what: "KL covariance factor",
            expected: dim,
            got: s_l.nrows(),
        });
    }
    Ok(())
}

/// Same as [`gaussian_kl`] for a raw lower-triangular `L_S` with positive diagonal.
pub(crate) fn kl_lower(m: &DVector<f64>, s_l: &DMatrix<f64>, prior: &CholFactor) -> f64 {
    let dim = m.len() as f64;
    let b = prior.solve_lower(s_l);
    let trace = b.norm_squared();
    let mahal = prior.solve_lower_vec(m).norm_squared();
    let log_det_s = 2.0 * s_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (trace + mahal - dim + prior.log_det() - log_det_s)
}

/// Gradients of the KL with respect to `m`, `L_S` (lower triangle, including the
/// `-1/L_ii` log-det term) and the (jittered) prior covariance `K` (symmetric).
pub(crate) struct KlGrad {
    pub m: DVector<f64>,
    pub s_l: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

pub(crate) fn kl_lower_grad(m: &DVector<f64>, s_l: &DMatrix<f64>, prior: &CholFactor) -> KlGrad {
    let dim = m.len();
    let k_inv = prior.inverse();
    let k_inv_m = &k_inv * m;
    let k_inv_ls = &k_inv * s_l;
    let mut s_bar = k_inv_ls.lower_triangle();
    for i in 0..dim {
        s_bar[(i, i)] -= 1.0 / s_l[(i, i)];
    }
    // ½ [K⁻¹ − K⁻¹ (S + m mᵀ) K⁻¹]
    let mut k_bar = &k_inv - &k_inv_ls * k_inv_ls.transpose() - &k_inv_m * k_inv_m.transpose();
    k_bar *= 0.5;
    super::linalg::symmetrize(&mut k_bar);
    KlGrad {
        m: k_inv_m,
        s_l: s_bar,
        k: k_bar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::linalg::cholesky;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.3
    }

    /// Explicit inverse and determinant, independent of the triangular-solve route.
    fn dense_kl(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
        let k_inv = k.clone().try_inverse().unwrap();
        let n = m.len() as f64;
        0.5 * ((&k_inv * s).trace() + (m.transpose() * &k_inv * m)[(0, 0)] - n + k.determinant().ln()
            - s.determinant().ln())
    }

    #[test]
    fn identical_distributions_have_zero_kl() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let k = random_spd(6, &mut rng);
        let f = cholesky(&k, 0.0).unwrap();
        let kl = gaussian_kl(&DVector::zeros(6), &f, &f).unwrap();
        assert!(kl.abs() < 1e-10, "{kl}");
    }

    #[test]
    fn one_dimensional_mean_shift() {
        let one = cholesky(&DMatrix::identity(1, 1), 0.0).unwrap();
        let kl = gaussian_kl(&DVector::from_vec(vec![1.0]), &one, &one).unwrap();
        assert_relative_eq!(kl, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for n in [1usize, 3, 5, 12, 20] {
            let k = random_spd(n, &mut rng);
            let s = random_spd(n, &mut rng);
            let m = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let kf = cholesky(&k, 0.0).unwrap();
            let sf = cholesky(&s, 0.0).unwrap();
            let kl = gaussian_kl(&m, &sf, &kf).unwrap();
            let oracle = dense_kl(&m, &s, &k);
            assert!(kl >= -1e-10);
            assert_relative_eq!(kl, oracle, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn mean_gradient_matches_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = random_spd(5, &mut rng);
        let s = random_spd(5, &mut rng);
        let m = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
        let kf = cholesky(&k, 0.0).unwrap();
        let sf = cholesky(&s, 0.0).unwrap();
        let g = kl_lower_grad(&m, sf.l(), &kf);
        let oracle = k.clone().try_inverse().unwrap() * &m;
        assert!((g.m - oracle).amax() < 1e-8);
    }

    #[test]
    fn factor_and_prior_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 4;
        let k = random_spd(n, &mut rng);
        let s = random_spd(n, &mut rng);
        let m = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let kf = cholesky(&k, 0.0).unwrap();
        let sl = cholesky(&s, 0.0).unwrap().into_l();
        let g = kl_lower_grad(&m, &sl, &kf);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut p = sl.clone();
                let mut q = sl.clone();
                p[(i, j)] += h;
                q[(i, j)] -= h;
                let fd = (kl_lower(&m, &p, &kf) - kl_lower(&m, &q, &kf)) / (2.0 * h);
                assert_relative_eq!(fd, g.s_l[(i, j)], epsilon = 1e-7, max_relative = 1e-6);

                let mut kp = k.clone();
                let mut kq = k.clone();
                kp[(i, j)] += h;
                kq[(i, j)] -= h;
                if i != j {
                    kp[(j, i)] += h;
                    kq[(j, i)] -= h;
                }
                let fp = kl_lower(&m, &sl, &cholesky(&kp, 0.0).unwrap());
                let fq = kl_lower(&m, &sl, &cholesky(&kq, 0.0).unwrap());
                let fd = (fp - fq) / (2.0 * h);
                let an = if i == j { g.k[(i, i)] } else { g.k[(i, j)] + g.k[(j, i)] };
                assert_relative_eq!(fd, an, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }
}
