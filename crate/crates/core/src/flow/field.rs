//! Sparse flow-GP field evaluation and the joint Euler–Maruyama step, with the
//! reverse-mode pass used by training.

use nalgebra::{DMatrix, DVector};

use super::model::{DiffusionMode, FlowModel};
use crate::error::{Error, Result};
use crate::gp::linalg::{cholesky_unchecked, pivoted_cholesky, symmetrize, CholFactor};
use crate::gp::{KernelGrad, Point, DEFAULT_JITTER};

/// Particle positions at a solver time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub positions: Vec<f64>,
    pub time: f64,
}

/// `K_zz` and its jittered factor for a model's inducing inputs.
#[derive(Debug, Clone)]
pub(crate) struct InducingPrior {
    pub kzz: DMatrix<f64>,
    pub chol: CholFactor,
    /// `L_z⁻¹`, so per-step triangular solves become matrix products.
    pub lz_inv: DMatrix<f64>,
}

impl InducingPrior {
    pub fn new(model: &FlowModel) -> Result<Self> {
        let kzz = model.kernel.gram(&model.inducing);
        let chol = cholesky_unchecked(&kzz, DEFAULT_JITTER)?;
        let m = kzz.nrows();
        let lz_inv = chol.solve_lower(&DMatrix::identity(m, m));
        Ok(InducingPrior { kzz, chol, lz_inv })
    }
}

/// Groups particles sharing an exact position so that tied particles receive identical
/// increments. `None` when all positions are distinct.
#[derive(Debug, Clone)]
pub(crate) struct Ties {
    /// First particle index of each group.
    rep: Vec<usize>,
    /// Group of each particle.
    group: Vec<usize>,
}

fn find_ties(x: &[f64]) -> Option<Ties> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    if order.windows(2).all(|w| x[w[0]] != x[w[1]]) {
        return None;
    }
    let mut group = vec![usize::MAX; x.len()];
    let mut rep = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let members = &order[i..j];
        let first = *members.iter().min().unwrap();
        for &p in members {
            group[p] = rep.len();
        }
        rep.push(first);
        i = j;
    }
    Some(Ties { rep, group })
}

/// Residual variance, relative to the largest marginal variance, below which the
/// sampling factor stops pivoting.
pub(crate) const SAMPLING_TOL: f64 = 1e-10;

/// What a forward step is computed for.
///
/// Samples use a pivoted, truncated factor of the step covariance: it adds no
/// independent per-particle noise, so particles the flow has pushed close together
/// are not reordered. Training uses the jittered Cholesky factor, which is
/// differentiable in the parameters, where pivot choices are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StepUse {
    /// Drawing flow samples.
    Sample,
    /// Evaluating the training objective.
    Value,
    /// Evaluating the training objective and keeping the reverse-pass cache.
    Gradient,
}

#[derive(Debug, Clone)]
pub(crate) enum Diffusion {
    Joint(CholFactor),
    /// Marginal standard deviations.
    Independent(Vec<f64>),
    Off,
}

/// Forward quantities of one solver step, kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    ties: Option<Ties>,
    pts: Vec<Point>,
    kxz: DMatrix<f64>,
    a: DMatrix<f64>,
    kxx: DMatrix<f64>,
    clamped: Vec<bool>,
    diffusion: Diffusion,
    eps: Vec<f64>,
}

/// Gradient accumulators shared by all steps of a path.
#[derive(Debug, Clone)]
pub(crate) struct FieldGrad {
    pub alpha: DVector<f64>,
    pub lz: DMatrix<f64>,
    pub inducing: Vec<Point>,
    pub kernel: KernelGrad,
}

impl FieldGrad {
    pub fn zeros(m: usize) -> Self {
        FieldGrad {
            alpha: DVector::zeros(m),
            lz: DMatrix::zeros(m, m),
            inducing: vec![[0.0; 2]; m],
            kernel: KernelGrad::default(),
        }
    }
}

struct FieldEval {
    kxz: DMatrix<f64>,
    drift: DVector<f64>,
    a: DMatrix<f64>,
    kxx: DMatrix<f64>,
    cov: DMatrix<f64>,
    clamped: Vec<bool>,
}

/// Posterior mean and joint covariance of the flow GP at `pts`, given `alpha = K_zz⁻¹ u`.
fn eval_field(model: &FlowModel, prior: &InducingPrior, alpha: &DVector<f64>, pts: &[Point], with_cov: bool) -> FieldEval {
    let kxz = model.kernel.cross(pts, &model.inducing);
    let drift = &kxz * alpha;
    if !with_cov {
        return FieldEval {
            kxz,
            drift,
            a: DMatrix::zeros(0, 0),
            kxx: DMatrix::zeros(0, 0),
            cov: DMatrix::zeros(0, 0),
            clamped: Vec::new(),
        };
    }
    let a = &prior.lz_inv * kxz.transpose();
    let kxx = model.kernel.gram(pts);
    let mut cov = &kxx - a.transpose() * &a;
    symmetrize(&mut cov);
    let clamped = (0..pts.len())
        .map(|i| {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
                true
            } else {
                false
            }
        })
        .collect();
    FieldEval {
        kxz,
        drift,
        a,
        kxx,
        cov,
        clamped,
    }
}

fn check_u(model: &FlowModel, u: &DVector<f64>) -> Result<()> {
    if u.len() != model.n_inducing() {
        return Err(Error::DimensionMismatch {
            what: "inducing outputs",
            expected: model.n_inducing(),
            got: u.len(),
        });
    }
    Ok(())
}

fn check_state(model: &FlowModel, state: &ParticleState) -> Result<()> {
    let tol = 1e-12 * model.flow_time.max(1.0);
    if !(state.time >= -tol && state.time <= model.flow_time + tol) {
        return Err(Error::invalid(format!(
            "state time {} outside [0, {}]",
            state.time, model.flow_time
        )));
    }
    if state.positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("particle positions must be finite"));
    }
    Ok(())
}

/// Drift and joint diffusion covariance of the flow GP at `(position_i, time)` for all
/// particles, given inducing outputs `u`.
///
/// The covariance is symmetrized and its diagonal clamped at zero.
pub fn flow_field(model: &FlowModel, u: &DVector<f64>, state: &ParticleState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.validate()?;
    check_u(model, u)?;
    check_state(model, state)?;
    let prior = InducingPrior::new(model)?;
    let alpha = prior.chol.solve_vec(u);
    let pts: Vec<Point> = state.positions.iter().map(|&x| [x, state.time]).collect();
    let eval = eval_field(model, &prior, &alpha, &pts, true);
    Ok((eval.drift, eval.cov))
}

/// One Euler–Maruyama step: `Δx = drift·dt + L·eps·√dt` with `L Lᵀ` the joint covariance.
pub fn euler_maruyama_step(
    model: &FlowModel,
    u: &DVector<f64>,
    state: &ParticleState,
    eps: &[f64],
    dt: f64,
) -> Result<ParticleState> {
    model.validate()?;
    check_u(model, u)?;
    check_state(model, state)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("step size must be positive"));
    }
    if state.time + dt > model.flow_time + 1e-12 {
        return Err(Error::invalid("step would overshoot the flow time"));
    }
    if eps.len() != state.positions.len() {
        return Err(Error::DimensionMismatch {
            what: "step noise",
            expected: state.positions.len(),
            got: eps.len(),
        });
    }
    let prior = InducingPrior::new(model)?;
    let alpha = prior.chol.solve_vec(u);
    let (next, _) = step_forward(model, &prior, &alpha, &state.positions, state.time, eps, dt, StepUse::Sample)?;
    Ok(ParticleState {
        positions: next,
        time: state.time + dt,
    })
}

/// Forward step on raw slices. Returns the new positions and, for
/// [`StepUse::Gradient`], the cache needed by [`step_backward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_forward(
    model: &FlowModel,
    prior: &InducingPrior,
    alpha: &DVector<f64>,
    x: &[f64],
    t: f64,
    eps: &[f64],
    dt: f64,
    usage: StepUse,
) -> Result<(Vec<f64>, Option<StepCache>)> {
    let ties = find_ties(x);
    let (ux, ueps): (Vec<f64>, Vec<f64>) = match &ties {
        None => (x.to_vec(), eps.to_vec()),
        Some(t) => (t.rep.iter().map(|&r| x[r]).collect(), t.rep.iter().map(|&r| eps[r]).collect()),
    };
    let pts: Vec<Point> = ux.iter().map(|&p| [p, t]).collect();
    let with_cov = model.diffusion != DiffusionMode::Off;
    let eval = eval_field(model, prior, alpha, &pts, with_cov);
    let sqdt = dt.sqrt();
    let mut delta: Vec<f64> = eval.drift.iter().map(|d| d * dt).collect();
    let diffusion = match model.diffusion {
        DiffusionMode::Joint if usage == StepUse::Sample => {
            let pf = pivoted_cholesky(&eval.cov, SAMPLING_TOL);
            for (j, &p) in pf.pivots.iter().enumerate() {
                let s = sqdt * ueps[p];
                for (d, lij) in delta.iter_mut().zip(pf.factor.column(j).iter()) {
                    *d += s * lij;
                }
            }
            // samples keep no reverse-pass cache
            Diffusion::Off
        }
        DiffusionMode::Joint => {
            let lc = cholesky_unchecked(&eval.cov, DEFAULT_JITTER)?;
            let l = lc.l();
            let n = ueps.len();
            let ld = l.as_slice();
            // delta += √dt · L · eps, column by column
            for (j, &e) in ueps.iter().enumerate() {
                let s = sqdt * e;
                if s == 0.0 {
                    continue;
                }
                let col = &ld[j * n..(j + 1) * n];
                for (d, lij) in delta[j..].iter_mut().zip(&col[j..]) {
                    *d += s * lij;
                }
            }
            Diffusion::Joint(lc)
        }
        DiffusionMode::Independent => {
            let sd: Vec<f64> = (0..ux.len()).map(|i| eval.cov[(i, i)].sqrt()).collect();
            for i in 0..ux.len() {
                delta[i] += sqdt * sd[i] * ueps[i];
            }
            Diffusion::Independent(sd)
        }
        DiffusionMode::Off => Diffusion::Off,
    };
    let next: Vec<f64> = match &ties {
        None => x.iter().zip(&delta).map(|(a, d)| a + d).collect(),
        Some(t) => x.iter().zip(&t.group).map(|(a, &g)| a + delta[g]).collect(),
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter: f64::NAN });
    }
    let cache = (usage == StepUse::Gradient).then(|| StepCache {
        ties,
        pts,
        kxz: eval.kxz,
        a: eval.a,
        kxx: eval.kxx,
        clamped: eval.clamped,
        diffusion,
        eps: ueps,
    });
    Ok((next, cache))
}

/// Reverse pass of [`step_forward`]: maps the gradient with respect to the new positions
/// to the gradient with respect to the old positions, accumulating field gradients.
pub(crate) fn step_backward(
    model: &FlowModel,
    prior: &InducingPrior,
    alpha: &DVector<f64>,
    cache: &StepCache,
    dt: f64,
    next_bar: &[f64],
    acc: &mut FieldGrad,
) -> Vec<f64> {
    let u = cache.pts.len();
    let delta_bar: Vec<f64> = match &cache.ties {
        None => next_bar.to_vec(),
        Some(t) => {
            let mut b = vec![0.0; u];
            for (i, &g) in t.group.iter().enumerate() {
                b[g] += next_bar[i];
            }
            b
        }
    };
    let sqdt = dt.sqrt();
    let mut pts_bar = vec![[0.0; 2]; u];

    let cov_bar = match &cache.diffusion {
        Diffusion::Joint(lc) => {
            let mut l_bar = DMatrix::zeros(u, u);
            for j in 0..u {
                let e = sqdt * cache.eps[j];
                for i in j..u {
                    l_bar[(i, j)] = delta_bar[i] * e;
                }
            }
            let mut g = lc.backprop(&l_bar);
            lc.backprop_jitter(&mut g);
            Some(g)
        }
        Diffusion::Independent(sd) => {
            let mut g = DMatrix::zeros(u, u);
            for i in 0..u {
                if sd[i] > 0.0 {
                    g[(i, i)] = delta_bar[i] * sqdt * cache.eps[i] / (2.0 * sd[i]);
                }
            }
            Some(g)
        }
        Diffusion::Off => None,
    };

    // drift = K_xz α
    let drift_bar = DVector::from_iterator(u, delta_bar.iter().map(|b| b * dt));
    let mut kxz_bar = &drift_bar * alpha.transpose();
    acc.alpha.gemv_tr(1.0, &cache.kxz, &drift_bar, 1.0);

    if let Some(mut g) = cov_bar {
        for (i, &c) in cache.clamped.iter().enumerate() {
            if c {
                g[(i, i)] = 0.0;
            }
        }
        // cov = K_xx − AᵀA, A = L_z⁻¹ K_zx
        let a_bar = &cache.a * &g;
        let kzx_bar = prior.lz_inv.transpose() * a_bar * -2.0;
        let lz_update = &kzx_bar * cache.a.transpose();
        let m = lz_update.nrows();
        for j in 0..m {
            for i in j..m {
                acc.lz[(i, j)] -= lz_update[(i, j)];
            }
        }
        kxz_bar += kzx_bar.transpose();
        model
            .kernel
            .backprop_gram(&cache.pts, &cache.kxx, &g, Some(&mut pts_bar), &mut acc.kernel);
    }
    model.kernel.backprop_cross(
        &cache.pts,
        &model.inducing,
        &cache.kxz,
        &kxz_bar,
        Some(&mut pts_bar),
        Some(&mut acc.inducing),
        &mut acc.kernel,
    );

    let mut x_bar = next_bar.to_vec();
    match &cache.ties {
        None => {
            for (xb, pb) in x_bar.iter_mut().zip(&pts_bar) {
                *xb += pb[0];
            }
        }
        Some(t) => {
            for (g, &r) in t.rep.iter().enumerate() {
                x_bar[r] += pts_bar[g][0];
            }
        }
    }
    x_bar
}
