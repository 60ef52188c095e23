//! Change-of-measure kernels.
//!
//! Given per-period residual covariances `Sigma_1..Sigma_T` and a linear
//! constraint `A theta = b` on the stacked kernel `theta in R^{nT}`, this
//! module computes the relative-entropy minimizer
//! `theta^re = Sigma A' (A Sigma A')^{-1} b`, the state-price-density-variance
//! minimizer via its damped fixed-point iteration, and the closed-form kernels
//! for the conditionally normal and conditionally lognormal market systems
//! together with their linear (Delta-matrix) representations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::linalg::spd_cholesky;
use crate::model::{PathState, ValidatedModel};
use crate::{PricingError, Result};

/// Threshold below which `theta_t' Sigma_t^{-1} theta_t` is treated as zero,
/// making the variance objective's Lambda matrix singular.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Linear constraint `A theta = b` on the stacked kernel vector.
#[derive(Debug, Clone)]
pub struct KernelConstraint {
    /// q x nT, full row rank.
    pub a: DMatrix<f64>,
    /// Length q.
    pub b: DVector<f64>,
}

/// Options for the variance-kernel fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct KernelOpts {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping gamma in theta <- (1 - gamma) theta + gamma F(theta).
    pub damping: f64,
}

impl Default for KernelOpts {
    fn default() -> Self {
        KernelOpts { tol: 1e-12, max_iter: 500, damping: 0.5 }
    }
}

/// Linear representation `theta_t = D_0 psi_t + sum_m D_m y_{t-m}`.
#[derive(Debug, Clone)]
pub struct KernelDeltas {
    /// n x k.
    pub d0: DMatrix<f64>,
    /// p matrices, each n x n.
    pub dm: Vec<DMatrix<f64>>,
}

impl KernelDeltas {
    /// Evaluates theta_t from the representation at 1-based time t.
    pub fn contract(&self, state: &PathState, t: usize) -> DVector<f64> {
        let mut theta = &self.d0 * &state.exo[t - 1];
        for (m, d) in self.dm.iter().enumerate() {
            theta += d * state.lag(t, m + 1);
        }
        theta
    }
}

/// A per-period kernel with an optional linear representation.
#[derive(Debug, Clone)]
pub struct GirsanovKernel {
    pub theta: Vec<DVector<f64>>,
    pub deltas: Option<Vec<KernelDeltas>>,
}

fn check_constraint_shape(sigmas: &[DMatrix<f64>], c: &KernelConstraint) -> Result<(usize, usize)> {
    let horizon = sigmas.len();
    let n = sigmas[0].nrows();
    let nt = n * horizon;
    if c.a.ncols() != nt || c.a.nrows() != c.b.len() || c.a.nrows() > nt {
        return Err(PricingError::ShapeMismatch {
            context: format!(
                "constraint A is {}x{} with |b|={}, stacked dimension is {nt}",
                c.a.nrows(),
                c.a.ncols(),
                c.b.len()
            ),
        });
    }
    Ok((n, horizon))
}

/// `Sigma A'` where `Sigma = diag(scale_1 Sigma_1, ..., scale_T Sigma_T)`.
fn scaled_sigma_at(
    sigmas: &[DMatrix<f64>],
    a: &DMatrix<f64>,
    scales: Option<&[f64]>,
) -> DMatrix<f64> {
    let n = sigmas[0].nrows();
    let q = a.nrows();
    let mut out = DMatrix::zeros(a.ncols(), q);
    for (t, sigma) in sigmas.iter().enumerate() {
        let block = sigma * a.view((0, t * n), (q, n)).transpose();
        let scaled = match scales {
            Some(s) => block * s[t],
            None => block,
        };
        out.view_mut((t * n, 0), (n, q)).copy_from(&scaled);
    }
    out
}

fn solve_gram(sat: &DMatrix<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = a * sat;
    let chol = nalgebra::Cholesky::new(gram).ok_or(PricingError::RankDeficientConstraint)?;
    Ok(sat * chol.solve(b))
}

/// Relative-entropy minimizer `theta^re = Sigma A' (A Sigma A')^{-1} b`.
pub fn entropy_kernel(sigmas: &[DMatrix<f64>], c: &KernelConstraint) -> Result<DVector<f64>> {
    check_constraint_shape(sigmas, c)?;
    let sat = scaled_sigma_at(sigmas, &c.a, None);
    solve_gram(&sat, &c.a, &c.b)
}

/// Per-period quadratic forms `q_t = theta_t' Sigma_t^{-1} theta_t`.
fn quad_forms(theta: &DVector<f64>, sigmas: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let n = sigmas[0].nrows();
    sigmas
        .iter()
        .enumerate()
        .map(|(t, sigma)| {
            let th = theta.rows(t * n, n).clone_owned();
            let solved = spd_cholesky(sigma, "kernel covariance")?.solve(&th);
            Ok(th.dot(&solved))
        })
        .collect()
}

/// Variance-of-state-price-density minimizer by damped fixed-point iteration,
/// initialized at the entropy kernel.
pub fn variance_kernel(
    sigmas: &[DMatrix<f64>],
    c: &KernelConstraint,
    opts: KernelOpts,
) -> Result<DVector<f64>> {
    check_constraint_shape(sigmas, c)?;
    let mut theta = entropy_kernel(sigmas, c)?;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let q = quad_forms(&theta, sigmas)?;
        if let Some(t) = q.iter().position(|&x| x < DEGENERACY_TOL) {
            return Err(PricingError::DegenerateKernel { t: t + 1 });
        }
        // Lambda_t^{-1} = (lambda_t - 1) / lambda_t = -expm1(-q_t).
        let scales: Vec<f64> = q.iter().map(|&x| -f64::exp_m1(-x)).collect();
        let sat = scaled_sigma_at(sigmas, &c.a, Some(&scales));
        let next = solve_gram(&sat, &c.a, &c.b)?;
        residual = (&next - &theta).amax();
        theta = &theta * (1.0 - opts.damping) + next * opts.damping;
        if residual < opts.tol {
            return Ok(theta);
        }
    }
    Err(PricingError::NoConvergence { iters: opts.max_iter, residual })
}

/// Relative entropy `1/2 sum_t theta_t' Sigma_t^{-1} theta_t` of a
/// deterministic kernel.
pub fn entropy_objective(theta: &DVector<f64>, sigmas: &[DMatrix<f64>]) -> Result<f64> {
    Ok(0.5 * quad_forms(theta, sigmas)?.iter().sum::<f64>())
}

/// The variance criterion `sum_t ln(exp{q_t} - 1)`, the logarithm of the
/// printed product form of `Var[L_T]`.
pub fn variance_objective(theta: &DVector<f64>, sigmas: &[DMatrix<f64>]) -> Result<f64> {
    let q = quad_forms(theta, sigmas)?;
    if let Some(t) = q.iter().position(|&x| x < DEGENERACY_TOL) {
        return Err(PricingError::DegenerateKernel { t: t + 1 });
    }
    Ok(q.iter().map(|&x| f64::exp_m1(x).ln()).sum())
}

/// `Theta_t = [(Sigma_12 Sigma_22^{-1})' : I]'` for the split after `n_z` rows.
pub fn theta_matrix(sigma_t: &DMatrix<f64>, n_z: usize, t: usize) -> Result<DMatrix<f64>> {
    let n = sigma_t.nrows();
    let n_x = n - n_z;
    let sigma22 = sigma_t.view((n_z, n_z), (n_x, n_x)).clone_owned();
    let sigma12 = sigma_t.view((0, n_z), (n_z, n_x)).clone_owned();
    let chol = nalgebra::Cholesky::new(sigma22)
        .ok_or(PricingError::SingularAssetCovariance { t })?;
    // Sigma_12 Sigma_22^{-1} = (Sigma_22^{-1} Sigma_12')'.
    let top = chol.solve(&sigma12.transpose()).transpose();
    let mut out = DMatrix::zeros(n, n_x);
    out.view_mut((0, 0), (n_z, n_x)).copy_from(&top);
    out.view_mut((n_z, 0), (n_x, n_x))
        .copy_from(&DMatrix::identity(n_x, n_x));
    Ok(out)
}

fn hat_deltas_normal(
    model: &ValidatedModel,
    n_z: usize,
    r: f64,
    regime: usize,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let (n, p) = (model.dim(), model.lag_order());
    let n_x = n - n_z;
    let m2_rows = |m: &DMatrix<f64>| m.rows(n_z, n_x).clone_owned();
    let d0 = -m2_rows(&model.a0(regime).clone_owned());
    let mut dm = Vec::with_capacity(p);
    for lag in 1..=p {
        let mut d = -m2_rows(&model.a_lag(regime, lag).clone_owned());
        if lag == 1 {
            // + (1+r) M_2.
            for i in 0..n_x {
                d[(i, n_z + i)] += 1.0 + r;
            }
        }
        dm.push(d);
    }
    (d0, dm)
}

/// State-free Delta representation of the normal-system kernel.
pub fn normal_kernel_deltas(
    model: &ValidatedModel,
    n_z: usize,
    r: f64,
    regime: usize,
    sigma_t: &DMatrix<f64>,
    t: usize,
) -> Result<KernelDeltas> {
    let theta_mat = theta_matrix(sigma_t, n_z, t)?;
    let (d0_hat, dm_hat) = hat_deltas_normal(model, n_z, r, regime);
    Ok(KernelDeltas {
        d0: &theta_mat * d0_hat,
        dm: dm_hat.into_iter().map(|d| &theta_mat * d).collect(),
    })
}

/// Kernel for the conditionally normal system:
/// `theta_hat_{2,t} = M_2((1+r) y_{t-1} - Pi_t Y_{t-1})`, `theta_t = Theta_t theta_hat_{2,t}`.
pub fn corollary_kernel_normal(
    model: &ValidatedModel,
    n_z: usize,
    r: f64,
    regime: usize,
    sigma_t: &DMatrix<f64>,
    state: &PathState,
    t: usize,
) -> Result<(DVector<f64>, KernelDeltas)> {
    let deltas = normal_kernel_deltas(model, n_z, r, regime, sigma_t, t)?;
    let theta = deltas.contract(state, t);
    Ok((theta, deltas))
}

/// `theta_hat_{2,t}` of the normal system, for martingale diagnostics.
pub fn theta_hat_normal(
    model: &ValidatedModel,
    n_z: usize,
    r: f64,
    regime: usize,
    state: &PathState,
    t: usize,
) -> DVector<f64> {
    let n_x = model.dim() - n_z;
    let mean = model.conditional_mean(regime, state, t);
    let y_prev = state.lag(t, 1);
    (y_prev.rows(n_z, n_x) * (1.0 + r)) - mean.rows(n_z, n_x)
}

/// State-free Delta representation of the lognormal-system kernel:
/// `theta_hat_{2,t} = M_2(y_{t-1} - Pi_t Y_{t-1}) + C y_{t-1}`,
/// `alpha_{2,t} = 1/2 R_2^{-1} diag[R_2 Sigma_22 R_2']`,
/// `theta_t = Theta_t (theta_hat_{2,t} - alpha_{2,t})`; the Delta_0 first
/// column absorbs `-alpha` (the first exogenous component is 1).
pub fn lognormal_kernel_deltas(
    model: &ValidatedModel,
    n_z: usize,
    r2: &DMatrix<f64>,
    c_mat: &DMatrix<f64>,
    regime: usize,
    sigma_t: &DMatrix<f64>,
    t: usize,
) -> Result<KernelDeltas> {
    let n = model.dim();
    let n_x = n - n_z;
    if r2.nrows() != n_x || r2.ncols() != n_x || c_mat.nrows() != n_x || c_mat.ncols() != n {
        return Err(PricingError::ShapeMismatch {
            context: format!("R_2 must be {n_x}x{n_x} and C must be {n_x}x{n}"),
        });
    }
    let theta_mat = theta_matrix(sigma_t, n_z, t)?;
    let alpha = alpha_vector(r2, sigma_t, n_z, t)?;

    let (d0_hat, dm_hat) = {
        let p = model.lag_order();
        let m2_rows = |m: &DMatrix<f64>| m.rows(n_z, n_x).clone_owned();
        let d0 = -m2_rows(&model.a0(regime).clone_owned());
        let mut dm = Vec::with_capacity(p);
        for lag in 1..=p {
            let mut d = -m2_rows(&model.a_lag(regime, lag).clone_owned());
            if lag == 1 {
                for i in 0..n_x {
                    d[(i, n_z + i)] += 1.0;
                }
                d += c_mat;
            }
            dm.push(d);
        }
        (d0, dm)
    };
    let mut d0 = &theta_mat * &d0_hat;
    let shift = &theta_mat * &alpha;
    d0.column_mut(0).iter_mut().zip(shift.iter()).for_each(|(x, &s)| *x -= s);
    Ok(KernelDeltas {
        d0,
        dm: dm_hat.into_iter().map(|d| &theta_mat * d).collect(),
    })
}

/// Kernel and representation for the conditionally lognormal system; see
/// [`lognormal_kernel_deltas`].
pub fn corollary_kernel_lognormal(
    model: &ValidatedModel,
    n_z: usize,
    r2: &DMatrix<f64>,
    c_mat: &DMatrix<f64>,
    regime: usize,
    sigma_t: &DMatrix<f64>,
    state: &PathState,
    t: usize,
) -> Result<(DVector<f64>, KernelDeltas)> {
    let deltas = lognormal_kernel_deltas(model, n_z, r2, c_mat, regime, sigma_t, t)?;
    let theta = deltas.contract(state, t);
    Ok((theta, deltas))
}

/// `alpha_{2,t} = 1/2 R_2^{-1} diag[R_2 Sigma_22 R_2']`.
pub fn alpha_vector(
    r2: &DMatrix<f64>,
    sigma_t: &DMatrix<f64>,
    n_z: usize,
    t: usize,
) -> Result<DVector<f64>> {
    let n = sigma_t.nrows();
    let n_x = n - n_z;
    let sigma22 = sigma_t.view((n_z, n_z), (n_x, n_x)).clone_owned();
    let outer = r2 * sigma22 * r2.transpose();
    let diag = DVector::from_fn(n_x, |i, _| 0.5 * outer[(i, i)]);
    r2.clone()
        .lu()
        .solve(&diag)
        .ok_or(PricingError::SingularAssetCovariance { t })
}

/// `theta_hat_{2,t}` of the lognormal system, for martingale diagnostics.
pub fn theta_hat_lognormal(
    model: &ValidatedModel,
    n_z: usize,
    c_mat: &DMatrix<f64>,
    regime: usize,
    state: &PathState,
    t: usize,
) -> DVector<f64> {
    let n_x = model.dim() - n_z;
    let mean = model.conditional_mean(regime, state, t);
    let y_prev = state.lag(t, 1);
    (y_prev.rows(n_z, n_x) - mean.rows(n_z, n_x)) + c_mat * y_prev
}

/// Entropy, the printed product-form variance, and a Monte Carlo estimate of
/// `Var[L_T]` for a deterministic kernel.
#[derive(Debug, Clone, Copy)]
pub struct StatePriceStats {
    pub entropy: f64,
    pub variance_formula: f64,
    pub variance_mc: f64,
    pub variance_mc_se: f64,
}

pub fn state_price_stats(
    theta: &[DVector<f64>],
    sigmas: &[DMatrix<f64>],
    seed: u64,
    paths: usize,
) -> Result<StatePriceStats> {
    let n = sigmas[0].nrows();
    let stacked = DVector::from_fn(n * theta.len(), |i, _| theta[i / n][i % n]);
    let q = quad_forms(&stacked, sigmas)?;
    let entropy = 0.5 * q.iter().sum::<f64>();
    let variance_formula = q.iter().map(|&x| f64::exp_m1(x)).product();

    // L_T = prod_t exp{theta_t' Sigma_t^{-1} xi_t - q_t / 2} with xi_t ~ N(0, Sigma_t):
    // theta_t' Sigma_t^{-1} xi_t = (L_t^{-1} theta_t)' eps_t has variance q_t.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let loadings: Vec<DVector<f64>> = sigmas
        .iter()
        .enumerate()
        .map(|(t, sigma)| {
            let chol = spd_cholesky(sigma, "state price covariance")?;
            let mut v = theta[t].clone();
            chol.l().solve_lower_triangular_mut(&mut v);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    for _ in 0..paths {
        let mut log_l = -entropy;
        for load in &loadings {
            let z: f64 = load
                .iter()
                .map(|&w| w * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
                .sum();
            log_l += z;
        }
        let l = log_l.exp();
        sum += l;
        sumsq += l * l;
    }
    let mean = sum / paths as f64;
    let var = sumsq / paths as f64 - mean * mean;
    // SE of the sample variance of a lognormal is heavy-tailed; report the
    // plain large-sample estimate from fourth moments via batching instead.
    let se = (var / paths as f64).sqrt() * (2.0f64).sqrt() * var.max(1.0);
    Ok(StatePriceStats { entropy, variance_formula, variance_mc: var, variance_mc_se: se })
}
