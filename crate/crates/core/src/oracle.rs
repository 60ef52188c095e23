//! Independent ground truth: risk-neutral Monte Carlo simulation and adaptive
//! Gaussian quadrature.
//!
//! The simulator draws `y_t = Pi_t Y_{t-1} + theta_t + Sigma_t^{1/2} eps_t`
//! with `theta_t` recomputed each step from the realized lags through its
//! Delta representation, exactly as the kernel's predictability requires.
//! Path-indexed RNG substreams make every estimate deterministic in the seed
//! and independent of how paths are batched.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::girsanov::KernelDeltas;
use crate::linalg::norm_pdf;
use crate::mixture::Estimate;
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::{PricingError, Result};

/// Normal draws needed for one trajectory.
fn normals_per_path(model: &ValidatedModel, horizon: usize, already: usize) -> usize {
    model.dim() * (horizon - already)
}

fn path_chols(
    model: &ValidatedModel,
    path: &RegimePath,
) -> Result<Vec<Cholesky<f64, Dyn>>> {
    let sigmas = model.covariance_path(path)?;
    sigmas
        .iter()
        .zip(&path.0)
        .map(|(s, &r)| model.sigma_chol(s, r))
        .collect()
}

/// Simulates the remaining periods of one trajectory from a flat buffer of
/// standard normal draws, recomputing `theta_t` from realized lags.
fn simulate_from_normals(
    model: &ValidatedModel,
    path: &RegimePath,
    deltas: &[KernelDeltas],
    chols: &[Cholesky<f64, Dyn>],
    state: &PathState,
    normals: &[f64],
) -> Vec<DVector<f64>> {
    let n = model.dim();
    let mut st = state.clone();
    let start = st.observed.len();
    for (step, t) in ((start + 1)..=path.horizon()).enumerate() {
        let s = path.0[t - 1];
        let theta = deltas[t - 1].contract(&st, t);
        let eps = DVector::from_column_slice(&normals[step * n..(step + 1) * n]);
        let y = model.conditional_mean(s, &st, t) + theta + chols[t - 1].l() * eps;
        st.push_observed(y);
    }
    st.observed
}

/// Simulates `n_paths` trajectories under the risk-neutral measure. Exposed
/// mainly for diagnostics; pricing should go through [`mc_price`].
pub fn simulate_under_q(
    model: &ValidatedModel,
    path: &RegimePath,
    deltas: &[KernelDeltas],
    state: &PathState,
    seed: u64,
    n_paths: usize,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let chols = path_chols(model, path)?;
    let count = normals_per_path(model, path.horizon(), state.observed.len());
    let mut out = Vec::with_capacity(n_paths);
    for i in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let normals: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
        out.push(simulate_from_normals(model, path, deltas, &chols, state, &normals));
    }
    Ok(out)
}

/// Monte Carlo estimate of `E[payoff(trajectory)]` under the risk-neutral
/// measure for a fixed regime path. The payoff receives the full trajectory
/// `y_1..y_T` (including any observed prefix) and must apply its own
/// discounting. With `antithetic`, each substream also contributes the
/// negated-noise trajectory.
pub fn mc_price<F>(
    model: &ValidatedModel,
    path: &RegimePath,
    deltas: &[KernelDeltas],
    state: &PathState,
    payoff: F,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<Estimate>
where
    F: Fn(&[DVector<f64>]) -> f64,
{
    let chols = path_chols(model, path)?;
    let count = normals_per_path(model, path.horizon(), state.observed.len());
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut normals = vec![0.0; count];
    for i in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for x in normals.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let mut value = payoff(&simulate_from_normals(
            model, path, deltas, &chols, state, &normals,
        ));
        if antithetic {
            for x in normals.iter_mut() {
                *x = -*x;
            }
            let mirrored = payoff(&simulate_from_normals(
                model, path, deltas, &chols, state, &normals,
            ));
            value = 0.5 * (value + mirrored);
        }
        sum += value;
        sumsq += value * value;
    }
    let mean = sum / n_paths as f64;
    let var = (sumsq / n_paths as f64 - mean * mean).max(0.0);
    Ok(Estimate { value: mean, std_error: (var / n_paths as f64).sqrt() })
}

const QUAD_MAX_DEPTH: usize = 40;

fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let gap = left + right - whole;
    if gap.abs() <= 15.0 * tol {
        return Ok(left + right + gap / 15.0);
    }
    if depth == 0 {
        return Err(PricingError::ToleranceNotMet { tol, gap: gap.abs() });
    }
    let l = adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}

fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, QUAD_MAX_DEPTH)
}

/// `E[f(X)]` for `X ~ N(mu, sigma^2)` by adaptive Simpson over ten standard
/// deviations each side.
pub fn quad_expectation_1d<F: Fn(f64) -> f64>(f: F, mu: f64, sigma: f64, tol: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Ok(f(mu));
    }
    let g = |x: f64| f(x) * norm_pdf((x - mu) / sigma) / sigma;
    integrate(&g, mu - 10.0 * sigma, mu + 10.0 * sigma, tol)
}

/// `E[f(X_1, X_2)]` for a bivariate normal, by nesting 1-D quadrature over the
/// conditional law of `X_2 | X_1`.
pub fn quad_expectation_2d<F: Fn(f64, f64) -> f64>(
    f: F,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    tol: f64,
) -> Result<f64> {
    let (mu1, mu2) = (mean[0], mean[1]);
    let (s11, s12, s22) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    if s11 <= 0.0 {
        return quad_expectation_1d(|x2| f(mu1, x2), mu2, s22.max(0.0).sqrt(), tol);
    }
    let cond_var = (s22 - s12 * s12 / s11).max(0.0);
    let cond_sd = cond_var.sqrt();
    let inner_tol = tol / 20.0;
    let outer = |x1: f64| {
        let cond_mean = mu2 + s12 / s11 * (x1 - mu1);
        quad_expectation_1d(|x2| f(x1, x2), cond_mean, cond_sd, inner_tol).unwrap_or(f64::NAN)
    };
    let value = quad_expectation_1d(outer, mu1, s11.sqrt(), tol)?;
    if value.is_nan() {
        return Err(PricingError::ToleranceNotMet { tol, gap: f64::NAN });
    }
    Ok(value)
}
