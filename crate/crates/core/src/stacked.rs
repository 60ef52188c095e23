//! Stacked representation of a regime path under a linear Girsanov kernel.
//!
//! For a fixed regime path and kernel representation
//! `theta_t = Delta_{0,t} psi_t + sum_m Delta_{m,t} y_{t-m}`, the risk-neutral
//! dynamics solve `Psi y = delta + xi` with `Psi` unit-lower-block-triangular:
//! block `(t, t-m)` is `-(A_m(s_t) + Delta_{m,t})` and the `delta` block at
//! time t collects `(A_0 + Delta_0) psi_t` plus the initial-condition carries
//! `(A_m + Delta_m) y_{t-m}` for lags reaching before time 1. Every Gaussian
//! law here is obtained by triangular substitution; `Psi` is never inverted
//! densely.

use nalgebra::{DMatrix, DVector};

use crate::girsanov::KernelDeltas;
use crate::linalg::{spd_cholesky, symmetrize};
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::{PricingError, Result};

const SYM_TOL: f64 = 1e-10;

/// A multivariate normal law.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// The assembled system for one regime path.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub horizon: usize,
    pub dim: usize,
    /// nT x nT, lower triangular with unit diagonal.
    pub psi: DMatrix<f64>,
    /// Length nT.
    pub delta: DVector<f64>,
    pub sigma_blocks: Vec<DMatrix<f64>>,
}

/// Builds `Psi`, `delta`, and the covariance blocks for a path and kernel.
pub fn build_stacked(
    model: &ValidatedModel,
    path: &RegimePath,
    deltas: &[KernelDeltas],
    state: &PathState,
) -> Result<StackedSystem> {
    let horizon = path.horizon();
    let (n, p, k) = (model.dim(), model.lag_order(), model.exo_dim());
    if deltas.len() != horizon {
        return Err(PricingError::ShapeMismatch {
            context: format!("expected {horizon} Delta sets, got {}", deltas.len()),
        });
    }
    for (t, d) in deltas.iter().enumerate() {
        if d.d0.nrows() != n || d.d0.ncols() != k || d.dm.len() != p
            || d.dm.iter().any(|m| m.nrows() != n || m.ncols() != n)
        {
            return Err(PricingError::ShapeMismatch {
                context: format!("Delta shapes at t={} must be {n}x{k} and {p} of {n}x{n}", t + 1),
            });
        }
    }
    let nt = n * horizon;
    let mut psi = DMatrix::identity(nt, nt);
    let mut delta = DVector::zeros(nt);
    for t in 1..=horizon {
        let s = path.0[t - 1];
        let mut d_block = &model.a0(s) * &state.exo[t - 1] + &deltas[t - 1].d0 * &state.exo[t - 1];
        for m in 1..=p {
            let coeff = model.a_lag(s, m) + &deltas[t - 1].dm[m - 1];
            if m < t {
                psi.view_mut(((t - 1) * n, (t - 1 - m) * n), (n, n)).copy_from(&(-&coeff));
            } else {
                // Lag reaches before time 1: carried into delta.
                d_block += coeff * state.lag(t, m);
            }
        }
        delta.rows_mut((t - 1) * n, n).copy_from(&d_block);
    }
    let sigma_blocks = model.covariance_path(path)?;
    Ok(StackedSystem { horizon, dim: n, psi, delta, sigma_blocks })
}

impl StackedSystem {
    fn sigma_dense(&self, from: usize, to: usize) -> DMatrix<f64> {
        let n = self.dim;
        let len = (to - from) * n;
        let mut out = DMatrix::zeros(len, len);
        for (i, t) in (from..to).enumerate() {
            out.view_mut((i * n, i * n), (n, n)).copy_from(&self.sigma_blocks[t]);
        }
        out
    }

    /// `P^{-1} S (P^{-1})'` for a unit lower-triangular `P`, symmetrized.
    fn sandwich(p: &DMatrix<f64>, s: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
        let half = p
            .solve_lower_triangular(s)
            .expect("unit-diagonal triangular system is always solvable");
        let mut cov = p
            .solve_lower_triangular(&half.transpose())
            .expect("unit-diagonal triangular system is always solvable")
            .transpose();
        symmetrize(&mut cov, SYM_TOL, context)?;
        Ok(cov)
    }

    /// Law of the full stacked vector `y | H_0` (Theorem 2 first law).
    pub fn law_full(&self) -> Result<GaussianLaw> {
        let mean = self
            .psi
            .solve_lower_triangular(&self.delta)
            .expect("unit-diagonal triangular system is always solvable");
        let sigma = self.sigma_dense(0, self.horizon);
        let cov = Self::sandwich(&self.psi, &sigma, "law_full covariance")?;
        Ok(GaussianLaw { mean, cov })
    }

    /// Law of the future block `(y_{t+1},...,y_T) | H_t` given the observed
    /// prefix `(y_1,...,y_t)`.
    pub fn law_conditional_future(&self, t: usize, observed: &DVector<f64>) -> Result<GaussianLaw> {
        let n = self.dim;
        if t >= self.horizon {
            return Err(PricingError::IndexOutOfRange {
                context: format!("conditioning time {t} not below horizon {}", self.horizon),
            });
        }
        if observed.len() != n * t {
            return Err(PricingError::ShapeMismatch {
                context: format!("observed prefix has length {}, expected {}", observed.len(), n * t),
            });
        }
        if t == 0 {
            return self.law_full();
        }
        let rest = (self.horizon - t) * n;
        let psi22 = self.psi.view((t * n, t * n), (rest, rest)).clone_owned();
        let psi21 = self.psi.view((t * n, 0), (rest, t * n));
        let rhs = self.delta.rows(t * n, rest) - psi21 * observed;
        let mean = psi22
            .solve_lower_triangular(&rhs)
            .expect("unit-diagonal triangular system is always solvable");
        let sigma_c = self.sigma_dense(t, self.horizon);
        let cov = Self::sandwich(&psi22, &sigma_c, "conditional covariance")?;
        Ok(GaussianLaw { mean, cov })
    }

    /// Log of the joint density of the observed prefix `(y_1,...,y_t)`,
    /// evaluated through the triangular factorization: the prefix law is
    /// `N(Psi_11^{-1} delta_1, Psi_11^{-1} Sigma_bar (Psi_11^{-1})')` and
    /// `|Psi_11| = 1`, so the normalization uses the product of the per-period
    /// `|Sigma_m|^{1/2}` exactly as displayed.
    pub fn gaussian_loglik_prefix(&self, observed: &DVector<f64>) -> Result<f64> {
        let n = self.dim;
        let nt = observed.len();
        if nt % n != 0 || nt == 0 || nt > n * self.horizon {
            return Err(PricingError::ShapeMismatch {
                context: format!("prefix length {nt} is not a positive multiple of n={n}"),
            });
        }
        let t = nt / n;
        let psi11 = self.psi.view((0, 0), (nt, nt));
        // Psi_11 (y - mu_1) = Psi_11 y - delta_1.
        let resid = psi11 * observed - self.delta.rows(0, nt);
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for m in 0..t {
            let chol = spd_cholesky(&self.sigma_blocks[m], "prefix covariance")?;
            logdet += chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
            let block = resid.rows(m * n, n).clone_owned();
            let solved = chol.solve(&block);
            quad += block.dot(&solved);
        }
        Ok(-0.5 * (nt as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
    }

    /// Density value of the observed prefix.
    pub fn gaussian_likelihood_prefix(&self, observed: &DVector<f64>) -> Result<f64> {
        Ok(self.gaussian_loglik_prefix(observed)?.exp())
    }
}

/// One-step law `y_t | H_{t-1} ~ N(Pi_t Y_{t-1} + theta_t, Sigma_t)`.
pub fn law_one_step(
    model: &ValidatedModel,
    theta_t: &DVector<f64>,
    sigma_t: &DMatrix<f64>,
    regime: usize,
    state: &PathState,
    t: usize,
) -> GaussianLaw {
    GaussianLaw {
        mean: model.conditional_mean(regime, state, t) + theta_t,
        cov: sigma_t.clone(),
    }
}
