//! Markov-switching VAR(p) model definition, validation, and real-measure
//! simulation.
//!
//! The process is
//! `y_t = A_0(s_t) psi_t + A_1(s_t) y_{t-1} + ... + A_p(s_t) y_{t-p} + xi_t`
//! with `xi_t = Sigma_t^{1/2} eps_t`, where `s_t` is a homogeneous Markov
//! chain on `N` regimes and `Sigma_t` is either constant per regime or follows
//! a vech-GARCH(0, q*) recursion on the regime path.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{spd_cholesky, unvech, vech, vech_len};
use crate::{PricingError, Result};

const PROB_TOL: f64 = 1e-12;

/// Covariance dynamics of the residual process.
///
/// Only specifications where `Sigma_t` is deterministic given the regime path
/// are supported: lagged-residual (ARCH) feedback would break the joint
/// Gaussianity that every closed form in this crate relies on.
#[derive(Debug, Clone)]
pub enum CovarianceSpec {
    /// One SPD matrix per regime.
    ConstantPerRegime(Vec<DMatrix<f64>>),
    /// vech(Sigma_t) = B_0(s_t) + sum_j B_j(s_t) vech(Sigma_{t-j}).
    VechGarch {
        q_star: usize,
        /// Per regime, length n(n+1)/2.
        b0: Vec<DVector<f64>>,
        /// Per regime, q_star square matrices of side n(n+1)/2.
        b: Vec<Vec<DMatrix<f64>>>,
        /// Sigma_{1-q*}, ..., Sigma_0 (oldest first).
        initial_sigmas: Vec<DMatrix<f64>>,
    },
}

/// A Markov-switching VAR(p) model, prior to validation.
#[derive(Debug, Clone)]
pub struct MsVarModel {
    pub n_regimes: usize,
    /// Autoregressive order p >= 1.
    pub lag_order: usize,
    /// Process dimension n.
    pub dim: usize,
    /// Exogenous dimension k (first exogenous component is the constant 1).
    pub exo_dim: usize,
    /// Per regime: Pi(j) of shape n x (k + n p), partitioned [A_0 : A_1 : ... : A_p].
    pub coeff: Vec<DMatrix<f64>>,
    /// N x N row-stochastic transition matrix.
    pub transition: DMatrix<f64>,
    /// Length-N initial regime distribution (p_{s_1}).
    pub initial_dist: DVector<f64>,
    pub cov_spec: CovarianceSpec,
}

/// A model whose invariants have been checked, with constant-regime Cholesky
/// factors cached. All pricing entry points take a `ValidatedModel`.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    model: MsVarModel,
    /// Cached factors for the ConstantPerRegime case.
    constant_chol: Vec<Cholesky<f64, Dyn>>,
}

/// A realized regime path s_1..s_T (0-based regime indices).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegimePath(pub Vec<usize>);

impl RegimePath {
    pub fn horizon(&self) -> usize {
        self.0.len()
    }
}

/// Initial values, exogenous inputs, and the observed prefix of a trajectory.
#[derive(Debug, Clone)]
pub struct PathState {
    /// y_0, y_{-1}, ..., y_{1-p} (most recent first), each of length n.
    pub initial: Vec<DVector<f64>>,
    /// psi_1..psi_T, each of length k with leading component exactly 1.
    pub exo: Vec<DVector<f64>>,
    /// Observed values y_1..y_t (possibly empty).
    pub observed: Vec<DVector<f64>>,
}

impl PathState {
    /// State with no observations and constant exogenous input (1).
    pub fn constant_exo(initial: Vec<DVector<f64>>, k: usize, horizon: usize) -> Self {
        let mut psi = DVector::zeros(k);
        psi[0] = 1.0;
        PathState {
            initial,
            exo: vec![psi; horizon],
            observed: Vec::new(),
        }
    }

    /// y_{t-m} for 1-based time t and lag m >= 1, drawing on observations and
    /// then on the initial values.
    pub fn lag(&self, t: usize, m: usize) -> &DVector<f64> {
        let idx = t as isize - m as isize; // time index of the needed value
        if idx >= 1 {
            &self.observed[(idx - 1) as usize]
        } else {
            &self.initial[(-idx) as usize]
        }
    }

    /// Stacked regressor (psi_t', y_{t-1}', ..., y_{t-p}')' for 1-based t.
    pub fn regressor(&self, t: usize, p: usize, n: usize, k: usize) -> DVector<f64> {
        let mut out = DVector::zeros(k + n * p);
        out.rows_mut(0, k).copy_from(&self.exo[t - 1]);
        for m in 1..=p {
            out.rows_mut(k + (m - 1) * n, n).copy_from(self.lag(t, m));
        }
        out
    }

    /// Extends the observed prefix with a freshly simulated value.
    pub fn push_observed(&mut self, y: DVector<f64>) {
        self.observed.push(y);
    }
}

impl MsVarModel {
    /// Checks every structural invariant and caches covariance factorizations.
    pub fn validate(self) -> Result<ValidatedModel> {
        let (n_reg, p, n, k) = (self.n_regimes, self.lag_order, self.dim, self.exo_dim);
        if n_reg == 0 || p == 0 || n == 0 || k == 0 {
            return Err(PricingError::InvalidModel {
                context: "all of N, p, n, k must be positive".into(),
            });
        }
        if self.coeff.len() != n_reg {
            return Err(PricingError::ShapeMismatch {
                context: format!("expected {n_reg} coefficient matrices, got {}", self.coeff.len()),
            });
        }
        for (j, c) in self.coeff.iter().enumerate() {
            if c.nrows() != n || c.ncols() != k + n * p {
                return Err(PricingError::ShapeMismatch {
                    context: format!(
                        "coeff[{j}] is {}x{}, expected {n}x{}",
                        c.nrows(),
                        c.ncols(),
                        k + n * p
                    ),
                });
            }
        }
        if self.transition.nrows() != n_reg || self.transition.ncols() != n_reg {
            return Err(PricingError::ShapeMismatch {
                context: format!(
                    "transition is {}x{}, expected {n_reg}x{n_reg}",
                    self.transition.nrows(),
                    self.transition.ncols()
                ),
            });
        }
        for i in 0..n_reg {
            let row = self.transition.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL || row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(PricingError::NonStochasticTransition { row: i, sum });
            }
        }
        let init_sum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.len() != n_reg
            || (init_sum - 1.0).abs() > PROB_TOL
            || self.initial_dist.iter().any(|&x| !(0.0..=1.0).contains(&x))
        {
            return Err(PricingError::InvalidModel {
                context: format!("initial regime distribution invalid (sum {init_sum})"),
            });
        }

        let mut constant_chol = Vec::new();
        match &self.cov_spec {
            CovarianceSpec::ConstantPerRegime(sigmas) => {
                if sigmas.len() != n_reg {
                    return Err(PricingError::ShapeMismatch {
                        context: format!("expected {n_reg} covariance matrices, got {}", sigmas.len()),
                    });
                }
                for (j, s) in sigmas.iter().enumerate() {
                    if s.nrows() != n || s.ncols() != n {
                        return Err(PricingError::ShapeMismatch {
                            context: format!("Sigma({}) is {}x{}, expected {n}x{n}", j + 1, s.nrows(), s.ncols()),
                        });
                    }
                    constant_chol
                        .push(spd_cholesky(s, &format!("Sigma for regime {}", j + 1))?);
                }
            }
            CovarianceSpec::VechGarch { q_star, b0, b, initial_sigmas } => {
                let vl = vech_len(n);
                if *q_star == 0 {
                    return Err(PricingError::InvalidModel {
                        context: "vech-GARCH requires q_star >= 1".into(),
                    });
                }
                if b0.len() != n_reg || b.len() != n_reg {
                    return Err(PricingError::ShapeMismatch {
                        context: "vech-GARCH coefficients must be given per regime".into(),
                    });
                }
                for j in 0..n_reg {
                    if b0[j].len() != vl {
                        return Err(PricingError::ShapeMismatch {
                            context: format!("B_0({}) has length {}, expected {vl}", j + 1, b0[j].len()),
                        });
                    }
                    if b[j].len() != *q_star
                        || b[j].iter().any(|m| m.nrows() != vl || m.ncols() != vl)
                    {
                        return Err(PricingError::ShapeMismatch {
                            context: format!("B_i({}) matrices must be {q_star} of side {vl}", j + 1),
                        });
                    }
                }
                if initial_sigmas.len() != *q_star {
                    return Err(PricingError::ShapeMismatch {
                        context: format!(
                            "need {q_star} initial covariances, got {}",
                            initial_sigmas.len()
                        ),
                    });
                }
                for (i, s) in initial_sigmas.iter().enumerate() {
                    spd_cholesky(s, &format!("initial Sigma #{i}"))?;
                }
            }
        }
        Ok(ValidatedModel { model: self, constant_chol })
    }
}

impl ValidatedModel {
    pub fn inner(&self) -> &MsVarModel {
        &self.model
    }
    pub fn dim(&self) -> usize {
        self.model.dim
    }
    pub fn lag_order(&self) -> usize {
        self.model.lag_order
    }
    pub fn exo_dim(&self) -> usize {
        self.model.exo_dim
    }
    pub fn n_regimes(&self) -> usize {
        self.model.n_regimes
    }

    /// A_0(j), the exogenous block.
    pub fn a0(&self, regime: usize) -> DMatrixView<'_, f64> {
        self.model.coeff[regime].view((0, 0), (self.model.dim, self.model.exo_dim))
    }

    /// A_m(j) for m = 1..p.
    pub fn a_lag(&self, regime: usize, m: usize) -> DMatrixView<'_, f64> {
        let n = self.model.dim;
        let k = self.model.exo_dim;
        self.model.coeff[regime].view((0, k + (m - 1) * n), (n, n))
    }

    /// Full Pi(j).
    pub fn pi(&self, regime: usize) -> &DMatrix<f64> {
        &self.model.coeff[regime]
    }

    fn check_path(&self, path: &RegimePath) -> Result<()> {
        if let Some(&bad) = path.0.iter().find(|&&s| s >= self.model.n_regimes) {
            return Err(PricingError::IndexOutOfRange {
                context: format!("regime index {bad} out of 0..{}", self.model.n_regimes),
            });
        }
        Ok(())
    }

    /// Probability of the sub-path s_{t+1}..s_T given s_t (or, for `from_time`
    /// 0, including the initial-distribution factor for s_1).
    pub fn markov_path_prob(&self, path: &RegimePath, from_time: usize) -> Result<f64> {
        self.check_path(path)?;
        let horizon = path.horizon();
        if from_time >= horizon {
            return Err(PricingError::IndexOutOfRange {
                context: format!("from_time {from_time} not below horizon {horizon}"),
            });
        }
        let mut prob = 1.0;
        for m in (from_time + 1)..=horizon {
            let cur = path.0[m - 1];
            prob *= if m == 1 {
                self.model.initial_dist[cur]
            } else {
                self.model.transition[(path.0[m - 2], cur)]
            };
        }
        Ok(prob)
    }

    /// Sigma_1..Sigma_T along a regime path.
    pub fn covariance_path(&self, path: &RegimePath) -> Result<Vec<DMatrix<f64>>> {
        self.check_path(path)?;
        match &self.model.cov_spec {
            CovarianceSpec::ConstantPerRegime(sigmas) => {
                Ok(path.0.iter().map(|&s| sigmas[s].clone()).collect())
            }
            CovarianceSpec::VechGarch { q_star, b0, b, initial_sigmas } => {
                let n = self.model.dim;
                // history holds vech(Sigma) values, oldest first.
                let mut history: Vec<DVector<f64>> =
                    initial_sigmas.iter().map(vech).collect();
                let mut out = Vec::with_capacity(path.horizon());
                for (t, &s) in path.0.iter().enumerate() {
                    let mut v = b0[s].clone();
                    for j in 1..=*q_star {
                        v += &b[s][j - 1] * &history[history.len() - j];
                    }
                    let sigma = unvech(&v, n);
                    spd_cholesky(&sigma, &format!("vech-GARCH Sigma at t={}", t + 1))?;
                    history.push(v);
                    out.push(sigma);
                }
                Ok(out)
            }
        }
    }

    /// Cholesky factor of Sigma_t, using the cached factor when constant.
    pub fn sigma_chol(&self, sigma: &DMatrix<f64>, regime: usize) -> Result<Cholesky<f64, Dyn>> {
        match &self.model.cov_spec {
            CovarianceSpec::ConstantPerRegime(_) => Ok(self.constant_chol[regime].clone()),
            CovarianceSpec::VechGarch { .. } => spd_cholesky(sigma, "Sigma along path"),
        }
    }

    /// VAR(1) companion embedding: per time t the pair (nu*_t, A_t) with
    /// `y*_t = nu*_t + A_t y*_{t-1} + xi*_t` on the stacked lag vector.
    pub fn companion_form(
        &self,
        path: &RegimePath,
        state: &PathState,
    ) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        self.check_path(path)?;
        let (n, p, k) = (self.model.dim, self.model.lag_order, self.model.exo_dim);
        let np = n * p;
        let mut out = Vec::with_capacity(path.horizon());
        for (idx, &s) in path.0.iter().enumerate() {
            let t = idx + 1;
            let mut a = DMatrix::zeros(np, np);
            for m in 1..=p {
                a.view_mut((0, (m - 1) * n), (n, n)).copy_from(&self.a_lag(s, m));
            }
            for blk in 1..p {
                a.view_mut((blk * n, (blk - 1) * n), (n, n))
                    .copy_from(&DMatrix::identity(n, n));
            }
            let mut nu = DVector::zeros(np);
            nu.rows_mut(0, n)
                .copy_from(&(self.a0(s) * &state.exo[t - 1].rows(0, k)));
            out.push((nu, a));
        }
        Ok(out)
    }

    /// One conditional-mean step Pi(s_t) * regressor.
    pub fn conditional_mean(&self, regime: usize, state: &PathState, t: usize) -> DVector<f64> {
        let reg = state.regressor(t, self.model.lag_order, self.model.dim, self.model.exo_dim);
        self.pi(regime) * reg
    }

    /// Simulates y_1..y_T under the real measure. Deterministic given the RNG
    /// stream; the `state`'s observed prefix is treated as already realized.
    pub fn simulate_real_path<R: Rng + ?Sized>(
        &self,
        state: &PathState,
        path: &RegimePath,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        let sigmas = self.covariance_path(path)?;
        let n = self.model.dim;
        let mut st = state.clone();
        let start = st.observed.len();
        for t in (start + 1)..=path.horizon() {
            let s = path.0[t - 1];
            let mean = self.conditional_mean(s, &st, t);
            let chol = self.sigma_chol(&sigmas[t - 1], s)?;
            let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            st.push_observed(mean + chol.l() * eps);
        }
        Ok(st.observed)
    }
}
