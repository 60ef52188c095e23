//! Mixing over regime paths and parameter draws.
//!
//! Prices under the regime-switching model are mixtures of fixed-path Gaussian
//! prices. This module enumerates future-path weights (transition-probability
//! products), filtered prefix weights (prefix likelihood times prior, in log
//! space), and the Rao-Blackwellized estimator that averages exact conditional
//! prices over parameter draws instead of simulating payoffs per draw.

use nalgebra::DVector;

use crate::girsanov::KernelDeltas;
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::stacked::build_stacked;
use crate::{PricingError, Result};

/// Default cap on the number of enumerated regime paths.
pub const DEFAULT_ENUM_CAP: u128 = 1 << 20;

/// A probability distribution over regime paths.
#[derive(Debug, Clone)]
pub struct PathWeights {
    /// Conditioning time t (weights describe either s_{t+1..T} or s_{1..t}).
    pub t: usize,
    pub horizon: usize,
    pub entries: Vec<(RegimePath, f64)>,
}

impl PathWeights {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }
}

/// Enumerates all regime paths of the given length over `n_regimes` states.
pub fn enumerate_paths(n_regimes: usize, len: usize, cap: u128) -> Result<Vec<Vec<usize>>> {
    let count = (n_regimes as u128)
        .checked_pow(len as u32)
        .ok_or(PricingError::EnumerationCapExceeded { paths: u128::MAX, cap })?;
    if count > cap {
        return Err(PricingError::EnumerationCapExceeded { paths: count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![0usize; len];
    loop {
        out.push(cur.clone());
        // Odometer increment in regime base.
        let mut i = len;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < n_regimes {
                break;
            }
            cur[i] = 0;
        }
    }
}

/// Weights of future paths `s_{t+1..T}` given the prefix `s_{1..t}`:
/// the transition-probability product, with the initial distribution supplying
/// the first factor when `t = 0`.
pub fn future_path_weights(
    model: &ValidatedModel,
    prefix: &[usize],
    horizon: usize,
    cap: u128,
) -> Result<PathWeights> {
    let t = prefix.len();
    if t > horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("prefix length {t} exceeds horizon {horizon}"),
        });
    }
    let mut entries = Vec::new();
    for future in enumerate_paths(model.n_regimes(), horizon - t, cap)? {
        let mut full = prefix.to_vec();
        full.extend_from_slice(&future);
        let w = model.markov_path_prob(&RegimePath(full), t)?;
        entries.push((RegimePath(future), w));
    }
    let mut weights = PathWeights { t, horizon, entries };
    let total = weights.total();
    if total <= 0.0 {
        return Err(PricingError::AllZeroLikelihood);
    }
    for (_, w) in &mut weights.entries {
        *w /= total;
    }
    Ok(weights)
}

/// Posterior weights of regime prefixes `s_{1..t}` given observations
/// `y_{1..t}`: prefix Gaussian likelihood times the Markov prior, normalized
/// after a max-subtraction in log space.
pub fn filtered_path_weights<F>(
    model: &ValidatedModel,
    state: &PathState,
    observed: &DVector<f64>,
    deltas_for: F,
    cap: u128,
) -> Result<PathWeights>
where
    F: Fn(&RegimePath) -> Result<Vec<KernelDeltas>>,
{
    let n = model.dim();
    if observed.len() % n != 0 || observed.is_empty() {
        return Err(PricingError::ShapeMismatch {
            context: format!("observed length {} is not a positive multiple of n={n}", observed.len()),
        });
    }
    let t = observed.len() / n;
    let mut log_weights = Vec::new();
    let mut paths = Vec::new();
    for prefix in enumerate_paths(model.n_regimes(), t, cap)? {
        let path = RegimePath(prefix);
        let prior = model.markov_path_prob(&path, 0)?;
        if prior <= 0.0 {
            log_weights.push(f64::NEG_INFINITY);
            paths.push(path);
            continue;
        }
        let deltas = deltas_for(&path)?;
        let sys = build_stacked(model, &path, &deltas, state)?;
        let loglik = sys.gaussian_loglik_prefix(observed)?;
        log_weights.push(loglik + prior.ln());
        paths.push(path);
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(PricingError::AllZeroLikelihood);
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(PathWeights {
        t,
        horizon: t,
        entries: paths
            .into_iter()
            .zip(unnorm)
            .map(|(p, w)| (p, w / total))
            .collect(),
    })
}

/// How the regime prefix `s_{1..t}` is treated when pricing at time t.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// The prefix is known.
    Known(Vec<usize>),
    /// Infer prefix weights from the observed data (Gaussian filter).
    Filtered,
}

/// Weights over regime prefixes of length `t` under the chosen conditioning.
/// `observed` holds `y_{1..t}` stacked; for `t = 0` the single empty prefix
/// carries weight one.
pub fn prefix_weights<F>(
    model: &ValidatedModel,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    deltas_for: F,
    cap: u128,
) -> Result<PathWeights>
where
    F: Fn(&RegimePath) -> Result<Vec<KernelDeltas>>,
{
    let n = model.dim();
    let t = observed.len() / n;
    if observed.len() % n != 0 {
        return Err(PricingError::ShapeMismatch {
            context: format!("observed length {} is not a multiple of n={n}", observed.len()),
        });
    }
    match conditioning {
        Conditioning::Known(prefix) => {
            if prefix.len() != t {
                return Err(PricingError::ShapeMismatch {
                    context: format!(
                        "known prefix has length {}, observations cover {t} periods",
                        prefix.len()
                    ),
                });
            }
            Ok(PathWeights {
                t,
                horizon: t,
                entries: vec![(RegimePath(prefix.clone()), 1.0)],
            })
        }
        Conditioning::Filtered => {
            if t == 0 {
                return Ok(PathWeights {
                    t: 0,
                    horizon: 0,
                    entries: vec![(RegimePath(Vec::new()), 1.0)],
                });
            }
            filtered_path_weights(model, state, observed, deltas_for, cap)
        }
    }
}

/// One posterior parameter draw: a full model plus an optional weight.
#[derive(Debug, Clone)]
pub struct ParameterDraw {
    pub model: ValidatedModel,
    pub weight: f64,
}

impl ParameterDraw {
    pub fn new(model: ValidatedModel) -> Self {
        ParameterDraw { model, weight: 1.0 }
    }
}

/// A point estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// The Rao-Blackwellized estimator: `inner` must return the exact conditional
/// price given the draw; the estimate is the weighted mean over draws and the
/// standard error comes from the weighted sample variance with the effective
/// sample size `(sum w)^2 / sum w^2`.
pub fn rao_blackwell_price<F>(draws: &[ParameterDraw], inner: F) -> Result<Estimate>
where
    F: Fn(&ParameterDraw) -> Result<f64>,
{
    if draws.len() < 2 {
        return Err(PricingError::InsufficientDraws { got: draws.len() });
    }
    if let Some(bad) = draws.iter().find(|d| !(d.weight > 0.0)) {
        return Err(PricingError::InvalidModel {
            context: format!("draw weight {} must be positive", bad.weight),
        });
    }
    let prices: Vec<f64> = draws.iter().map(&inner).collect::<Result<_>>()?;
    let w_sum: f64 = draws.iter().map(|d| d.weight).sum();
    let w_sq: f64 = draws.iter().map(|d| d.weight * d.weight).sum();
    let mean = draws
        .iter()
        .zip(&prices)
        .map(|(d, p)| d.weight * p)
        .sum::<f64>()
        / w_sum;
    let var = draws
        .iter()
        .zip(&prices)
        .map(|(d, p)| d.weight * (p - mean) * (p - mean))
        .sum::<f64>()
        / w_sum;
    let n_eff = w_sum * w_sum / w_sq;
    Ok(Estimate { value: mean, std_error: (var / n_eff).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovarianceSpec, MsVarModel};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_regime(coeff2_shift: f64) -> ValidatedModel {
        let base = DMatrix::from_row_slice(1, 2, &[0.1, 0.4]);
        let mut shifted = base.clone();
        shifted[(0, 0)] += coeff2_shift;
        MsVarModel {
            n_regimes: 2,
            lag_order: 1,
            dim: 1,
            exo_dim: 1,
            coeff: vec![base, shifted],
            transition: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            initial_dist: DVector::from_row_slice(&[0.6, 0.4]),
            cov_spec: CovarianceSpec::ConstantPerRegime(vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            ]),
        }
        .validate()
        .unwrap()
    }

    fn zero_deltas(horizon: usize) -> Vec<KernelDeltas> {
        vec![
            KernelDeltas { d0: DMatrix::zeros(1, 1), dm: vec![DMatrix::zeros(1, 1)] };
            horizon
        ]
    }

    #[test]
    fn single_regime_single_path() {
        let m = MsVarModel {
            n_regimes: 1,
            lag_order: 1,
            dim: 1,
            exo_dim: 1,
            coeff: vec![DMatrix::zeros(1, 2)],
            transition: DMatrix::from_element(1, 1, 1.0),
            initial_dist: DVector::from_element(1, 1.0),
            cov_spec: CovarianceSpec::ConstantPerRegime(vec![DMatrix::identity(1, 1)]),
        }
        .validate()
        .unwrap();
        let w = future_path_weights(&m, &[], 4, DEFAULT_ENUM_CAP).unwrap();
        assert_eq!(w.entries.len(), 1);
        assert_abs_diff_eq!(w.entries[0].1, 1.0);
    }

    #[test]
    fn one_step_weights_are_transition_rows() {
        let m = two_regime(0.0);
        let w = future_path_weights(&m, &[0, 0], 3, DEFAULT_ENUM_CAP).unwrap();
        let mut by_state = [0.0; 2];
        for (path, weight) in &w.entries {
            by_state[path.0[0]] += weight;
        }
        assert_abs_diff_eq!(by_state[0], 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(by_state[1], 0.1, epsilon = 1e-14);
    }

    #[test]
    fn terminal_marginal_matches_matrix_power() {
        let m = two_regime(0.0);
        let horizon = 7;
        let w = future_path_weights(&m, &[1], horizon, DEFAULT_ENUM_CAP).unwrap();
        assert_abs_diff_eq!(w.total(), 1.0, epsilon = 1e-12);
        let mut marginal = [0.0; 2];
        for (path, weight) in &w.entries {
            marginal[*path.0.last().unwrap()] += weight;
        }
        let p = m.inner().transition.clone();
        let mut row = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        for _ in 0..(horizon - 1) {
            row = &row * &p;
        }
        assert_abs_diff_eq!(marginal[0], row[(0, 0)], epsilon = 1e-12);
        assert_abs_diff_eq!(marginal[1], row[(0, 1)], epsilon = 1e-12);
    }

    #[test]
    fn enumeration_cap_enforced() {
        let m = two_regime(0.0);
        match future_path_weights(&m, &[], 30, 1 << 10) {
            Err(PricingError::EnumerationCapExceeded { paths, cap }) => {
                assert_eq!(paths, 1 << 30);
                assert_eq!(cap, 1 << 10);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn identical_regimes_give_prior_weights() {
        let m = two_regime(0.0);
        let t = 3;
        let state = PathState::constant_exo(vec![DVector::from_element(1, 0.5)], 1, t);
        let observed = DVector::from_row_slice(&[0.2, -0.3, 0.8]);
        let w = filtered_path_weights(
            &m,
            &state,
            &observed,
            |path| Ok(zero_deltas(path.horizon())),
            DEFAULT_ENUM_CAP,
        )
        .unwrap();
        assert_abs_diff_eq!(w.total(), 1.0, epsilon = 1e-12);
        for (path, weight) in &w.entries {
            let prior = m.markov_path_prob(path, 0).unwrap();
            assert_abs_diff_eq!(*weight, prior, epsilon = 1e-12);
        }
    }

    #[test]
    fn shifted_regime_is_identified() {
        // Regime 2 intercept shifted by 10 standard deviations.
        let m = two_regime(10.0);
        let t = 3;
        let state = PathState::constant_exo(vec![DVector::from_element(1, 0.0)], 1, t);
        // Data near the regime-1 mean (intercept 0.1).
        let observed = DVector::from_row_slice(&[0.1, 0.15, 0.12]);
        let w = filtered_path_weights(
            &m,
            &state,
            &observed,
            |path| Ok(zero_deltas(path.horizon())),
            DEFAULT_ENUM_CAP,
        )
        .unwrap();
        let all_one = w
            .entries
            .iter()
            .find(|(p, _)| p.0.iter().all(|&s| s == 0))
            .unwrap();
        assert!(all_one.1 > 0.999, "weight {}", all_one.1);
    }

    #[test]
    fn rao_blackwell_trivial_cases() {
        let m = two_regime(0.0);
        let draws = vec![ParameterDraw::new(m.clone()), ParameterDraw::new(m.clone())];
        let est = rao_blackwell_price(&draws, |_| Ok(2.5)).unwrap();
        assert_abs_diff_eq!(est.value, 2.5);
        assert_abs_diff_eq!(est.std_error, 0.0);

        match rao_blackwell_price(&draws[..1], |_| Ok(1.0)) {
            Err(PricingError::InsufficientDraws { got: 1 }) => {}
            other => panic!("expected InsufficientDraws, got {other:?}"),
        }
    }

    #[test]
    fn rao_blackwell_variance_dominance() {
        // h(X, Y) = Y + X with X ~ N(0,1): tau_1 samples X per draw,
        // tau_2 uses g(Y) = E[h|Y] = Y. Var(tau_1) = 2/n > Var(tau_2) = 1/n.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_draws = 50;
        let reps = 200;
        let (mut var1, mut var2) = (0.0, 0.0);
        let (mut sum1, mut sum2) = (0.0, 0.0);
        let mut t1s = Vec::new();
        let mut t2s = Vec::new();
        for _ in 0..reps {
            let ys: Vec<f64> = (0..n_draws)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let t2: f64 = ys.iter().sum::<f64>() / n_draws as f64;
            let t1: f64 = ys
                .iter()
                .map(|y| y + rng.sample::<f64, _>(StandardNormal))
                .sum::<f64>()
                / n_draws as f64;
            t1s.push(t1);
            t2s.push(t2);
            sum1 += t1;
            sum2 += t2;
        }
        let m1 = sum1 / reps as f64;
        let m2 = sum2 / reps as f64;
        for i in 0..reps {
            var1 += (t1s[i] - m1) * (t1s[i] - m1);
            var2 += (t2s[i] - m2) * (t2s[i] - m2);
        }
        assert!(var2 < var1, "Var(tau_2)={var2} not below Var(tau_1)={var1}");
    }
}
