//! Discrete-time HJM term structure on the first T components of the
//! process.
//!
//! Log instantaneous forward rates sit on the leading coordinates,
//! `f~_{t,v} = e_{v-t+1}' y_t` with `T <= n`, so the spot rate is
//! `r~_{t+1} = e_1' y_t`. Ruling out arbitrage across bond maturities
//! `u = t+2..T` imposes linear constraints `sum_m a_{m,u|t} theta_{t+m} =
//! b_u` on the Girsanov kernel, assembled from companion-form products
//! `Phi_{u,v|t} = J (A_v* ... A_u*) J'`. Only the relative-entropy kernel is
//! used here; it is linear, so every future law stays Gaussian and caplets,
//! floorlets, LIBOR options, and zero-coupon-bond options all reduce to
//! one-dimensional normal or lognormal expectations under the forward
//! measure.

use nalgebra::{DMatrix, DVector};

use crate::girsanov::{entropy_kernel, KernelConstraint, KernelDeltas};
use crate::linalg::norm_cdf;
use crate::lognormal::{bond_exponent, forward_measure_mean};
use crate::mixture::{future_path_weights, prefix_weights, Conditioning};
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::normal::{truncated_call, truncated_put};
use crate::stacked::{build_stacked, GaussianLaw, StackedSystem};
use crate::{PricingError, Result};

/// Coordinate layout of the term-structure system: forward rates occupy the
/// first `horizon` components of y, the rest are explanatory variables.
#[derive(Debug, Clone, Copy)]
pub struct HjmLayout {
    /// T: the last tradable bond maturity.
    pub horizon: usize,
}

impl HjmLayout {
    pub fn check(&self, model: &ValidatedModel) -> Result<()> {
        if self.horizon < 2 {
            return Err(PricingError::InvalidModel {
                context: format!("horizon T={} admits no tradable bonds", self.horizon),
            });
        }
        if self.horizon > model.dim() {
            return Err(PricingError::InvalidModel {
                context: format!(
                    "horizon T={} exceeds process dimension n={}",
                    self.horizon,
                    model.dim()
                ),
            });
        }
        Ok(())
    }
}

/// The no-arbitrage constraints `A theta = b` on the stacked future kernel.
#[derive(Debug, Clone)]
pub struct HjmConstraintSet {
    /// (T-t-1) x n(T-t); row for maturity u carries a_{m,u|t} in time blocks
    /// m = 1..u-t-1 and zeros afterwards.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// `y_t^* = (y_t', y_{t-1}', ..., y_{t-p+1}')'` from the observed prefix and
/// the initial lags.
fn y_star(state: &PathState, observed: &DVector<f64>, n: usize, p: usize, t: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n * p);
    for m in 0..p {
        let time = t as isize - m as isize;
        let block = if time >= 1 {
            observed.rows((time as usize - 1) * n, n).clone_owned()
        } else {
            state.initial[(-time) as usize].clone()
        };
        out.rows_mut(m * n, n).copy_from(&block);
    }
    out
}

/// `y_t` (last realized value): the observed block at t, or `y_0` at t=0.
fn y_current(state: &PathState, observed: &DVector<f64>, n: usize, t: usize) -> DVector<f64> {
    if t == 0 {
        state.initial[0].clone()
    } else {
        observed.rows((t - 1) * n, n).clone_owned()
    }
}

/// `gamma_{t,u}`: ones on the spot-rate coordinate of `y_{t+1}..y_{u-1}`.
fn rate_selector(n: usize, horizon: usize, t: usize, u: usize) -> DVector<f64> {
    let mut gamma = DVector::zeros((horizon - t) * n);
    for m in 0..(u - t - 1) {
        gamma[m * n] = 1.0;
    }
    gamma
}

/// Assembles the HJM no-arbitrage constraints at time t for one regime path.
///
/// Reading of the constraint display (fixed by the Monte Carlo oracle in the
/// test `no_arbitrage_holds_under_entropy_kernel`, which simulates the
/// expectation of the bond-trading condition and requires it to be 1):
///  - the row vectors are a_{m,u|t} = e_1' sum_{i=m}^{u-t-1}
///    J (A*_{t+i} A*_{t+i-1} ... A*_{t+m+1}) J', descending companion
///    products with the empty product equal to the identity;
///  - the quadratic term of b_u carries a factor 1/2, the Gaussian
///    completion of exp{-sum a_m xi_{t+m}};
///  - the forward-curve carry is sum_{m=1}^{u-t-1} e_{m+1}' y_t (the
///    maturities between t+1 and u-1), the e_1' y_t terms of the discount
///    and the bond having cancelled.
pub fn hjm_constraints(
    model: &ValidatedModel,
    layout: &HjmLayout,
    path: &RegimePath,
    state: &PathState,
    observed: &DVector<f64>,
    t: usize,
) -> Result<HjmConstraintSet> {
    layout.check(model)?;
    let horizon = layout.horizon;
    if path.horizon() != horizon {
        return Err(PricingError::ShapeMismatch {
            context: format!(
                "path length {} does not match layout horizon {horizon}",
                path.horizon()
            ),
        });
    }
    if t + 2 > horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("no bond maturities in {}..={horizon}", t + 2),
        });
    }
    let (n, p) = (model.dim(), model.lag_order());
    let comp = model.companion_form(path, state)?;
    let sigmas = model.covariance_path(path)?;
    let ys = y_star(state, observed, n, p, t);
    let y_t = y_current(state, observed, n, t);

    let rest = horizon - t;
    let mut a = DMatrix::zeros(horizon - t - 1, n * rest);
    let mut b = DVector::zeros(horizon - t - 1);
    for u in (t + 2)..=horizon {
        let row = u - t - 2;
        let m_max = u - t - 1;
        let mut b_u = 0.0;
        for m in 1..=m_max {
            // S = sum_{i=m}^{m_max} A*_{t+i} ... A*_{t+m+1} (empty = I).
            let np = n * p;
            let mut prod = DMatrix::identity(np, np);
            let mut s = DMatrix::identity(np, np);
            for i in (m + 1)..=m_max {
                prod = &comp[t + i - 1].1 * prod;
                s += &prod;
            }
            // a_{m,u|t} = e_1' J S J' = first row of the top-left n x n block.
            let a_m = s.view((0, 0), (1, n)).clone_owned();
            a.view_mut((row, (m - 1) * n), (1, n)).copy_from(&a_m);
            let a_vec = a_m.transpose();
            b_u += 0.5 * a_vec.dot(&(&sigmas[t + m - 1] * &a_vec));
            let nu = comp[t + m - 1].0.rows(0, n);
            b_u -= a_vec.dot(&nu.clone_owned());
        }
        // Drift of the realized state: e_1' J sum_m (A*_{t+m} ... A*_{t+1}) y_t^*.
        let mut q = ys.clone();
        for m in 1..=m_max {
            q = &comp[t + m - 1].1 * q;
            b_u -= q[0];
        }
        // Forward-curve carry sum_{m=1}^{u-t-1} e_{m+1}' y_t.
        for m in 1..=m_max {
            b_u += y_t[m];
        }
        b[row] = b_u;
    }
    Ok(HjmConstraintSet { a, b })
}

/// Entropy-kernel delta representations for times 1..=T: zero over the
/// realized prefix, and `Delta_{0,t+m} = [theta_{t+m} : 0]` afterwards (the
/// exogenous vector leads with 1, so the kernel enters as a constant shift).
pub fn hjm_deltas(
    model: &ValidatedModel,
    layout: &HjmLayout,
    path: &RegimePath,
    state: &PathState,
    observed: &DVector<f64>,
    t: usize,
) -> Result<Vec<KernelDeltas>> {
    let constraints = hjm_constraints(model, layout, path, state, observed, t)?;
    let (n, p, k) = (model.dim(), model.lag_order(), model.exo_dim());
    let sigmas = model.covariance_path(path)?;
    let theta = entropy_kernel(
        &sigmas[t..],
        &KernelConstraint { a: constraints.a, b: constraints.b },
    )?;
    let zero = || KernelDeltas {
        d0: DMatrix::zeros(n, k),
        dm: vec![DMatrix::zeros(n, n); p],
    };
    let mut out: Vec<KernelDeltas> = (0..t).map(|_| zero()).collect();
    for m in 0..(layout.horizon - t) {
        let mut d = zero();
        d.d0.column_mut(0).copy_from(&theta.rows(m * n, n));
        out.push(d);
    }
    Ok(out)
}

/// Zero-delta representations of length `len` (real-measure prefix
/// likelihood for regime filtering).
fn zero_deltas(model: &ValidatedModel, len: usize) -> Vec<KernelDeltas> {
    let (n, p, k) = (model.dim(), model.lag_order(), model.exo_dim());
    (0..len)
        .map(|_| KernelDeltas {
            d0: DMatrix::zeros(n, k),
            dm: vec![DMatrix::zeros(n, n); p],
        })
        .collect()
}

/// Law of the forward rate `f_{v,u1,u2}` given `H_t`: the average of the log
/// instantaneous forwards `e_{m-v+1}' y_v`, `m = u1..u2-1`, read off a
/// Gaussian law of the future block (pass the forward-measure mean for
/// forward-measure laws).
pub fn forward_rate_law(
    layout: &HjmLayout,
    n: usize,
    t: usize,
    v: usize,
    u1: usize,
    u2: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    if !(t < v && v <= u1 && u1 < u2 && u2 <= layout.horizon) {
        return Err(PricingError::IndexOutOfRange {
            context: format!(
                "need t < v <= u1 < u2 <= T, got t={t}, v={v}, u1={u1}, u2={u2}, T={}",
                layout.horizon
            ),
        });
    }
    let width = (u2 - u1) as f64;
    let mut w = DVector::zeros((layout.horizon - t) * n);
    for m in u1..u2 {
        w[(v - t - 1) * n + (m - v)] = 1.0 / width;
    }
    let mu = w.dot(mean);
    let var = w.dot(&(cov * &w)).max(0.0);
    Ok((mu, var))
}

/// Runs `per_path(system, conditional law)` over the regime mixture and
/// returns the weighted sum.
#[allow(clippy::too_many_arguments)]
fn price_over_paths<F>(
    model: &ValidatedModel,
    layout: &HjmLayout,
    t: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
    mut per_path: F,
) -> Result<f64>
where
    F: FnMut(&StackedSystem, &GaussianLaw) -> Result<f64>,
{
    layout.check(model)?;
    let horizon = layout.horizon;
    let prefixes = prefix_weights(
        model,
        state,
        observed,
        conditioning,
        |p| Ok(zero_deltas(model, p.horizon())),
        cap,
    )?;
    let mut price = 0.0;
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cap)?;
        for (future, w_future) in &futures.entries {
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let deltas = hjm_deltas(model, layout, &path, state, observed, t)?;
            let sys = build_stacked(model, &path, &deltas, state)?;
            let law = sys.law_conditional_future(t, observed)?;
            price += w_prefix * w_future * per_path(&sys, &law)?;
        }
    }
    Ok(price)
}

/// Price at t of the standard forward-rate caplet `D_{u2}(f_{v,u1,u2}-k)^+`
/// (relative to `D_t`); `call=false` gives the floorlet `(k-f)^+`.
#[allow(clippy::too_many_arguments)]
pub fn price_forward_caplet(
    model: &ValidatedModel,
    layout: &HjmLayout,
    t: usize,
    v: usize,
    u1: usize,
    u2: usize,
    kappa: f64,
    call: bool,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    let n = model.dim();
    let r1 = y_current(state, observed, n, t)[0];
    let gamma = rate_selector(n, layout.horizon, t, u2);
    price_over_paths(model, layout, t, state, observed, conditioning, cap, |_, law| {
        let a = bond_exponent(law, &gamma, r1);
        let mu_hat = forward_measure_mean(law, &gamma);
        let (mu_f, var_f) = forward_rate_law(layout, n, t, v, u1, u2, &mu_hat, &law.cov)?;
        let sigma_f = var_f.sqrt();
        let payoff = if call {
            truncated_call(mu_f, sigma_f, kappa)
        } else {
            truncated_put(mu_f, sigma_f, kappa)
        };
        Ok(a.exp() * payoff)
    })
}

/// Lemma-6 lognormal call `E[(e^X - K)^+]`, `X ~ N(mu, sigma^2)`, `K > 0`;
/// `call=false` gives `E[(K - e^X)^+]`.
pub fn lognormal_option(mu: f64, sigma: f64, k: f64, call: bool) -> f64 {
    if sigma <= 0.0 {
        let diff = mu.exp() - k;
        return if call { diff.max(0.0) } else { (-diff).max(0.0) };
    }
    let d1 = (mu + sigma * sigma - k.ln()) / sigma;
    let d2 = d1 - sigma;
    let fwd = (mu + 0.5 * sigma * sigma).exp();
    if call {
        fwd * norm_cdf(d1) - k * norm_cdf(d2)
    } else {
        k * norm_cdf(-d2) - fwd * norm_cdf(-d1)
    }
}

/// Price at t of the LIBOR caplet `D_{u2}(L_{v,u1,u2}-k)^+` (relative to
/// `D_t`), with `L = (exp{(u2-u1) f_{v,u1,u2}} - 1)/(u2-u1)`; `call=false`
/// gives the floorlet. The strike transform is `1 + k(u2-u1)`, so `k` must
/// exceed `-1/(u2-u1)`.
#[allow(clippy::too_many_arguments)]
pub fn price_libor_caplet(
    model: &ValidatedModel,
    layout: &HjmLayout,
    t: usize,
    v: usize,
    u1: usize,
    u2: usize,
    kappa: f64,
    call: bool,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    let width = (u2 - u1) as f64;
    let k_transformed = 1.0 + kappa * width;
    if k_transformed <= 0.0 {
        return Err(PricingError::InvalidModel {
            context: format!("LIBOR strike {kappa} at or below -1/(u2-u1)"),
        });
    }
    let n = model.dim();
    let r1 = y_current(state, observed, n, t)[0];
    let gamma = rate_selector(n, layout.horizon, t, u2);
    price_over_paths(model, layout, t, state, observed, conditioning, cap, |_, law| {
        let a = bond_exponent(law, &gamma, r1);
        let mu_hat = forward_measure_mean(law, &gamma);
        let (mu_f, var_f) = forward_rate_law(layout, n, t, v, u1, u2, &mu_hat, &law.cov)?;
        let value =
            lognormal_option(width * mu_f, width * var_f.sqrt(), k_transformed, call) / width;
        Ok(a.exp() * value)
    })
}

/// Price at t of a European option, exercised at v, on the zero-coupon bond
/// maturing at u: payoff `D_v (B_{v,u} - K)^+` relative to `D_t` (`call=false`
/// gives the put). `B_{v,u} = exp{-(u-v) f_{v,v,u}}` is lognormal under the
/// (t,v)-forward measure.
#[allow(clippy::too_many_arguments)]
pub fn price_zcb_option(
    model: &ValidatedModel,
    layout: &HjmLayout,
    t: usize,
    v: usize,
    u: usize,
    strike: f64,
    call: bool,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    if !(t < v && v < u && u <= layout.horizon) {
        return Err(PricingError::IndexOutOfRange {
            context: format!("need t < v < u <= T, got t={t}, v={v}, u={u}, T={}", layout.horizon),
        });
    }
    if strike <= 0.0 {
        return Err(PricingError::InvalidModel {
            context: format!("strike {strike} must be positive"),
        });
    }
    let n = model.dim();
    let r1 = y_current(state, observed, n, t)[0];
    let gamma = rate_selector(n, layout.horizon, t, v);
    let width = (u - v) as f64;
    price_over_paths(model, layout, t, state, observed, conditioning, cap, |_, law| {
        let a = bond_exponent(law, &gamma, r1);
        let mu_hat = forward_measure_mean(law, &gamma);
        let (mu_f, var_f) = forward_rate_law(layout, n, t, v, v, u, &mu_hat, &law.cov)?;
        Ok(a.exp() * lognormal_option(-width * mu_f, width * var_f.sqrt(), strike, call))
    })
}

/// Price at t of the zero-coupon bond maturing at u under the HJM kernel,
/// mixed over the regime paths.
#[allow(clippy::too_many_arguments)]
pub fn hjm_zcb(
    model: &ValidatedModel,
    layout: &HjmLayout,
    t: usize,
    u: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    if t >= u || u > layout.horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("need t < u <= T, got t={t}, u={u}, T={}", layout.horizon),
        });
    }
    let n = model.dim();
    let r1 = y_current(state, observed, n, t)[0];
    let gamma = rate_selector(n, layout.horizon, t, u);
    price_over_paths(model, layout, t, state, observed, conditioning, cap, |_, law| {
        Ok(bond_exponent(law, &gamma, r1).exp())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_pdf;
    use crate::model::{CovarianceSpec, MsVarModel};
    use crate::oracle::{mc_price, quad_expectation_1d, simulate_under_q};
    use approx::assert_abs_diff_eq;

    /// n=4, T=4, p=1: three usable forward-rate coordinates plus one macro
    /// variable (the fourth coordinate doubles as f~_{t,t+3} in-layout).
    fn hjm_model(n_regimes: usize) -> (ValidatedModel, HjmLayout) {
        let a = DMatrix::from_row_slice(
            4,
            5,
            &[
                0.008, 0.20, 0.60, 0.00, 0.02, //
                0.010, 0.00, 0.30, 0.50, 0.02, //
                0.012, 0.00, 0.00, 0.70, 0.02, //
                0.000, 0.00, 0.00, 0.00, 0.80,
            ],
        );
        let mut a2 = a.clone();
        if n_regimes == 2 {
            a2[(0, 0)] = 0.016;
            a2[(1, 2)] = 0.10;
            a2[(3, 4)] = 0.60;
        }
        let l = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.004, 0.0, 0.0, 0.0, //
                0.001, 0.004, 0.0, 0.0, //
                0.000, 0.001, 0.004, 0.0, //
                0.000, 0.000, 0.010, 0.050,
            ],
        );
        let sigma = &l * l.transpose();
        let mut sigma2 = sigma.clone();
        if n_regimes == 2 {
            sigma2 *= 2.0;
        }
        let (coeff, sigmas, transition, initial) = if n_regimes == 2 {
            (
                vec![a, a2],
                vec![sigma, sigma2],
                DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
                DVector::from_row_slice(&[0.65, 0.35]),
            )
        } else {
            (
                vec![a],
                vec![sigma],
                DMatrix::from_element(1, 1, 1.0),
                DVector::from_element(1, 1.0),
            )
        };
        let model = MsVarModel {
            n_regimes,
            lag_order: 1,
            dim: 4,
            exo_dim: 1,
            coeff,
            transition,
            initial_dist: initial,
            cov_spec: CovarianceSpec::ConstantPerRegime(sigmas),
        }
        .validate()
        .unwrap();
        (model, HjmLayout { horizon: 4 })
    }

    fn hjm_state(horizon: usize) -> PathState {
        PathState::constant_exo(
            vec![DVector::from_row_slice(&[
                1.030f64.ln(),
                1.032f64.ln(),
                1.034f64.ln(),
                1.036f64.ln(),
            ])],
            1,
            horizon,
        )
    }

    /// D_u / D_t along a trajectory at t=0: exp{-sum_{m=0}^{u-1} y_m[0]}.
    fn rel_discount(y0: &DVector<f64>, traj: &[DVector<f64>], u: usize) -> f64 {
        let mut s = y0[0];
        for m in 2..=u {
            s += traj[m - 2][0];
        }
        (-s).exp()
    }

    #[test]
    fn trivial_constraint_shapes() {
        // All VAR coefficients zero: a_{m,u|t} = e_1' for every m (empty
        // products), and b_u = 1/2 sum_m Sigma[0,0] + sum_m y_t[m].
        let sigma = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.04, 0.02, 0.01, 0.05]));
        let model = MsVarModel {
            n_regimes: 1,
            lag_order: 1,
            dim: 4,
            exo_dim: 1,
            coeff: vec![DMatrix::zeros(4, 5)],
            transition: DMatrix::from_element(1, 1, 1.0),
            initial_dist: DVector::from_element(1, 1.0),
            cov_spec: CovarianceSpec::ConstantPerRegime(vec![sigma]),
        }
        .validate()
        .unwrap();
        let layout = HjmLayout { horizon: 4 };
        let state = hjm_state(4);
        let path = RegimePath(vec![0; 4]);
        let observed = DVector::zeros(0);
        let set = hjm_constraints(&model, &layout, &path, &state, &observed, 0).unwrap();
        assert_eq!(set.a.shape(), (3, 16));
        for u in 2..=4usize {
            let row = u - 2;
            for m in 1..=(u - 1) {
                let block = set.a.view((row, (m - 1) * 4), (1, 4));
                assert_abs_diff_eq!(block[(0, 0)], 1.0, epsilon = 1e-14);
                assert_abs_diff_eq!(block.iter().map(|x| x.abs()).sum::<f64>(), 1.0);
            }
            // Zeros beyond m = u-t-1.
            for m in u..=4 {
                if m <= 4 && (m - 1) * 4 < 16 {
                    assert_eq!(set.a.view((row, (m - 1) * 4), (1, 4)).amax(), 0.0);
                }
            }
            let y0 = &state.initial[0];
            let expected: f64 = (1..u)
                .map(|m| 0.5 * 0.04 + y0[m])
                .sum();
            assert_abs_diff_eq!(set.b[row], expected, epsilon = 1e-12);
        }
        // Too-large horizon is rejected.
        assert!(HjmLayout { horizon: 5 }.check(&model).is_err());
    }

    /// The adjudicating oracle for the constraint-assembly reading (product
    /// order, the 1/2 quadratic factor, and the y_t carry limits): with the
    /// entropy kernel installed, the bond-trading no-arbitrage expectation
    /// must be 1 for every maturity. Run at t=1 so the carry-limit readings
    /// differ.
    #[test]
    fn no_arbitrage_holds_under_entropy_kernel() {
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let t = 1;
        let mut state = hjm_state(horizon);
        let y1 = DVector::from_row_slice(&[1.031f64.ln(), 1.033f64.ln(), 1.035f64.ln(), 0.02]);
        let observed = y1.clone();
        state.push_observed(y1.clone());
        for path in [RegimePath(vec![0; horizon]), RegimePath(vec![1, 0, 1, 0])] {
            let deltas = hjm_deltas(&model, &layout, &path, &state, &observed, t).unwrap();
            let sys = build_stacked(&model, &path, &deltas, &state).unwrap();
            let law = sys.law_conditional_future(t, &observed).unwrap();
            for u in (t + 2)..=horizon {
                // MC of E[exp{-sum_{m=t+1}^{u-1} e_1'y_m + sum e_{m+1}'y_t}].
                let est = mc_price(
                    &model,
                    &path,
                    &deltas,
                    &state,
                    |traj| {
                        let mut expo = 0.0;
                        for m in (t + 1)..u {
                            expo -= traj[m - 1][0];
                        }
                        for m in 1..=(u - t - 1) {
                            expo += y1[m];
                        }
                        expo.exp()
                    },
                    200_000,
                    107 + u as u64,
                    false,
                )
                .unwrap();
                assert!(
                    (est.value - 1.0).abs() < 4.0 * est.std_error,
                    "path {:?} u={u}: mean {} se {}",
                    path.0,
                    est.value,
                    est.std_error
                );
                // Closed-form bond equals the forward-curve bond: the
                // no-arbitrage condition in its B_{t,u} form.
                let gamma = rate_selector(model.dim(), horizon, t, u);
                let closed = bond_exponent(&law, &gamma, y1[0]).exp();
                let curve: f64 = (0..(u - t)).map(|m| -y1[m]).sum::<f64>().exp();
                assert_abs_diff_eq!(closed, curve, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn forward_reconstruction_identities() {
        // B_{v,u} from the forward curve equals exp{-(u-v) f_{v,v,u}} and
        // the ratio definition of f recovers the average of the f~'s.
        let y_v = DVector::from_row_slice(&[0.030, 0.032, 0.034, 0.036]);
        let v = 1;
        for u in (v + 1)..=4usize {
            let b: f64 = (v..u).map(|m| -y_v[m - v]).sum::<f64>().exp();
            let f_avg: f64 =
                (v..u).map(|m| y_v[m - v]).sum::<f64>() / (u - v) as f64;
            assert_abs_diff_eq!(b, (-((u - v) as f64) * f_avg).exp(), epsilon = 1e-12);
            // Ratio definition over [u1,u2] = [v,u] with B_{v,v} = 1.
            let from_ratio = -(b.ln() - 0.0) / (u - v) as f64;
            assert_abs_diff_eq!(from_ratio, f_avg, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rate_law_matches_importance_sampling() {
        // E[(D_{u2}/D_t) f] / exp(a) = mu_f and the same for the second
        // central moment under the (t,u2)-forward measure.
        let (model, layout) = hjm_model(1);
        let horizon = layout.horizon;
        let (t, v, u1, u2) = (0, 2, 2, 4);
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let path = RegimePath(vec![0; horizon]);
        let deltas = hjm_deltas(&model, &layout, &path, &state, &observed, t).unwrap();
        let sys = build_stacked(&model, &path, &deltas, &state).unwrap();
        let law = sys.law_conditional_future(t, &observed).unwrap();
        let gamma = rate_selector(model.dim(), horizon, t, u2);
        let a = bond_exponent(&law, &gamma, state.initial[0][0]);
        let mu_hat = forward_measure_mean(&law, &gamma);
        let (mu_f, var_f) =
            forward_rate_law(&layout, model.dim(), t, v, u1, u2, &mu_hat, &law.cov).unwrap();
        assert!(var_f > 0.0);
        let y0 = state.initial[0].clone();
        let forward_of = |traj: &[DVector<f64>]| -> f64 {
            let yv = &traj[v - 1];
            (u1..u2).map(|m| yv[m - v]).sum::<f64>() / (u2 - u1) as f64
        };
        let est_mean = mc_price(
            &model,
            &path,
            &deltas,
            &state,
            |traj| rel_discount(&y0, traj, u2) * forward_of(traj),
            200_000,
            113,
            false,
        )
        .unwrap();
        assert!(
            (est_mean.value - a.exp() * mu_f).abs() < 3.0 * est_mean.std_error,
            "mean: mc {} closed {} se {}",
            est_mean.value,
            a.exp() * mu_f,
            est_mean.std_error
        );
        let est_var = mc_price(
            &model,
            &path,
            &deltas,
            &state,
            |traj| {
                let d = forward_of(traj) - mu_f;
                rel_discount(&y0, traj, u2) * d * d
            },
            200_000,
            127,
            false,
        )
        .unwrap();
        assert!(
            (est_var.value - a.exp() * var_f).abs() < 3.0 * est_var.std_error,
            "var: mc {} closed {} se {}",
            est_var.value,
            a.exp() * var_f,
            est_var.std_error
        );
        // Single-coordinate marginal: u2 = u1 + 1 reads one component.
        let (mu_one, var_one) =
            forward_rate_law(&layout, model.dim(), t, v, 2, 3, &mu_hat, &law.cov).unwrap();
        let idx = (v - t - 1) * model.dim();
        assert_abs_diff_eq!(mu_one, mu_hat[idx], epsilon = 1e-14);
        assert_abs_diff_eq!(var_one, law.cov[(idx, idx)], epsilon = 1e-14);
    }

    #[test]
    fn caplet_parity_and_at_the_money() {
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let (t, v, u1, u2) = (0, 2, 2, 4);
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let cond = Conditioning::Known(Vec::new());
        let kappa = 0.033;
        let caplet = price_forward_caplet(
            &model, &layout, t, v, u1, u2, kappa, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        let floorlet = price_forward_caplet(
            &model, &layout, t, v, u1, u2, kappa, false, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        // Parity: caplet - floorlet = sum_paths exp(a) (mu_f - kappa).
        let n = model.dim();
        let gamma = rate_selector(n, horizon, t, u2);
        let r1 = state.initial[0][0];
        let parity = price_over_paths(
            &model, &layout, t, &state, &observed, &cond, 1 << 20,
            |_, law| {
                let a = bond_exponent(law, &gamma, r1);
                let mu_hat = forward_measure_mean(law, &gamma);
                let (mu_f, _) = forward_rate_law(&layout, n, t, v, u1, u2, &mu_hat, &law.cov)?;
                Ok(a.exp() * (mu_f - kappa))
            },
        )
        .unwrap();
        assert_abs_diff_eq!(caplet - floorlet, parity, epsilon = 1e-10);

        // Single-regime at-the-money: price = exp(a) sigma_f phi(0).
        let (model1, layout1) = hjm_model(1);
        let path = RegimePath(vec![0; horizon]);
        let deltas = hjm_deltas(&model1, &layout1, &path, &state, &observed, t).unwrap();
        let sys = build_stacked(&model1, &path, &deltas, &state).unwrap();
        let law = sys.law_conditional_future(t, &observed).unwrap();
        let a = bond_exponent(&law, &gamma, r1);
        let mu_hat = forward_measure_mean(&law, &gamma);
        let (mu_f, var_f) = forward_rate_law(&layout1, n, t, v, u1, u2, &mu_hat, &law.cov).unwrap();
        let atm = price_forward_caplet(
            &model1, &layout1, t, v, u1, u2, mu_f, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        assert_abs_diff_eq!(atm, a.exp() * var_f.sqrt() * norm_pdf(0.0), epsilon = 1e-12);
    }

    #[test]
    fn caplet_matches_mc_oracle() {
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let (t, v, u1, u2) = (0, 2, 2, 4);
        let kappa = 0.033;
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let cond = Conditioning::Known(Vec::new());
        let closed = price_forward_caplet(
            &model, &layout, t, v, u1, u2, kappa, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        let y0 = state.initial[0].clone();
        let futures = future_path_weights(&model, &[], horizon, 1 << 20).unwrap();
        let mut mc = 0.0;
        let mut se_sq = 0.0;
        for (path, w) in &futures.entries {
            let deltas = hjm_deltas(&model, &layout, path, &state, &observed, t).unwrap();
            let est = mc_price(
                &model,
                path,
                &deltas,
                &state,
                |traj| {
                    let yv = &traj[v - 1];
                    let f = (u1..u2).map(|m| yv[m - v]).sum::<f64>() / (u2 - u1) as f64;
                    rel_discount(&y0, traj, u2) * (f - kappa).max(0.0)
                },
                150_000,
                131,
                false,
            )
            .unwrap();
            mc += w * est.value;
            se_sq += w * w * est.std_error * est.std_error;
        }
        let se = se_sq.sqrt();
        assert!((closed - mc).abs() < 3.0 * se, "closed {closed} mc {mc} se {se}");
    }

    #[test]
    fn libor_lemma6_and_mc_oracle() {
        // Lemma 6 kernel: mu=0, sigma=1, K=1 -> e^{1/2} Phi(1) - Phi(0).
        let expected = 0.5f64.exp() * norm_cdf(1.0) - norm_cdf(0.0);
        assert_abs_diff_eq!(lognormal_option(0.0, 1.0, 1.0, true), expected, epsilon = 1e-12);
        let quad =
            quad_expectation_1d(|x| (x.exp() - 1.0f64).max(0.0), 0.0, 1.0, 1e-11).unwrap();
        assert_abs_diff_eq!(lognormal_option(0.0, 1.0, 1.0, true), quad, epsilon = 1e-10);
        // Put side against quadrature too.
        let quad_put =
            quad_expectation_1d(|x| (1.0f64 - x.exp()).max(0.0), 0.1, 0.7, 1e-11).unwrap();
        assert_abs_diff_eq!(lognormal_option(0.1, 0.7, 1.0, false), quad_put, epsilon = 1e-10);

        // LIBOR caplet against the Monte Carlo oracle.
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let (t, v, u1, u2) = (0, 2, 2, 4);
        let kappa = 0.034;
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let cond = Conditioning::Known(Vec::new());
        let closed = price_libor_caplet(
            &model, &layout, t, v, u1, u2, kappa, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        let width = (u2 - u1) as f64;
        let y0 = state.initial[0].clone();
        let futures = future_path_weights(&model, &[], horizon, 1 << 20).unwrap();
        let mut mc = 0.0;
        let mut se_sq = 0.0;
        for (path, w) in &futures.entries {
            let deltas = hjm_deltas(&model, &layout, path, &state, &observed, t).unwrap();
            let est = mc_price(
                &model,
                path,
                &deltas,
                &state,
                |traj| {
                    let yv = &traj[v - 1];
                    let f = (u1..u2).map(|m| yv[m - v]).sum::<f64>() / width;
                    let libor = ((width * f).exp() - 1.0) / width;
                    rel_discount(&y0, traj, u2) * (libor - kappa).max(0.0)
                },
                150_000,
                137,
                false,
            )
            .unwrap();
            mc += w * est.value;
            se_sq += w * w * est.std_error * est.std_error;
        }
        let se = se_sq.sqrt();
        assert!((closed - mc).abs() < 3.0 * se, "closed {closed} mc {mc} se {se}");
        // Strike below the transform bound is rejected.
        assert!(price_libor_caplet(
            &model, &layout, t, v, u1, u2, -0.6, true, &state, &observed, &cond, 1 << 20,
        )
        .is_err());
    }

    #[test]
    fn zcb_option_parity_and_mc_oracle() {
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let (t, v, u) = (0, 2, 4);
        let strike = 0.94;
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let cond = Conditioning::Known(Vec::new());
        let call = price_zcb_option(
            &model, &layout, t, v, u, strike, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        let put = price_zcb_option(
            &model, &layout, t, v, u, strike, false, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        // Parity: call - put = sum_paths exp(a)(E_fwd[B_{v,u}] - K).
        let n = model.dim();
        let gamma = rate_selector(n, horizon, t, v);
        let r1 = state.initial[0][0];
        let width = (u - v) as f64;
        let parity = price_over_paths(
            &model, &layout, t, &state, &observed, &cond, 1 << 20,
            |_, law| {
                let a = bond_exponent(law, &gamma, r1);
                let mu_hat = forward_measure_mean(law, &gamma);
                let (mu_f, var_f) = forward_rate_law(&layout, n, t, v, v, u, &mu_hat, &law.cov)?;
                let fwd_bond = (-width * mu_f + 0.5 * width * width * var_f).exp();
                Ok(a.exp() * (fwd_bond - strike))
            },
        )
        .unwrap();
        assert_abs_diff_eq!(call - put, parity, epsilon = 1e-10);
        // K >= 1 with positive rates: bond below par, put dominates.
        let deep_call = price_zcb_option(
            &model, &layout, t, v, u, 1.0, true, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        let deep_put = price_zcb_option(
            &model, &layout, t, v, u, 1.0, false, &state, &observed, &cond, 1 << 20,
        )
        .unwrap();
        assert!(deep_call < deep_put);

        // Monte Carlo oracle on D_v (B_{v,u} - K)^+.
        let y0 = state.initial[0].clone();
        let futures = future_path_weights(&model, &[], horizon, 1 << 20).unwrap();
        let mut mc = 0.0;
        let mut se_sq = 0.0;
        for (path, w) in &futures.entries {
            let deltas = hjm_deltas(&model, &layout, path, &state, &observed, t).unwrap();
            let est = mc_price(
                &model,
                path,
                &deltas,
                &state,
                |traj| {
                    let yv = &traj[v - 1];
                    let bond: f64 = (v..u).map(|m| -yv[m - v]).sum::<f64>().exp();
                    rel_discount(&y0, traj, v) * (bond - strike).max(0.0)
                },
                150_000,
                139,
                false,
            )
            .unwrap();
            mc += w * est.value;
            se_sq += w * w * est.std_error * est.std_error;
        }
        let se = se_sq.sqrt();
        assert!((call - mc).abs() < 3.0 * se, "closed {call} mc {mc} se {se}");
    }

    #[test]
    fn hjm_zcb_matches_curve_and_mc() {
        // At t the closed-form bond must reproduce the observed forward
        // curve exactly (that is the content of the constraints), and match
        // the MC discount oracle.
        let (model, layout) = hjm_model(2);
        let horizon = layout.horizon;
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let cond = Conditioning::Known(Vec::new());
        let y0 = state.initial[0].clone();
        for u in 1..=horizon {
            let closed = hjm_zcb(&model, &layout, 0, u, &state, &observed, &cond, 1 << 20).unwrap();
            let curve: f64 = (0..u).map(|m| -y0[m]).sum::<f64>().exp();
            assert_abs_diff_eq!(closed, curve, epsilon = 1e-10);
        }
        let u = 3;
        let futures = future_path_weights(&model, &[], horizon, 1 << 20).unwrap();
        let mut mc = 0.0;
        let mut se_sq = 0.0;
        for (path, w) in &futures.entries {
            let deltas = hjm_deltas(&model, &layout, path, &state, &observed, 0).unwrap();
            let est = mc_price(
                &model,
                path,
                &deltas,
                &state,
                |traj| rel_discount(&y0, traj, u),
                100_000,
                149,
                false,
            )
            .unwrap();
            mc += w * est.value;
            se_sq += w * w * est.std_error * est.std_error;
        }
        let closed = hjm_zcb(&model, &layout, 0, u, &state, &observed, &cond, 1 << 20).unwrap();
        let se = se_sq.sqrt();
        assert!((closed - mc).abs() < 4.0 * se, "closed {closed} mc {mc} se {se}");
    }

    #[test]
    fn simulate_under_q_consistency() {
        // theta recomputation in simulate_under_q must agree with the
        // constant-shift deltas: here d_m = 0, so theta is path-constant and
        // the conditional one-step means differ from the real measure by
        // exactly theta.
        let (model, layout) = hjm_model(1);
        let horizon = layout.horizon;
        let state = hjm_state(horizon);
        let observed = DVector::zeros(0);
        let path = RegimePath(vec![0; horizon]);
        let deltas = hjm_deltas(&model, &layout, &path, &state, &observed, 0).unwrap();
        let trajs = simulate_under_q(&model, &path, &deltas, &state, 151, 3).unwrap();
        assert_eq!(trajs.len(), 3);
        for traj in &trajs {
            assert_eq!(traj.len(), horizon);
        }
        // Deltas over the prefix are zero when t > 0.
        let mut state1 = hjm_state(horizon);
        let y1 = DVector::from_row_slice(&[0.03, 0.031, 0.032, 0.0]);
        state1.push_observed(y1.clone());
        let deltas1 = hjm_deltas(&model, &layout, &path, &state1, &y1, 1).unwrap();
        assert_eq!(deltas1[0].d0.amax(), 0.0);
        assert!(deltas1[1].d0.amax() > 0.0 || deltas1[2].d0.amax() > 0.0);
    }
}
