//! Pricing in the domestic-foreign lognormal market.
//!
//! The process `y_t` stacks `n_z` economic variables (leading with the
//! domestic log spot rate and the `n_q` foreign log spot rates) and the log
//! prices of `n_d` domestic assets, `n_f` foreign assets, and `n_q` foreign
//! currencies. Under the kernel of the lognormal system the domestically
//! discounted price vector `D_t^d X_t` is a martingale, which yields
//! closed-form zero-coupon bonds `exp{-r~_{t+1} - gamma' mu_{2.1}
//! + 1/2 gamma' Sigma_{22.1} gamma}`, the (t,u)-forward measure
//! `N(mu_{2.1} - Sigma_{22.1} gamma, Sigma_{22.1})`, Margrabe exchange
//! options via the bivariate-lognormal expectation `Psi`, per-asset measure
//! shifts `mu + Psi_22^{-1} Sigma_bar (i_{t,u} (x) R~' e)`, and the general
//! European option whose event probabilities are estimated by Gaussian Monte
//! Carlo with common random numbers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::girsanov::{lognormal_kernel_deltas, KernelDeltas};
use crate::linalg::{norm_cdf, spd_cholesky};
use crate::mixture::{future_path_weights, prefix_weights, Conditioning, Estimate};
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::stacked::{build_stacked, GaussianLaw, StackedSystem};
use crate::{PricingError, Result};

/// Layout of the domestic-foreign market inside the process `y_t`:
/// `n_z` economic variables (component 1 the domestic log rate, components
/// `2..=n_q+1` the foreign log rates), then `n_d` domestic log prices, the
/// foreign log prices country by country (`n_f_per[i]` assets for country
/// `i+1`), and the `n_q` log exchange rates.
#[derive(Debug, Clone)]
pub struct FxMarketSpec {
    pub n_z: usize,
    pub n_d: usize,
    /// `n_{i,f}` per foreign country; the length is `n_q`.
    pub n_f_per: Vec<usize>,
}

impl FxMarketSpec {
    pub fn n_q(&self) -> usize {
        self.n_f_per.len()
    }

    pub fn n_f(&self) -> usize {
        self.n_f_per.iter().sum()
    }

    /// `n_x = n_d + n_f + n_q`.
    pub fn n_x(&self) -> usize {
        self.n_d + self.n_f() + self.n_q()
    }

    /// `n = n_z + n_x`.
    pub fn dim(&self) -> usize {
        self.n_z + self.n_x()
    }

    pub fn check(&self, model: &ValidatedModel) -> Result<()> {
        if self.n_z < self.n_q() + 1 {
            return Err(PricingError::InvalidModel {
                context: format!(
                    "n_z={} must cover the domestic and {} foreign log rates",
                    self.n_z,
                    self.n_q()
                ),
            });
        }
        if self.n_x() == 0 {
            return Err(PricingError::InvalidModel {
                context: "market has no assets or currencies".into(),
            });
        }
        if model.dim() != self.dim() {
            return Err(PricingError::ShapeMismatch {
                context: format!(
                    "model dimension {} does not match n_z+n_x={}",
                    model.dim(),
                    self.dim()
                ),
            });
        }
        Ok(())
    }

    /// Block indicator `J` (n_f x n_q): column i holds ones on country i's
    /// assets, converting foreign prices into domestic currency.
    pub fn j_mat(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n_f(), self.n_q());
        let mut row = 0;
        for (country, &cnt) in self.n_f_per.iter().enumerate() {
            for _ in 0..cnt {
                j[(row, country)] = 1.0;
                row += 1;
            }
        }
        j
    }

    /// `R_2 = [[I,0,0],[0,I,J],[0,0,I]]` (n_x x n_x, unit diagonal).
    pub fn r2(&self) -> DMatrix<f64> {
        let (n_d, n_f, n_q) = (self.n_d, self.n_f(), self.n_q());
        let mut r2 = DMatrix::identity(self.n_x(), self.n_x());
        r2.view_mut((n_d, n_d + n_f), (n_f, n_q)).copy_from(&self.j_mat());
        r2
    }

    /// `C = [(C^d_{n_d})' : (J C^f_{n_q})' : (C^d_{n_q} - C^f_{n_q})']'`
    /// (n_x x n): the rate-carry extractor of the kernel's `theta_hat`.
    pub fn c_mat(&self) -> DMatrix<f64> {
        let (n_d, n_f, n_q, n) = (self.n_d, self.n_f(), self.n_q(), self.dim());
        let mut c = DMatrix::zeros(self.n_x(), n);
        // C^d_m = i_m e_1': the domestic log rate, duplicated.
        for i in 0..n_d {
            c[(i, 0)] = 1.0;
        }
        // J C^f: each foreign asset carries its own country's log rate.
        let mut row = n_d;
        for (country, &cnt) in self.n_f_per.iter().enumerate() {
            for _ in 0..cnt {
                c[(row, 1 + country)] = 1.0;
                row += 1;
            }
        }
        // C^d - C^f: currencies carry the rate differential.
        for i in 0..n_q {
            c[(n_d + n_f + i, 0)] = 1.0;
            c[(n_d + n_f + i, 1 + i)] = -1.0;
        }
        c
    }

    /// 0-based row (into the `n_x` block) of domestic asset i (1-based).
    pub fn asset_row_domestic(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.n_d {
            return Err(PricingError::IndexOutOfRange {
                context: format!("domestic asset {i} out of 1..={}", self.n_d),
            });
        }
        Ok(i - 1)
    }

    /// 0-based row of foreign asset k of country i: `a(i,k) - 1` with
    /// `a(i,k) = n_d + sum_{j<i} n_{j,f} + k`.
    pub fn asset_row_foreign(&self, i: usize, k: usize) -> Result<usize> {
        if i == 0 || i > self.n_q() {
            return Err(PricingError::IndexOutOfRange {
                context: format!("foreign country {i} out of 1..={}", self.n_q()),
            });
        }
        if k == 0 || k > self.n_f_per[i - 1] {
            return Err(PricingError::IndexOutOfRange {
                context: format!("asset {k} out of 1..={} for country {i}", self.n_f_per[i - 1]),
            });
        }
        Ok(self.n_d + self.n_f_per[..i - 1].iter().sum::<usize>() + k - 1)
    }

    /// 0-based row of currency i: `a(i) - 1` with `a(i) = n_d + n_f + i`.
    pub fn asset_row_currency(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.n_q() {
            return Err(PricingError::IndexOutOfRange {
                context: format!("currency {i} out of 1..={}", self.n_q()),
            });
        }
        Ok(self.n_d + self.n_f() + i - 1)
    }
}

/// Which spot-rate sum a selection vector accumulates.
#[derive(Debug, Clone, Copy)]
pub enum RateLeg {
    Domestic,
    /// 1-based country index.
    Foreign(usize),
}

/// `gamma_{t,u}` with `sum_{m=t+1}^u r~_m = r~_{t+1} + gamma' y_bar^c`:
/// ones on the rate coordinate of `y_{t+1},...,y_{u-1}`, zeros after.
pub fn rate_path_selector(
    spec: &FxMarketSpec,
    horizon: usize,
    t: usize,
    u: usize,
    leg: RateLeg,
) -> Result<DVector<f64>> {
    if t >= u || u > horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("need t < u <= horizon, got t={t}, u={u}, horizon={horizon}"),
        });
    }
    let coord = match leg {
        RateLeg::Domestic => 0,
        RateLeg::Foreign(i) => {
            if i == 0 || i > spec.n_q() {
                return Err(PricingError::IndexOutOfRange {
                    context: format!("foreign country {i} out of 1..={}", spec.n_q()),
                });
            }
            i
        }
    };
    let n = spec.dim();
    let mut gamma = DVector::zeros((horizon - t) * n);
    for m in 0..(u - t - 1) {
        gamma[m * n + coord] = 1.0;
    }
    Ok(gamma)
}

/// Delta representations of the lognormal kernel along a regime path.
pub fn fx_deltas_for_path(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    path: &RegimePath,
) -> Result<Vec<KernelDeltas>> {
    let r2 = spec.r2();
    let c = spec.c_mat();
    let sigmas = model.covariance_path(path)?;
    (1..=path.horizon())
        .map(|t| {
            lognormal_kernel_deltas(model, spec.n_z, &r2, &c, path.0[t - 1], &sigmas[t - 1], t)
        })
        .collect()
}

/// What a [`BondQuote`] conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuoteBasis {
    /// A single fixed regime path (the `H_t` quote).
    Path,
    /// The regime mixture (the `G_t` quote).
    Mixture,
}

/// A zero-coupon bond price with its log.
#[derive(Debug, Clone, Copy)]
pub struct BondQuote {
    pub exponent: f64,
    pub price: f64,
    pub basis: QuoteBasis,
}

/// `y_t` (last realized value): the observed block at t, or `y_0` at t=0.
fn y_current(state: &PathState, observed: &DVector<f64>, n: usize, t: usize) -> DVector<f64> {
    if t == 0 {
        state.initial[0].clone()
    } else {
        observed.rows((t - 1) * n, n).clone_owned()
    }
}

/// Bond exponent `a = -r~_{t+1} - gamma' mu + 1/2 gamma' Sigma gamma` for the
/// conditional law `(mu, Sigma)` of the future block.
pub fn bond_exponent(law: &GaussianLaw, gamma: &DVector<f64>, log_rate_next: f64) -> f64 {
    -log_rate_next - gamma.dot(&law.mean) + 0.5 * gamma.dot(&(&law.cov * gamma))
}

#[allow(clippy::too_many_arguments)]
fn zcb_mixture(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    leg: RateLeg,
    t: usize,
    u: usize,
    horizon: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<BondQuote> {
    spec.check(model)?;
    let rate_coord = match leg {
        RateLeg::Domestic => 0,
        RateLeg::Foreign(i) => i,
    };
    let gamma = rate_path_selector(spec, horizon, t, u, leg)?;
    let log_rate_next = y_current(state, observed, model.dim(), t)[rate_coord];
    let prefixes = prefix_weights(
        model,
        state,
        observed,
        conditioning,
        |p| fx_deltas_for_path(model, spec, p),
        cap,
    )?;
    let mut price = 0.0;
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cap)?;
        for (future, w_future) in &futures.entries {
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let deltas = fx_deltas_for_path(model, spec, &path)?;
            let sys = build_stacked(model, &path, &deltas, state)?;
            let law = sys.law_conditional_future(t, observed)?;
            price += w_prefix * w_future * bond_exponent(&law, &gamma, log_rate_next).exp();
        }
    }
    Ok(BondQuote { exponent: price.ln(), price, basis: QuoteBasis::Mixture })
}

/// Price at t of the domestic zero-coupon bond maturing at u, mixed over
/// regime paths.
#[allow(clippy::too_many_arguments)]
pub fn zcb_domestic(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    t: usize,
    u: usize,
    horizon: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<BondQuote> {
    zcb_mixture(model, spec, RateLeg::Domestic, t, u, horizon, state, observed, conditioning, cap)
}

/// Price at t of country i's zero-coupon bond maturing at u (in foreign
/// currency units), mixed over regime paths.
#[allow(clippy::too_many_arguments)]
pub fn zcb_foreign(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    i: usize,
    t: usize,
    u: usize,
    horizon: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<BondQuote> {
    zcb_mixture(model, spec, RateLeg::Foreign(i), t, u, horizon, state, observed, conditioning, cap)
}

/// Mean of the future block under the (t,u)-forward measure:
/// `mu_hat = mu_{2.1} - Sigma_{22.1} gamma`.
pub fn forward_measure_mean(law: &GaussianLaw, gamma: &DVector<f64>) -> DVector<f64> {
    &law.mean - &law.cov * gamma
}

/// `E[(e^{X_1} - e^{X_2})^+]` for bivariate normal `(X_1, X_2)`. When the
/// variance of `X_1 - X_2` vanishes the difference is deterministic and the
/// value is `(e^{mu_1 + sigma_1^2/2} - e^{mu_2 + sigma_2^2/2})^+`.
pub fn margrabe_psi(mu1: f64, mu2: f64, s1: f64, s2: f64, s12: f64) -> f64 {
    let e1 = (mu1 + 0.5 * s1).exp();
    let e2 = (mu2 + 0.5 * s2).exp();
    let spread_var = s1 - 2.0 * s12 + s2;
    let scale = (s1.abs() + s2.abs()).max(1.0);
    if spread_var <= 1e-14 * scale {
        return (e1 - e2).max(0.0);
    }
    let s = spread_var.sqrt();
    e1 * norm_cdf((mu1 - mu2 + s1 - s12) / s) - e2 * norm_cdf((mu1 - mu2 + s12 - s2) / s)
}

/// An exchange option on geometrically weighted prices, settled at
/// `maturity`: payoff `(w_0 x^w - w_hat_0 x^{w_hat})^+` with per-period weight
/// rows on the `n_x` price components for `m = t+1..T`.
#[derive(Debug, Clone)]
pub struct ExchangeSpec {
    pub w0: f64,
    pub w0_hat: f64,
    /// Weight rows `w_{t+1}..w_T`, each of length n_x.
    pub w: Vec<DVector<f64>>,
    pub w_hat: Vec<DVector<f64>>,
    /// Settlement time u in `t+1..=T`; discounting uses the (t,u)-forward
    /// measure, so weights must vanish after u.
    pub maturity: usize,
}

impl ExchangeSpec {
    fn check(&self, spec: &FxMarketSpec, t: usize, horizon: usize) -> Result<()> {
        if !(self.w0 > 0.0) || !(self.w0_hat > 0.0) {
            return Err(PricingError::InvalidModel {
                context: format!("prefactors w0={}, w0_hat={} must be positive", self.w0, self.w0_hat),
            });
        }
        let n_x = spec.n_x();
        let len = horizon - t;
        if self.w.len() != len
            || self.w_hat.len() != len
            || self.w.iter().chain(&self.w_hat).any(|v| v.len() != n_x)
        {
            return Err(PricingError::ShapeMismatch {
                context: format!("exchange weights must be {len} rows of length {n_x}"),
            });
        }
        if self.maturity <= t || self.maturity > horizon {
            return Err(PricingError::IndexOutOfRange {
                context: format!(
                    "maturity {} outside {}..={horizon}",
                    self.maturity,
                    t + 1
                ),
            });
        }
        for (m, (w, wh)) in self.w.iter().zip(&self.w_hat).enumerate() {
            if t + m + 1 > self.maturity && (w.amax() != 0.0 || wh.amax() != 0.0) {
                return Err(PricingError::InvalidModel {
                    context: format!(
                        "weights at time {} fall after settlement {}",
                        t + m + 1,
                        self.maturity
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Stacks per-period asset-row weights into a vector on the full future block:
/// `w_bar' y_bar^c = sum_m w_m' M_2 y_m`.
fn stack_asset_weights(spec: &FxMarketSpec, rows: &[DVector<f64>]) -> DVector<f64> {
    let n = spec.dim();
    let mut out = DVector::zeros(rows.len() * n);
    for (m, w) in rows.iter().enumerate() {
        out.rows_mut(m * n + spec.n_z, spec.n_x()).copy_from(w);
    }
    out
}

/// Price at t of the exchange option, mixed over regime paths:
/// `sum_paths B_{t,u}(H_t) Psi(mu_1, mu_2, sigma_1^2, sigma_2^2, sigma_12)
/// f(s_bar | G_t)` with the Lemma parameters read off the (t,u)-forward law.
#[allow(clippy::too_many_arguments)]
pub fn price_exchange_option(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    ex: &ExchangeSpec,
    t: usize,
    horizon: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    spec.check(model)?;
    ex.check(spec, t, horizon)?;
    let gamma = rate_path_selector(spec, horizon, t, ex.maturity, RateLeg::Domestic)?;
    let log_rate_next = y_current(state, observed, model.dim(), t)[0];
    let w_bar = stack_asset_weights(spec, &ex.w);
    let w_bar_hat = stack_asset_weights(spec, &ex.w_hat);
    let prefixes = prefix_weights(
        model,
        state,
        observed,
        conditioning,
        |p| fx_deltas_for_path(model, spec, p),
        cap,
    )?;
    let mut price = 0.0;
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cap)?;
        for (future, w_future) in &futures.entries {
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let deltas = fx_deltas_for_path(model, spec, &path)?;
            let sys = build_stacked(model, &path, &deltas, state)?;
            let law = sys.law_conditional_future(t, observed)?;
            let a = bond_exponent(&law, &gamma, log_rate_next);
            let mu_fwd = forward_measure_mean(&law, &gamma);
            let mu1 = ex.w0.ln() + w_bar.dot(&mu_fwd);
            let mu2 = ex.w0_hat.ln() + w_bar_hat.dot(&mu_fwd);
            let cov_w = &law.cov * &w_bar;
            let cov_wh = &law.cov * &w_bar_hat;
            let s1 = w_bar.dot(&cov_w);
            let s2 = w_bar_hat.dot(&cov_wh);
            let s12 = w_bar.dot(&cov_wh);
            price += w_prefix * w_future * a.exp() * margrabe_psi(mu1, mu2, s1, s2, s12);
        }
    }
    Ok(price)
}

#[derive(Debug, Clone, Copy)]
enum Leg {
    Strike,
    Domestic { i: usize },
    ForeignAsset { i: usize, k: usize },
    Currency { i: usize },
}

impl Leg {
    fn row(&self, spec: &FxMarketSpec) -> Result<Option<usize>> {
        match *self {
            Leg::Strike => Ok(None),
            Leg::Domestic { i } => spec.asset_row_domestic(i).map(Some),
            Leg::ForeignAsset { i, k } => spec.asset_row_foreign(i, k).map(Some),
            Leg::Currency { i } => spec.asset_row_currency(i).map(Some),
        }
    }
}

/// Builds the [`ExchangeSpec`] of special case 1..9 of the Margrabe option
/// list. `idx` holds the 1-based indices in the order of the case statement
/// (case 1/3: `[i]`; case 2: `[i,k]`; case 4/6/9: `[i,j]`; case 5: `[i,j,k]`;
/// case 7: `[i,r,j,k]`; case 8: `[i,k,j]`). `units` are the units of the long
/// and short asset legs; cases 1-3 replace the constant leg's unit with the
/// strike. `call = false` swaps the legs.
#[allow(clippy::too_many_arguments)]
pub fn special_case_weights(
    spec: &FxMarketSpec,
    case: usize,
    call: bool,
    idx: &[usize],
    units: (f64, f64),
    strike: Option<f64>,
    t: usize,
    horizon: usize,
    u: usize,
) -> Result<ExchangeSpec> {
    let need = |want: usize| -> Result<()> {
        if idx.len() != want {
            return Err(PricingError::ShapeMismatch {
                context: format!("case {case} takes {want} indices, got {}", idx.len()),
            });
        }
        Ok(())
    };
    let (long, short): (Leg, Leg) = match case {
        1 => {
            need(1)?;
            (Leg::Domestic { i: idx[0] }, Leg::Strike)
        }
        2 => {
            need(2)?;
            (Leg::ForeignAsset { i: idx[0], k: idx[1] }, Leg::Strike)
        }
        3 => {
            need(1)?;
            (Leg::Currency { i: idx[0] }, Leg::Strike)
        }
        4 => {
            need(2)?;
            (Leg::Domestic { i: idx[0] }, Leg::Domestic { i: idx[1] })
        }
        5 => {
            need(3)?;
            (Leg::Domestic { i: idx[0] }, Leg::ForeignAsset { i: idx[1], k: idx[2] })
        }
        6 => {
            need(2)?;
            (Leg::Domestic { i: idx[0] }, Leg::Currency { i: idx[1] })
        }
        7 => {
            need(4)?;
            (
                Leg::ForeignAsset { i: idx[0], k: idx[1] },
                Leg::ForeignAsset { i: idx[2], k: idx[3] },
            )
        }
        8 => {
            need(3)?;
            (Leg::ForeignAsset { i: idx[0], k: idx[1] }, Leg::Currency { i: idx[2] })
        }
        9 => {
            need(2)?;
            (Leg::Currency { i: idx[0] }, Leg::Currency { i: idx[1] })
        }
        other => {
            return Err(PricingError::IndexOutOfRange {
                context: format!("special case {other} out of 1..=9"),
            });
        }
    };
    let (long, short, units) = if call { (long, short, units) } else { (short, long, (units.1, units.0)) };
    if t >= u || u > horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("need t < u <= horizon, got t={t}, u={u}, horizon={horizon}"),
        });
    }
    let r2 = spec.r2();
    let n_x = spec.n_x();
    let mut w = vec![DVector::zeros(n_x); horizon - t];
    let mut w_hat = vec![DVector::zeros(n_x); horizon - t];
    let leg_weight = |leg: &Leg, unit: f64| -> Result<(f64, DVector<f64>)> {
        match leg.row(spec)? {
            Some(row) => Ok((unit, r2.row(row).transpose())),
            None => {
                let k = strike.ok_or(PricingError::MissingStrike)?;
                Ok((k, DVector::zeros(n_x)))
            }
        }
    };
    let (w0, row) = leg_weight(&long, units.0)?;
    w[u - t - 1] = row;
    let (w0_hat, row_hat) = leg_weight(&short, units.1)?;
    w_hat[u - t - 1] = row_hat;
    Ok(ExchangeSpec { w0, w0_hat, w, w_hat, maturity: u })
}

/// The measure an expectation is shifted to: one component of the map
/// `A -> E~[(D_u X_u 1_A) (/) (D_t X_t) | H_t]`.
#[derive(Debug, Clone, Copy)]
pub enum MeasureSelector {
    Domestic { i: usize },
    ForeignAsset { i: usize, k: usize },
    Currency { i: usize },
}

impl MeasureSelector {
    fn row(&self, spec: &FxMarketSpec) -> Result<usize> {
        match *self {
            MeasureSelector::Domestic { i } => spec.asset_row_domestic(i),
            MeasureSelector::ForeignAsset { i, k } => spec.asset_row_foreign(i, k),
            MeasureSelector::Currency { i } => spec.asset_row_currency(i),
        }
    }
}

/// Mean of the future block under the selected asset measure:
/// `mu_{2.1} + Psi_22^{-1} Sigma_bar^c (i_{t,u} (x) R~' e)` with `R~' e`
/// placing the selected row of `R_2` on the asset block.
pub fn measure_shift_mean(
    spec: &FxMarketSpec,
    sys: &StackedSystem,
    law: &GaussianLaw,
    t: usize,
    u: usize,
    selector: MeasureSelector,
) -> Result<DVector<f64>> {
    if t >= u || u > sys.horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("need t < u <= horizon, got t={t}, u={u}, horizon={}", sys.horizon),
        });
    }
    let n = sys.dim;
    let row = selector.row(spec)?;
    let r_row = spec.r2().row(row).transpose();
    let rest = (sys.horizon - t) * n;
    // v_m = Sigma_{t+m} R~' e for m = t+1..u, zero afterwards.
    let mut v = DVector::zeros(rest);
    let mut lift = DVector::zeros(n);
    lift.rows_mut(spec.n_z, spec.n_x()).copy_from(&r_row);
    for m in 0..(u - t) {
        let block = &sys.sigma_blocks[t + m] * &lift;
        v.rows_mut(m * n, n).copy_from(&block);
    }
    let psi22 = sys.psi.view((t * n, t * n), (rest, rest)).clone_owned();
    let shift = psi22
        .solve_lower_triangular(&v)
        .expect("unit-diagonal triangular system is always solvable");
    Ok(&law.mean + shift)
}

/// The closed-form pieces of `E~^{i,q}[D^f_{i,u} 1_A | H_t]
/// = D^f_{i,t} exp{a~^{i,q}} N(A; mu~^{i,q}, Sigma_{22.1})`.
#[derive(Debug, Clone)]
pub struct CurrencyTerms {
    /// `a~^{i,q} = -r~^f_{i,t+1} - gamma^{i,f '} mu^{i,q}
    /// + 1/2 gamma^{i,f '} Sigma gamma^{i,f}`.
    pub a_tilde: f64,
    /// `mu~^{i,q} = mu^{i,q} - Sigma gamma^{i,f}`.
    pub mean: DVector<f64>,
}

/// Computes the currency-measure discount terms for country i.
#[allow(clippy::too_many_arguments)]
pub fn currency_discount_terms(
    spec: &FxMarketSpec,
    sys: &StackedSystem,
    law: &GaussianLaw,
    t: usize,
    u: usize,
    i: usize,
    y_t: &DVector<f64>,
) -> Result<CurrencyTerms> {
    let mu_iq = measure_shift_mean(spec, sys, law, t, u, MeasureSelector::Currency { i })?;
    let gamma = rate_path_selector(spec, sys.horizon, t, u, RateLeg::Foreign(i))?;
    let cov_gamma = &law.cov * &gamma;
    let a_tilde = -y_t[i] - gamma.dot(&mu_iq) + 0.5 * gamma.dot(&cov_gamma);
    Ok(CurrencyTerms { a_tilde, mean: mu_iq - cov_gamma })
}

/// `E~^{i,q}[D^f_{i,u} 1_A | H_t] / D^f_{i,t}` with the event probability
/// estimated by Gaussian Monte Carlo under `N(mu~^{i,q}, Sigma_{22.1})`.
#[allow(clippy::too_many_arguments)]
pub fn currency_discount_expectation<F>(
    spec: &FxMarketSpec,
    sys: &StackedSystem,
    law: &GaussianLaw,
    t: usize,
    u: usize,
    i: usize,
    y_t: &DVector<f64>,
    event: F,
    samples: usize,
    seed: u64,
) -> Result<Estimate>
where
    F: Fn(&DVector<f64>) -> bool,
{
    let terms = currency_discount_terms(spec, sys, law, t, u, i, y_t)?;
    let chol = spd_cholesky(&law.cov, "currency measure covariance")?;
    let dim = terms.mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &terms.mean + chol.l() * z;
        if event(&y) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let scale = terms.a_tilde.exp();
    let se = scale * (p * (1.0 - p) / samples as f64).sqrt();
    Ok(Estimate { value: scale * p, std_error: se })
}

/// Weight table of the general call: per maturity `u = t+1..T`, weights on
/// domestic assets, foreign assets (flattened country by country), and
/// currencies.
#[derive(Debug, Clone)]
pub struct GeneralCallWeights {
    pub w_d: Vec<DVector<f64>>,
    pub w_f: Vec<DVector<f64>>,
    pub w_q: Vec<DVector<f64>>,
}

impl GeneralCallWeights {
    fn check(&self, spec: &FxMarketSpec, periods: usize) -> Result<()> {
        let ok = |v: &[DVector<f64>], len: usize| {
            v.len() == periods && v.iter().all(|w| w.len() == len)
        };
        if !ok(&self.w_d, spec.n_d) || !ok(&self.w_f, spec.n_f()) || !ok(&self.w_q, spec.n_q()) {
            return Err(PricingError::ShapeMismatch {
                context: format!(
                    "general call weights must be {periods} rows of lengths {}, {}, {}",
                    spec.n_d,
                    spec.n_f(),
                    spec.n_q()
                ),
            });
        }
        Ok(())
    }
}

/// Monte Carlo budget for the event-probability estimation.
#[derive(Debug, Clone, Copy)]
pub struct McOpts {
    pub samples: usize,
    pub seed: u64,
}

/// Price at t of the general European call with discounted payoff
/// `[sum_u D_u (w^d x^d + w^f x^f x^q + w^q x^q) - D_v K]^+`, divided by
/// `D_t^d`. The per-measure event probabilities are estimated with one shared
/// set of standard-normal draws (common random numbers), aggregated per
/// sample so the reported standard error reflects the full mixture.
#[allow(clippy::too_many_arguments)]
pub fn price_general_call(
    model: &ValidatedModel,
    spec: &FxMarketSpec,
    weights: &GeneralCallWeights,
    strike: f64,
    v: usize,
    t: usize,
    horizon: usize,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
    mc: McOpts,
) -> Result<Estimate> {
    spec.check(model)?;
    weights.check(spec, horizon - t)?;
    if v < t || v > horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!("strike time v={v} outside {t}..={horizon}"),
        });
    }
    if mc.samples < 2 {
        return Err(PricingError::McBudgetExceeded {
            context: format!("need at least 2 samples, got {}", mc.samples),
        });
    }
    let n = model.dim();
    let (n_z, n_d, n_f, n_q) = (spec.n_z, spec.n_d, spec.n_f(), spec.n_q());
    let y_t = y_current(state, observed, n, t);
    let r1 = y_t[0];
    let rest = (horizon - t) * n;

    // One shared set of standard normal draws for every measure shift.
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let z: Vec<DVector<f64>> = (0..mc.samples)
        .map(|_| DVector::from_fn(rest, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();

    // Per-maturity domestic rate selectors, reused by the event test.
    let gammas: Vec<DVector<f64>> = (t + 1..=horizon)
        .map(|u| rate_path_selector(spec, horizon, t, u, RateLeg::Domestic))
        .collect::<Result<_>>()?;

    // Event A: discounted basket value (relative to D_t^d) meets the
    // discounted strike.
    let event = |ybar: &DVector<f64>| -> bool {
        let mut lhs = 0.0;
        for u in t + 1..=horizon {
            let ui = u - t - 1;
            let disc = (-r1 - gammas[ui].dot(ybar)).exp();
            let yu = ybar.rows(ui * n, n);
            let mut basket = 0.0;
            for i in 0..n_d {
                let w = weights.w_d[ui][i];
                if w != 0.0 {
                    basket += w * yu[n_z + i].exp();
                }
            }
            let mut pos = 0;
            for country in 0..n_q {
                for _ in 0..spec.n_f_per[country] {
                    let w = weights.w_f[ui][pos];
                    if w != 0.0 {
                        basket += w * (yu[n_z + n_d + pos] + yu[n_z + n_d + n_f + country]).exp();
                    }
                    pos += 1;
                }
            }
            for i in 0..n_q {
                let w = weights.w_q[ui][i];
                if w != 0.0 {
                    basket += w * yu[n_z + n_d + n_f + i].exp();
                }
            }
            lhs += disc * basket;
        }
        let rhs = if v == t {
            strike
        } else {
            strike * (-r1 - gammas[v - t - 1].dot(ybar)).exp()
        };
        lhs >= rhs
    };

    let prefixes = prefix_weights(
        model,
        state,
        observed,
        conditioning,
        |p| fx_deltas_for_path(model, spec, p),
        cap,
    )?;
    // Per-sample aggregate over all paths and measure terms.
    let mut per_sample = vec![0.0f64; mc.samples];
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cap)?;
        for (future, w_future) in &futures.entries {
            let w_path = w_prefix * w_future;
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let deltas = fx_deltas_for_path(model, spec, &path)?;
            let sys = build_stacked(model, &path, &deltas, state)?;
            let law = sys.law_conditional_future(t, observed)?;
            let chol = spd_cholesky(&law.cov, "general call covariance")?;

            // (coefficient, shifted mean) per measure term.
            let mut terms: Vec<(f64, DVector<f64>)> = Vec::new();
            for u in t + 1..=horizon {
                let ui = u - t - 1;
                for i in 1..=n_d {
                    let w = weights.w_d[ui][i - 1];
                    if w != 0.0 {
                        let mean = measure_shift_mean(
                            spec, &sys, &law, t, u, MeasureSelector::Domestic { i },
                        )?;
                        terms.push((w * y_t[n_z + i - 1].exp(), mean));
                    }
                }
                let mut pos = 0;
                for country in 1..=n_q {
                    for k in 1..=spec.n_f_per[country - 1] {
                        let w = weights.w_f[ui][pos];
                        if w != 0.0 {
                            let mean = measure_shift_mean(
                                spec,
                                &sys,
                                &law,
                                t,
                                u,
                                MeasureSelector::ForeignAsset { i: country, k },
                            )?;
                            let coef = w
                                * (y_t[n_z + n_d + pos] + y_t[n_z + n_d + n_f + country - 1])
                                    .exp();
                            terms.push((coef, mean));
                        }
                        pos += 1;
                    }
                }
                for i in 1..=n_q {
                    let w = weights.w_q[ui][i - 1];
                    if w != 0.0 {
                        let ct = currency_discount_terms(spec, &sys, &law, t, u, i, &y_t)?;
                        let coef = w * y_t[n_z + n_d + n_f + i - 1].exp() * ct.a_tilde.exp();
                        terms.push((coef, ct.mean));
                    }
                }
            }
            if strike != 0.0 {
                if v == t {
                    terms.push((-strike, law.mean.clone()));
                } else {
                    let gamma_v = &gammas[v - t - 1];
                    let a = bond_exponent(&law, gamma_v, r1);
                    terms.push((-strike * a.exp(), forward_measure_mean(&law, gamma_v)));
                }
            }

            for (s, zs) in z.iter().enumerate() {
                let noise = chol.l() * zs;
                let mut val = 0.0;
                for (coef, mean) in &terms {
                    if event(&(mean + &noise)) {
                        val += coef;
                    }
                }
                per_sample[s] += w_path * val;
            }
        }
    }
    let mean = per_sample.iter().sum::<f64>() / mc.samples as f64;
    let var = per_sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / mc.samples as f64;
    Ok(Estimate { value: mean, std_error: (var / mc.samples as f64).sqrt() })
}
