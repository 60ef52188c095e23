//! Pricing in the conditionally normal market: Black-Scholes style call/put
//! options on an arithmetically weighted price of the asset block, discounted
//! at a constant per-period rate, mixed over regime paths.

use nalgebra::DVector;

use crate::girsanov::{normal_kernel_deltas, KernelDeltas};
use crate::linalg::{norm_cdf, norm_pdf};
use crate::mixture::{future_path_weights, prefix_weights, Conditioning};
use crate::model::{PathState, RegimePath, ValidatedModel};
use crate::stacked::build_stacked;
use crate::{PricingError, Result};

/// The normal market: `n_z` economic variables followed by `n_x` asset
/// prices, discounted at the constant rate `r`.
#[derive(Debug, Clone, Copy)]
pub struct NormalMarketSpec {
    pub n_z: usize,
    pub rate: f64,
}

impl NormalMarketSpec {
    pub fn check(&self, model: &ValidatedModel) -> Result<()> {
        if self.n_z >= model.dim() {
            return Err(PricingError::InvalidModel {
                context: format!("n_z={} leaves no asset block in n={}", self.n_z, model.dim()),
            });
        }
        if self.rate <= -1.0 {
            return Err(PricingError::InvalidModel {
                context: format!("rate {} must exceed -1", self.rate),
            });
        }
        Ok(())
    }

    pub fn n_assets(&self, model: &ValidatedModel) -> usize {
        model.dim() - self.n_z
    }
}

/// Per-period weights on the asset block defining the arithmetic weighted
/// price `x_bar = sum_t w_t' x_t`.
#[derive(Debug, Clone)]
pub struct WeightScheme {
    pub weights: Vec<DVector<f64>>,
}

/// Catalogued weight choices.
#[derive(Debug, Clone)]
pub enum WeightKind {
    /// Only `w_T = e_i` (1-based asset index).
    European { asset: usize },
    /// `w_t = e_i / T` for every period.
    Asian { asset: usize },
    /// Only `w_T = v`.
    Basket { weights: DVector<f64> },
}

pub fn arithmetic_weight_builder(
    kind: &WeightKind,
    n_x: usize,
    horizon: usize,
) -> Result<WeightScheme> {
    let unit = |asset: usize| -> Result<DVector<f64>> {
        if asset == 0 || asset > n_x {
            return Err(PricingError::IndexOutOfRange {
                context: format!("asset index {asset} out of 1..={n_x}"),
            });
        }
        let mut e = DVector::zeros(n_x);
        e[asset - 1] = 1.0;
        Ok(e)
    };
    let mut weights = vec![DVector::zeros(n_x); horizon];
    match kind {
        WeightKind::European { asset } => {
            weights[horizon - 1] = unit(*asset)?;
        }
        WeightKind::Asian { asset } => {
            let w = unit(*asset)? / horizon as f64;
            weights = vec![w; horizon];
        }
        WeightKind::Basket { weights: v } => {
            if v.len() != n_x {
                return Err(PricingError::ShapeMismatch {
                    context: format!("basket weights length {} != n_x={n_x}", v.len()),
                });
            }
            weights[horizon - 1] = v.clone();
        }
    }
    Ok(WeightScheme { weights })
}

/// Delta representations of the normal kernel along a regime path.
pub fn normal_deltas_for_path(
    model: &ValidatedModel,
    spec: &NormalMarketSpec,
    path: &RegimePath,
) -> Result<Vec<KernelDeltas>> {
    let sigmas = model.covariance_path(path)?;
    (1..=path.horizon())
        .map(|t| {
            normal_kernel_deltas(model, spec.n_z, spec.rate, path.0[t - 1], &sigmas[t - 1], t)
        })
        .collect()
}

/// Mean and variance of the arithmetic weighted price given the realized
/// prefix `y_{1..t}` and a fixed regime path.
pub fn weighted_price_law(
    model: &ValidatedModel,
    spec: &NormalMarketSpec,
    scheme: &WeightScheme,
    path: &RegimePath,
    state: &PathState,
    t: usize,
    observed: &DVector<f64>,
) -> Result<(f64, f64)> {
    spec.check(model)?;
    let horizon = path.horizon();
    let n = model.dim();
    let n_x = spec.n_assets(model);
    if scheme.weights.len() != horizon || scheme.weights.iter().any(|w| w.len() != n_x) {
        return Err(PricingError::ShapeMismatch {
            context: format!("weight scheme must have {horizon} vectors of length {n_x}"),
        });
    }
    let deltas = normal_deltas_for_path(model, spec, path)?;
    let sys = build_stacked(model, path, &deltas, state)?;
    let cond = sys.law_conditional_future(t, observed)?;

    let mut realized = 0.0;
    for m in 0..t {
        for i in 0..n_x {
            realized += scheme.weights[m][i] * observed[m * n + spec.n_z + i];
        }
    }
    let mut v = DVector::zeros(n * (horizon - t));
    for m in t..horizon {
        for i in 0..n_x {
            v[(m - t) * n + spec.n_z + i] = scheme.weights[m][i];
        }
    }
    let mu = realized + v.dot(&cond.mean);
    let var = v.dot(&(&cond.cov * &v)).max(0.0);
    Ok((mu, var))
}

/// `E[(X - K)^+]` for `X ~ N(mu, sigma^2)`.
pub fn truncated_call(mu: f64, sigma: f64, k: f64) -> f64 {
    if sigma <= 0.0 {
        return (mu - k).max(0.0);
    }
    let d = (mu - k) / sigma;
    sigma * (norm_pdf(d) + d * norm_cdf(d))
}

/// `E[(K - X)^+]` for `X ~ N(mu, sigma^2)`.
pub fn truncated_put(mu: f64, sigma: f64, k: f64) -> f64 {
    if sigma <= 0.0 {
        return (k - mu).max(0.0);
    }
    let d = (k - mu) / sigma;
    sigma * (norm_pdf(d) + d * norm_cdf(d))
}

/// Call (`true`) or put price of the weighted-price option at time t, mixing
/// over regime prefixes (per `conditioning`) and enumerated future paths.
#[allow(clippy::too_many_arguments)]
pub fn price_normal_option(
    model: &ValidatedModel,
    spec: &NormalMarketSpec,
    scheme: &WeightScheme,
    strike: f64,
    call: bool,
    state: &PathState,
    observed: &DVector<f64>,
    conditioning: &Conditioning,
    cap: u128,
) -> Result<f64> {
    spec.check(model)?;
    let horizon = scheme.weights.len();
    let n = model.dim();
    let t = observed.len() / n;
    if observed.len() % n != 0 || t >= horizon {
        return Err(PricingError::IndexOutOfRange {
            context: format!(
                "observed covers {t} periods; need 0 <= t < horizon {horizon}"
            ),
        });
    }
    let prefixes = prefix_weights(
        model,
        state,
        observed,
        conditioning,
        |p| normal_deltas_for_path(model, spec, p),
        cap,
    )?;
    let disc = (1.0 + spec.rate).powi(-((horizon - t) as i32));
    let mut price = 0.0;
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cap)?;
        for (future, w_future) in &futures.entries {
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let (mu, var) = weighted_price_law(model, spec, scheme, &path, state, t, observed)?;
            let sigma = var.sqrt();
            let term = if call {
                truncated_call(mu, sigma, strike)
            } else {
                truncated_put(mu, sigma, strike)
            };
            price += w_prefix * w_future * disc * term;
        }
    }
    Ok(price)
}
