//! JSON model-file schema and conversion into the core types.
//!
//! The file carries the process (`dims`, `regimes`, `transition`,
//! `initial_dist`), the market layout (`market`), and the initial state
//! (`state`). Unknown keys are rejected so that typos surface as parse
//! errors rather than silently ignored fields; semantic problems are
//! reported with the JSON path of the offending field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use msvar_pricing::lognormal::FxMarketSpec;
use msvar_pricing::model::{CovarianceSpec, MsVarModel, PathState, ValidatedModel};
use msvar_pricing::normal::NormalMarketSpec;
use msvar_pricing::term::HjmLayout;
use msvar_pricing::PricingError;

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dims: Dims,
    pub regimes: Vec<RegimeFile>,
    pub transition: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub market: MarketFile,
    pub state: StateFile,
}

#[derive(Debug, Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Process dimension.
    pub n: usize,
    /// Autoregressive order.
    pub p: usize,
    /// Exogenous dimension (leading component is the constant 1).
    pub k: usize,
    /// Number of regimes.
    #[serde(rename = "N")]
    pub n_regimes: usize,
    /// Pricing horizon.
    #[serde(rename = "T")]
    pub horizon: usize,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct RegimeFile {
    /// n x (k + n p) coefficient matrix [A_0 : A_1 : ... : A_p].
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub cov: CovFile,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovFile {
    /// One SPD matrix for this regime.
    Constant { sigma: Vec<Vec<f64>> },
    /// vech-GARCH(0, q*) coefficients for this regime; `initial_sigmas`
    /// (shared, oldest first) must be given on every regime identically.
    VechGarch {
        b0: Vec<f64>,
        b: Vec<Vec<Vec<f64>>>,
        initial_sigmas: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketFile {
    /// `n_z` economic variables, the rest asset prices, constant rate.
    Normal { n_z: usize, rate: f64 },
    /// Domestic-foreign lognormal market.
    Fx { n_z: usize, n_d: usize, n_f_per: Vec<usize> },
    /// HJM term structure on the first T components.
    Hjm,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    /// y_0, y_{-1}, ..., y_{1-p} (most recent first).
    pub y0: Vec<Vec<f64>>,
    /// psi_1..psi_T; omitted means the constant vector (1, 0, ..., 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<Vec<f64>>>,
    /// Realized y_1..y_t, when pricing mid-horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<Vec<Vec<f64>>>,
}

/// Parameter draws sharing the base file's dims, market, and state.
#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct DrawFile {
    pub draws: Vec<DrawEntry>,
}

#[derive(Debug, Serialize, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct DrawEntry {
    pub regimes: Vec<RegimeFile>,
    pub transition: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    #[serde(default)]
    pub weight: Option<f64>,
}

/// A loaded model ready for pricing.
#[derive(Debug)]
pub struct Loaded {
    pub model: ValidatedModel,
    pub market: Market,
    pub state: PathState,
    /// y_1..y_t stacked (possibly empty).
    pub observed: DVector<f64>,
    pub horizon: usize,
}

#[derive(Debug)]
pub enum Market {
    Normal(NormalMarketSpec),
    Fx(FxMarketSpec),
    Hjm(HjmLayout),
}

fn matrix_at(rows: &[Vec<f64>], nrows: usize, ncols: usize, path: &str) -> Result<DMatrix<f64>, PricingError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(PricingError::ShapeMismatch {
            context: format!("{path}: expected a {nrows}x{ncols} matrix"),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector_at(v: &[f64], len: usize, path: &str) -> Result<DVector<f64>, PricingError> {
    if v.len() != len {
        return Err(PricingError::ShapeMismatch {
            context: format!("{path}: expected length {len}, got {}", v.len()),
        });
    }
    Ok(DVector::from_row_slice(v))
}

fn build_cov_spec(dims: &Dims, regimes: &[RegimeFile]) -> Result<CovarianceSpec, PricingError> {
    let n = dims.n;
    let vech_len = n * (n + 1) / 2;
    let all_constant = regimes.iter().all(|r| matches!(r.cov, CovFile::Constant { .. }));
    let all_garch = regimes.iter().all(|r| matches!(r.cov, CovFile::VechGarch { .. }));
    if all_constant {
        let sigmas = regimes
            .iter()
            .enumerate()
            .map(|(j, r)| match &r.cov {
                CovFile::Constant { sigma } => {
                    matrix_at(sigma, n, n, &format!("regimes[{j}].cov.sigma"))
                }
                _ => unreachable!(),
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(CovarianceSpec::ConstantPerRegime(sigmas));
    }
    if !all_garch {
        return Err(PricingError::InvalidModel {
            context: "regimes[*].cov: all regimes must share one covariance kind".into(),
        });
    }
    let mut b0 = Vec::new();
    let mut b = Vec::new();
    let mut initial: Option<Vec<DMatrix<f64>>> = None;
    let mut q_star = 0;
    for (j, r) in regimes.iter().enumerate() {
        let CovFile::VechGarch { b0: b0_j, b: b_j, initial_sigmas } = &r.cov else {
            unreachable!()
        };
        b0.push(vector_at(b0_j, vech_len, &format!("regimes[{j}].cov.b0"))?);
        if j == 0 {
            q_star = b_j.len();
        } else if b_j.len() != q_star {
            return Err(PricingError::ShapeMismatch {
                context: format!("regimes[{j}].cov.b: expected {q_star} lag matrices"),
            });
        }
        b.push(
            b_j.iter()
                .enumerate()
                .map(|(l, m)| {
                    matrix_at(m, vech_len, vech_len, &format!("regimes[{j}].cov.b[{l}]"))
                })
                .collect::<Result<Vec<_>, _>>()?,
        );
        let init = initial_sigmas
            .iter()
            .enumerate()
            .map(|(l, m)| {
                matrix_at(m, n, n, &format!("regimes[{j}].cov.initial_sigmas[{l}]"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match &initial {
            None => initial = Some(init),
            Some(prev) => {
                if prev.len() != init.len()
                    || prev.iter().zip(&init).any(|(a, b)| a != b)
                {
                    return Err(PricingError::InvalidModel {
                        context: format!(
                            "regimes[{j}].cov.initial_sigmas: must match regime 0 (the pre-sample covariances are shared)"
                        ),
                    });
                }
            }
        }
    }
    Ok(CovarianceSpec::VechGarch {
        q_star,
        b0,
        b,
        initial_sigmas: initial.unwrap_or_default(),
    })
}

impl ModelFile {
    /// Converts and validates, naming the JSON path of any offending field.
    pub fn into_loaded(&self) -> Result<Loaded, PricingError> {
        let d = &self.dims;
        let (n, p, k) = (d.n, d.p, d.k);
        let coeff = self
            .regimes
            .iter()
            .enumerate()
            .map(|(j, r)| matrix_at(&r.a, n, k + n * p, &format!("regimes[{j}].A")))
            .collect::<Result<Vec<_>, _>>()?;
        if coeff.len() != d.n_regimes {
            return Err(PricingError::ShapeMismatch {
                context: format!("regimes: expected {} entries, got {}", d.n_regimes, coeff.len()),
            });
        }
        let transition = matrix_at(&self.transition, d.n_regimes, d.n_regimes, "transition")?;
        let initial_dist = vector_at(&self.initial_dist, d.n_regimes, "initial_dist")?;
        let cov_spec = build_cov_spec(d, &self.regimes)?;
        let model = MsVarModel {
            n_regimes: d.n_regimes,
            lag_order: p,
            dim: n,
            exo_dim: k,
            coeff,
            transition,
            initial_dist,
            cov_spec,
        }
        .validate()
        .map_err(annotate_validation)?;

        let market = match &self.market {
            MarketFile::Normal { n_z, rate } => {
                let spec = NormalMarketSpec { n_z: *n_z, rate: *rate };
                spec.check(&model).map_err(|e| prefix_context("market", e))?;
                Market::Normal(spec)
            }
            MarketFile::Fx { n_z, n_d, n_f_per } => {
                let spec = FxMarketSpec { n_z: *n_z, n_d: *n_d, n_f_per: n_f_per.clone() };
                spec.check(&model).map_err(|e| prefix_context("market", e))?;
                Market::Fx(spec)
            }
            MarketFile::Hjm => {
                let layout = HjmLayout { horizon: d.horizon };
                layout.check(&model).map_err(|e| prefix_context("market", e))?;
                Market::Hjm(layout)
            }
        };

        if self.state.y0.len() != p {
            return Err(PricingError::ShapeMismatch {
                context: format!("state.y0: expected {p} lag vectors (most recent first)"),
            });
        }
        let initial = self
            .state
            .y0
            .iter()
            .enumerate()
            .map(|(j, v)| vector_at(v, n, &format!("state.y0[{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut state = PathState::constant_exo(initial, k, d.horizon);
        if let Some(psi) = &self.state.psi {
            if psi.len() != d.horizon {
                return Err(PricingError::ShapeMismatch {
                    context: format!("state.psi: expected {} vectors", d.horizon),
                });
            }
            state.exo = psi
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let out = vector_at(v, k, &format!("state.psi[{j}]"))?;
                    if out[0] != 1.0 {
                        return Err(PricingError::InvalidModel {
                            context: format!("state.psi[{j}]: leading component must be 1"),
                        });
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>, _>>()?;
        }
        let mut observed = Vec::new();
        if let Some(rows) = &self.state.observed {
            if rows.len() >= d.horizon {
                return Err(PricingError::ShapeMismatch {
                    context: format!(
                        "state.observed: {} rows leave nothing to price over horizon {}",
                        rows.len(),
                        d.horizon
                    ),
                });
            }
            for (j, row) in rows.iter().enumerate() {
                let v = vector_at(row, n, &format!("state.observed[{j}]"))?;
                observed.extend(v.iter().copied());
                state.push_observed(v);
            }
        }
        Ok(Loaded {
            model,
            market,
            state,
            observed: DVector::from_row_slice(&observed),
            horizon: d.horizon,
        })
    }

    /// The file with one draw's parameters substituted in.
    pub fn with_draw(&self, draw: &DrawEntry) -> ModelFile {
        let mut out = self.clone();
        out.regimes = draw.regimes.clone();
        out.transition = draw.transition.clone();
        out.initial_dist = draw.initial_dist.clone();
        out
    }
}

/// Maps core validation errors to JSON field paths where one exists.
fn annotate_validation(e: PricingError) -> PricingError {
    match e {
        PricingError::NonStochasticTransition { row, sum } => PricingError::InvalidModel {
            context: format!("transition[{row}]: row sums to {sum}, expected 1"),
        },
        other => other,
    }
}

fn prefix_context(path: &str, e: PricingError) -> PricingError {
    match e {
        PricingError::InvalidModel { context } => {
            PricingError::InvalidModel { context: format!("{path}: {context}") }
        }
        PricingError::ShapeMismatch { context } => {
            PricingError::ShapeMismatch { context: format!("{path}: {context}") }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(name: &str) -> String {
        let path = format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn desk_models_load() {
        for name in ["desk_normal.json", "desk_fx.json", "desk_hjm.json"] {
            let file: ModelFile = serde_json::from_str(&desk(name)).unwrap();
            let loaded = file.into_loaded().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(loaded.horizon, 5);
            assert_eq!(loaded.model.n_regimes(), 2);
        }
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        for name in ["desk_normal.json", "desk_fx.json", "desk_hjm.json"] {
            let a: ModelFile = serde_json::from_str(&desk(name)).unwrap();
            let s = serde_json::to_string(&a).unwrap();
            let b: ModelFile = serde_json::from_str(&s).unwrap();
            assert_eq!(s, serde_json::to_string(&b).unwrap(), "{name}");
            b.into_loaded().unwrap();
        }
    }

    #[test]
    fn bad_transition_names_the_row() {
        let mut doc: serde_json::Value = serde_json::from_str(&desk("desk_normal.json")).unwrap();
        doc["transition"][0][0] = serde_json::json!(0.8); // row sums to 0.9
        let file: ModelFile = serde_json::from_value(doc).unwrap();
        let err = file.into_loaded().unwrap_err().to_string();
        assert!(err.contains("transition[0]"), "{err}");
    }

    #[test]
    fn wrong_shape_names_the_field() {
        let mut doc: serde_json::Value = serde_json::from_str(&desk("desk_normal.json")).unwrap();
        doc["regimes"][1]["A"] = serde_json::json!([[0.0, 0.0]]);
        let file: ModelFile = serde_json::from_value(doc).unwrap();
        let err = file.into_loaded().unwrap_err().to_string();
        assert!(err.contains("regimes[1].A"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut doc: serde_json::Value = serde_json::from_str(&desk("desk_normal.json")).unwrap();
        doc["typo_key"] = serde_json::json!(1);
        let err = serde_json::from_value::<ModelFile>(doc).unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn observed_prefix_shifts_the_clock() {
        let mut doc: serde_json::Value = serde_json::from_str(&desk("desk_normal.json")).unwrap();
        doc["state"]["observed"] = serde_json::json!([[0.1, 10.2, 5.1]]);
        let file: ModelFile = serde_json::from_value(doc).unwrap();
        let loaded = file.into_loaded().unwrap();
        assert_eq!(loaded.state.observed.len(), 1);
        assert_eq!(loaded.observed.len(), 3);
        assert_eq!(loaded.observed[1], 10.2);
    }
}
