//! Command-line pricer for the Markov-switching VAR engine.
//!
//! `msvar` loads a JSON model file (process, market layout, state), then
//! prices contracts, prints zero-coupon curves, simulates trajectories under
//! the real or risk-neutral measure, or reports the Girsanov kernel. All
//! output is deterministic given the file, the flags, and the seed.
//!
//! Exit codes: 0 success, 2 usage error, 3 model/validation error,
//! 4 numerical failure. With `--output json`, errors are also written to
//! stderr as a machine-readable JSON document.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use msvar_cli::file::{DrawFile, Loaded, Market, ModelFile};
use msvar_pricing::girsanov::{
    entropy_kernel, entropy_objective, variance_kernel, variance_objective, KernelConstraint,
    KernelDeltas, KernelOpts,
};
use msvar_pricing::lognormal::{
    fx_deltas_for_path, price_exchange_option, price_general_call, special_case_weights,
    zcb_domestic, zcb_foreign, GeneralCallWeights, McOpts,
};
use msvar_pricing::mixture::{
    future_path_weights, prefix_weights, rao_blackwell_price, Conditioning, ParameterDraw,
};
use msvar_pricing::model::{RegimePath, ValidatedModel};
use msvar_pricing::normal::{
    arithmetic_weight_builder, normal_deltas_for_path, price_normal_option, WeightKind,
};
use msvar_pricing::oracle::mc_price;
use msvar_pricing::term::{
    hjm_constraints, hjm_deltas, hjm_zcb, price_forward_caplet, price_libor_caplet,
    price_zcb_option,
};
use msvar_pricing::PricingError;
use msvar_cli::output::{self, Cell, Format, Table};

#[derive(Parser)]
#[command(
    name = "msvar",
    version,
    about = "Derivative pricing under a Bayesian Markov-switching VAR"
)]
struct Cli {
    /// JSON model file (required by every subcommand).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// JSON file of posterior parameter draws (price commands only).
    #[arg(long, global = true)]
    draws: Option<PathBuf>,
    /// Regime-prefix conditioning: "filtered" or comma-separated regimes.
    #[arg(long, global = true, default_value = "filtered")]
    condition: String,
    /// Monte Carlo path budget where sampling is needed.
    #[arg(long, global = true, default_value_t = 100_000)]
    mc_paths: usize,
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = OutputArg::Table)]
    output: OutputArg,
    /// Cap on enumerated regime paths.
    #[arg(long, global = true, default_value_t = 1_048_576)]
    path_cap: u128,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputArg {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptType {
    Call,
    Put,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Measure {
    Real,
    Q,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Objective {
    Entropy,
    Variance,
}

#[derive(Subcommand)]
enum Command {
    /// Price a contract on the loaded model.
    Price {
        #[command(subcommand)]
        contract: PriceCommand,
    },
    /// Print a term-structure curve.
    Curve {
        #[command(subcommand)]
        curve: CurveCommand,
    },
    /// Simulate trajectories of the process.
    Simulate {
        #[arg(long, value_enum)]
        measure: Measure,
        #[arg(long, default_value_t = 1)]
        paths: usize,
    },
    /// Report the Girsanov kernel along a regime path.
    Kernel {
        #[arg(long, value_enum, default_value_t = Objective::Entropy)]
        objective: Objective,
        /// Comma-separated regime path s_1..s_T; defaults to the greedy
        /// most-likely chain.
        #[arg(long)]
        regime_path: Option<String>,
    },
}

#[derive(Subcommand)]
enum PriceCommand {
    /// Weighted-price option on the conditionally normal market.
    Normal {
        /// "european:i", "asian:i", or "basket:w1,w2,..." (1-based asset i).
        #[arg(long)]
        weights: String,
        #[arg(long)]
        strike: f64,
        #[arg(long = "type", value_enum, default_value_t = OptType::Call)]
        kind: OptType,
        /// Also print a Monte Carlo cross-check and its delta.
        #[arg(long)]
        validate: bool,
    },
    /// One of the nine Margrabe special cases on the FX market.
    Margrabe {
        #[arg(long)]
        case: usize,
        /// Comma-separated 1-based indices in case order.
        #[arg(long, default_value = "1")]
        idx: String,
        /// Units of the long and short legs.
        #[arg(long, default_value = "1,1")]
        units: String,
        #[arg(long)]
        strike: Option<f64>,
        /// Settlement maturity u; defaults to the horizon T.
        #[arg(long)]
        maturity: Option<usize>,
        #[arg(long = "type", value_enum, default_value_t = OptType::Call)]
        kind: OptType,
    },
    /// General European call from a JSON contract file.
    General {
        #[arg(long)]
        contract: PathBuf,
    },
    /// Forward-rate caplet on the HJM market.
    Caplet(CapletArgs),
    /// Forward-rate floorlet on the HJM market.
    Floorlet(CapletArgs),
    /// LIBOR caplet on the HJM market.
    LiborCaplet(CapletArgs),
    /// LIBOR floorlet on the HJM market.
    LiborFloorlet(CapletArgs),
    /// European option on a zero-coupon bond (HJM market).
    ZcbOption {
        /// Exercise time v.
        #[arg(long)]
        exercise: usize,
        /// Bond maturity u.
        #[arg(long)]
        maturity: usize,
        #[arg(long)]
        strike: f64,
        #[arg(long = "type", value_enum, default_value_t = OptType::Call)]
        kind: OptType,
    },
}

#[derive(clap::Args, Clone, Copy)]
struct CapletArgs {
    /// Fixing time v.
    #[arg(long)]
    fix: usize,
    /// Accrual start u1.
    #[arg(long)]
    start: usize,
    /// Accrual end u2.
    #[arg(long)]
    end: usize,
    #[arg(long)]
    strike: f64,
}

#[derive(Subcommand)]
enum CurveCommand {
    /// Zero-coupon bond prices for maturities in (from, to].
    Zcb {
        /// Curve anchor; must equal the current time t.
        #[arg(long)]
        from: Option<usize>,
        #[arg(long)]
        to: Option<usize>,
        /// "domestic" or "foreign:i" (FX market only).
        #[arg(long, default_value = "domestic")]
        leg: String,
    },
}

/// JSON payload for `price general --contract`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneralContractFile {
    /// Per future period t+1..T: weights on domestic assets.
    w_d: Vec<Vec<f64>>,
    /// Per future period: weights on foreign assets.
    w_f: Vec<Vec<f64>>,
    /// Per future period: weights on currencies.
    w_q: Vec<Vec<f64>>,
    strike: f64,
    /// Strike discounting time v.
    strike_time: usize,
    /// Event-probability sample budget; defaults to --mc-paths.
    #[serde(default)]
    samples: Option<usize>,
}

struct CliError {
    code: i32,
    kind: String,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, kind: "usage".into(), message: message.into() }
    }
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: 3, kind: "validation".into(), message: message.into() }
    }
}

impl From<PricingError> for CliError {
    fn from(e: PricingError) -> Self {
        use PricingError::*;
        let code = match e {
            NonStochasticTransition { .. }
            | NonPositiveDefiniteCovariance { .. }
            | ShapeMismatch { .. }
            | IndexOutOfRange { .. }
            | InvalidModel { .. }
            | InsufficientDraws { .. }
            | MissingStrike => 3,
            _ => 4,
        };
        let kind = if code == 3 { "validation" } else { "numerical" };
        CliError { code, kind: kind.into(), message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = Cli::parse();
    let format = match cli.output {
        OutputArg::Table => Format::Table,
        OutputArg::Csv => Format::Csv,
        OutputArg::Json => Format::Json,
    };
    match run(&cli) {
        Ok(table) => print!("{}", table.render(format)),
        Err(e) => {
            if format == Format::Json {
                eprint!("{}", output::error_json(&e.kind, &e.message, e.code));
            } else {
                eprintln!("error: {}", e.message);
            }
            std::process::exit(e.code);
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: 3,
        kind: "io".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError {
        code: 3,
        kind: "parse".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn run(cli: &Cli) -> CliResult<Table> {
    let model_path = cli
        .model
        .as_ref()
        .ok_or_else(|| CliError::usage("--model <FILE> is required"))?;
    let model_file: ModelFile = read_json(model_path)?;
    let loaded = model_file.into_loaded()?;
    let conditioning = parse_conditioning(&cli.condition, &loaded)?;
    let draws: Option<DrawFile> = match &cli.draws {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    if draws.is_some() && !matches!(cli.command, Command::Price { .. }) {
        return Err(CliError::usage("--draws applies only to price commands"));
    }
    match &cli.command {
        Command::Price { contract } => {
            run_price(cli, &model_file, &loaded, &conditioning, draws.as_ref(), contract)
        }
        Command::Curve { curve } => run_curve(cli, &loaded, &conditioning, curve),
        Command::Simulate { measure, paths } => {
            run_simulate(cli, &loaded, &conditioning, *measure, *paths)
        }
        Command::Kernel { objective, regime_path } => {
            run_kernel(&loaded, &conditioning, *objective, regime_path.as_deref())
        }
    }
}

fn parse_conditioning(raw: &str, loaded: &Loaded) -> CliResult<Conditioning> {
    if raw == "filtered" {
        return Ok(Conditioning::Filtered);
    }
    let t = loaded.state.observed.len();
    if t == 0 && raw.is_empty() {
        return Ok(Conditioning::Known(Vec::new()));
    }
    let prefix: Vec<usize> = raw
        .split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| {
                CliError::usage(format!(
                    "--condition must be \"filtered\" or comma-separated regimes, got {raw:?}"
                ))
            })
        })
        .collect::<CliResult<_>>()?;
    if prefix.len() != t {
        return Err(CliError::validation(format!(
            "--condition lists {} regimes but {t} periods are observed",
            prefix.len()
        )));
    }
    Ok(Conditioning::Known(prefix))
}

fn parse_usize_list(raw: &str, what: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("{what}: expected integers, got {raw:?}")))
        })
        .collect()
}

fn parse_f64_list(raw: &str, what: &str) -> CliResult<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("{what}: expected numbers, got {raw:?}")))
        })
        .collect()
}

/// Zero-delta representations (real-measure prefix likelihood).
fn zero_deltas(model: &ValidatedModel, len: usize) -> Vec<KernelDeltas> {
    let (n, p, k) = (model.dim(), model.lag_order(), model.exo_dim());
    (0..len)
        .map(|_| KernelDeltas {
            d0: DMatrix::zeros(n, k),
            dm: vec![DMatrix::zeros(n, n); p],
        })
        .collect()
}

fn market_deltas(
    loaded: &Loaded,
    path: &RegimePath,
) -> Result<Vec<KernelDeltas>, PricingError> {
    match &loaded.market {
        Market::Normal(spec) => normal_deltas_for_path(&loaded.model, spec, path),
        Market::Fx(spec) => fx_deltas_for_path(&loaded.model, spec, path),
        Market::Hjm(layout) => {
            let t = loaded.state.observed.len();
            if path.horizon() == layout.horizon {
                hjm_deltas(&loaded.model, layout, path, &loaded.state, &loaded.observed, t)
            } else {
                // Prefix filtering uses the real-measure likelihood.
                Ok(zero_deltas(&loaded.model, path.horizon()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// price
// ---------------------------------------------------------------------------

fn run_price(
    cli: &Cli,
    model_file: &ModelFile,
    loaded: &Loaded,
    conditioning: &Conditioning,
    draws: Option<&DrawFile>,
    contract: &PriceCommand,
) -> CliResult<Table> {
    let label = price_label(contract);
    // `price general` carries its own Monte Carlo standard error.
    let single = |l: &Loaded| -> Result<(f64, Option<f64>), PricingError> {
        price_once(cli, l, conditioning, contract)
    };
    let (price, se) = match draws {
        None => single(loaded)?,
        Some(d) => {
            if d.draws.len() < 2 {
                return Err(CliError::from(PricingError::InsufficientDraws {
                    got: d.draws.len(),
                }));
            }
            let mut pdraws = Vec::new();
            let mut loadeds = Vec::new();
            for (j, entry) in d.draws.iter().enumerate() {
                let l = model_file.with_draw(entry).into_loaded().map_err(|e| {
                    CliError::validation(format!("draws[{j}]: {e}"))
                })?;
                let mut pd = ParameterDraw::new(l.model.clone());
                if let Some(w) = entry.weight {
                    pd.weight = w;
                }
                pdraws.push(pd);
                loadeds.push(l);
            }
            let idx = std::cell::Cell::new(0usize);
            let est = rao_blackwell_price(&pdraws, |_| {
                let i = idx.get();
                idx.set(i + 1);
                single(&loadeds[i]).map(|(p, _)| p)
            })?;
            (est.value, Some(est.std_error))
        }
    };

    let mut table = Table::new("price", &["contract", "price", "std_error"]);
    let se_cell = se.map_or(Cell::Empty, Cell::Num);
    table.push(vec![Cell::Text(label.clone()), Cell::Num(price), se_cell]);

    if let PriceCommand::Normal { validate: true, .. } = contract {
        if draws.is_some() {
            return Err(CliError::usage("--validate cannot be combined with --draws"));
        }
        let (mc, mc_se) = validate_normal_mc(cli, loaded, conditioning, contract)?;
        let mut t = Table::new(
            "price",
            &["contract", "price", "std_error", "mc_price", "mc_std_error", "delta"],
        );
        t.push(vec![
            Cell::Text(label),
            Cell::Num(price),
            Cell::Empty,
            Cell::Num(mc),
            Cell::Num(mc_se),
            Cell::Num(price - mc),
        ]);
        return Ok(t);
    }
    Ok(table)
}

fn price_label(contract: &PriceCommand) -> String {
    match contract {
        PriceCommand::Normal { weights, strike, kind, .. } => {
            format!("normal:{weights}:{}:{strike}", kind_str(*kind))
        }
        PriceCommand::Margrabe { case, idx, units, strike, maturity, kind } => {
            let k = strike.map_or("-".to_string(), |s| s.to_string());
            let u = maturity.map_or("T".to_string(), |u| u.to_string());
            format!("margrabe:case{case}:[{idx}]:units[{units}]:{}:{k}:u{u}", kind_str(*kind))
        }
        PriceCommand::General { contract } => format!("general:{}", contract.display()),
        PriceCommand::Caplet(a) => format!("caplet:v{}:u{}-{}:{}", a.fix, a.start, a.end, a.strike),
        PriceCommand::Floorlet(a) => {
            format!("floorlet:v{}:u{}-{}:{}", a.fix, a.start, a.end, a.strike)
        }
        PriceCommand::LiborCaplet(a) => {
            format!("libor-caplet:v{}:u{}-{}:{}", a.fix, a.start, a.end, a.strike)
        }
        PriceCommand::LiborFloorlet(a) => {
            format!("libor-floorlet:v{}:u{}-{}:{}", a.fix, a.start, a.end, a.strike)
        }
        PriceCommand::ZcbOption { exercise, maturity, strike, kind } => {
            format!("zcb-option:v{exercise}:u{maturity}:{}:{strike}", kind_str(*kind))
        }
    }
}

fn kind_str(kind: OptType) -> &'static str {
    match kind {
        OptType::Call => "call",
        OptType::Put => "put",
    }
}

fn parse_weight_spec(raw: &str, n_x: usize, horizon: usize) -> CliResult<msvar_pricing::normal::WeightScheme> {
    let (head, rest) = raw
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("--weights: expected kind:args, got {raw:?}")))?;
    let kind = match head {
        "european" => WeightKind::European {
            asset: rest.parse().map_err(|_| CliError::usage("--weights european:i"))?,
        },
        "asian" => WeightKind::Asian {
            asset: rest.parse().map_err(|_| CliError::usage("--weights asian:i"))?,
        },
        "basket" => WeightKind::Basket {
            weights: DVector::from_row_slice(&parse_f64_list(rest, "--weights basket")?),
        },
        other => {
            return Err(CliError::usage(format!(
                "--weights kind must be european, asian, or basket, got {other:?}"
            )))
        }
    };
    Ok(arithmetic_weight_builder(&kind, n_x, horizon)?)
}

fn price_once(
    cli: &Cli,
    loaded: &Loaded,
    conditioning: &Conditioning,
    contract: &PriceCommand,
) -> Result<(f64, Option<f64>), PricingError> {
    let model = &loaded.model;
    let state = &loaded.state;
    let observed = &loaded.observed;
    let horizon = loaded.horizon;
    let t = state.observed.len();
    let wrong_market = |need: &str| PricingError::InvalidModel {
        context: format!("this contract requires a {need} market (see \"market.kind\")"),
    };
    match contract {
        PriceCommand::Normal { weights, strike, kind, .. } => {
            let Market::Normal(spec) = &loaded.market else {
                return Err(wrong_market("normal"));
            };
            let scheme = parse_weight_spec(weights, spec.n_assets(model), horizon)
                .map_err(|e| PricingError::InvalidModel { context: e.message })?;
            let p = price_normal_option(
                model,
                spec,
                &scheme,
                *strike,
                *kind == OptType::Call,
                state,
                observed,
                conditioning,
                cli.path_cap,
            )?;
            Ok((p, None))
        }
        PriceCommand::Margrabe { case, idx, units, strike, maturity, kind } => {
            let Market::Fx(spec) = &loaded.market else {
                return Err(wrong_market("fx"));
            };
            let idx = parse_usize_list(idx, "--idx")
                .map_err(|e| PricingError::InvalidModel { context: e.message })?;
            let units = parse_f64_list(units, "--units")
                .map_err(|e| PricingError::InvalidModel { context: e.message })?;
            if units.len() != 2 {
                return Err(PricingError::ShapeMismatch {
                    context: "--units takes exactly two numbers".into(),
                });
            }
            let u = maturity.unwrap_or(horizon);
            let ex = special_case_weights(
                spec,
                *case,
                *kind == OptType::Call,
                &idx,
                (units[0], units[1]),
                *strike,
                t,
                horizon,
                u,
            )?;
            let p = price_exchange_option(
                model,
                spec,
                &ex,
                t,
                horizon,
                state,
                observed,
                conditioning,
                cli.path_cap,
            )?;
            Ok((p, None))
        }
        PriceCommand::General { contract } => {
            let Market::Fx(spec) = &loaded.market else {
                return Err(wrong_market("fx"));
            };
            let text = std::fs::read_to_string(contract).map_err(|e| {
                PricingError::InvalidModel { context: format!("{}: {e}", contract.display()) }
            })?;
            let gc: GeneralContractFile = serde_json::from_str(&text).map_err(|e| {
                PricingError::InvalidModel { context: format!("{}: {e}", contract.display()) }
            })?;
            let to_vecs = |rows: &[Vec<f64>]| -> Vec<DVector<f64>> {
                rows.iter().map(|r| DVector::from_row_slice(r)).collect()
            };
            let weights = GeneralCallWeights {
                w_d: to_vecs(&gc.w_d),
                w_f: to_vecs(&gc.w_f),
                w_q: to_vecs(&gc.w_q),
            };
            let est = price_general_call(
                model,
                spec,
                &weights,
                gc.strike,
                gc.strike_time,
                t,
                horizon,
                state,
                observed,
                conditioning,
                cli.path_cap,
                McOpts { samples: gc.samples.unwrap_or(cli.mc_paths), seed: cli.seed },
            )?;
            Ok((est.value, Some(est.std_error)))
        }
        PriceCommand::Caplet(a) | PriceCommand::Floorlet(a) => {
            let Market::Hjm(layout) = &loaded.market else {
                return Err(wrong_market("hjm"));
            };
            let call = matches!(contract, PriceCommand::Caplet(_));
            let p = price_forward_caplet(
                model, layout, t, a.fix, a.start, a.end, a.strike, call, state, observed,
                conditioning, cli.path_cap,
            )?;
            Ok((p, None))
        }
        PriceCommand::LiborCaplet(a) | PriceCommand::LiborFloorlet(a) => {
            let Market::Hjm(layout) = &loaded.market else {
                return Err(wrong_market("hjm"));
            };
            let call = matches!(contract, PriceCommand::LiborCaplet(_));
            let p = price_libor_caplet(
                model, layout, t, a.fix, a.start, a.end, a.strike, call, state, observed,
                conditioning, cli.path_cap,
            )?;
            Ok((p, None))
        }
        PriceCommand::ZcbOption { exercise, maturity, strike, kind } => {
            let Market::Hjm(layout) = &loaded.market else {
                return Err(wrong_market("hjm"));
            };
            let p = price_zcb_option(
                model,
                layout,
                t,
                *exercise,
                *maturity,
                *strike,
                *kind == OptType::Call,
                state,
                observed,
                conditioning,
                cli.path_cap,
            )?;
            Ok((p, None))
        }
    }
}

/// Monte Carlo cross-check of `price normal`, mixing path-level estimates.
fn validate_normal_mc(
    cli: &Cli,
    loaded: &Loaded,
    conditioning: &Conditioning,
    contract: &PriceCommand,
) -> CliResult<(f64, f64)> {
    let PriceCommand::Normal { weights, strike, kind, .. } = contract else {
        unreachable!()
    };
    let Market::Normal(spec) = &loaded.market else {
        return Err(CliError::validation("--validate requires a normal market"));
    };
    let model = &loaded.model;
    let n_z = spec.n_z;
    let horizon = loaded.horizon;
    let t = loaded.state.observed.len();
    let scheme = parse_weight_spec(weights, spec.n_assets(model), horizon)?;
    let call = *kind == OptType::Call;
    let disc = (1.0 + spec.rate).powi(-((horizon - t) as i32));
    let prefixes = prefix_weights(
        model,
        &loaded.state,
        &loaded.observed,
        conditioning,
        |p| normal_deltas_for_path(model, spec, p),
        cli.path_cap,
    )?;
    let mut value = 0.0;
    let mut var = 0.0;
    for (prefix, w_prefix) in &prefixes.entries {
        let futures = future_path_weights(model, &prefix.0, horizon, cli.path_cap)?;
        for (future, w_future) in &futures.entries {
            let mut full = prefix.0.clone();
            full.extend_from_slice(&future.0);
            let path = RegimePath(full);
            let deltas = normal_deltas_for_path(model, spec, &path)?;
            let w = w_prefix * w_future;
            let est = mc_price(
                model,
                &path,
                &deltas,
                &loaded.state,
                |traj| {
                    let mut x_bar = 0.0;
                    for (m, wv) in scheme.weights.iter().enumerate() {
                        for (a, wa) in wv.iter().enumerate() {
                            x_bar += wa * traj[m][n_z + a];
                        }
                    }
                    let intrinsic =
                        if call { x_bar - strike } else { strike - x_bar };
                    disc * intrinsic.max(0.0)
                },
                cli.mc_paths,
                cli.seed,
                true,
            )?;
            value += w * est.value;
            var += (w * est.std_error).powi(2);
        }
    }
    Ok((value, var.sqrt()))
}

// ---------------------------------------------------------------------------
// curve
// ---------------------------------------------------------------------------

fn run_curve(
    cli: &Cli,
    loaded: &Loaded,
    conditioning: &Conditioning,
    curve: &CurveCommand,
) -> CliResult<Table> {
    let CurveCommand::Zcb { from, to, leg } = curve;
    let model = &loaded.model;
    let t = loaded.state.observed.len();
    let horizon = loaded.horizon;
    let from = from.unwrap_or(t);
    if from != t {
        return Err(CliError::validation(format!(
            "--from {from} must equal the current time t={t} (extend state.observed to move t)"
        )));
    }
    let to = to.unwrap_or(horizon);
    if to <= from || to > horizon {
        return Err(CliError::validation(format!(
            "--to must lie in {}..={horizon}, got {to}",
            from + 1
        )));
    }
    let mut table = Table::new("curve.zcb", &["maturity", "price", "yield"]);
    for u in (from + 1)..=to {
        let price = match (&loaded.market, leg.as_str()) {
            (Market::Normal(spec), "domestic") => {
                (1.0 + spec.rate).powi(-((u - t) as i32))
            }
            (Market::Fx(spec), "domestic") => {
                zcb_domestic(
                    model, spec, t, u, horizon, &loaded.state, &loaded.observed, conditioning,
                    cli.path_cap,
                )?
                .price
            }
            (Market::Fx(spec), other) => {
                let i = other
                    .strip_prefix("foreign:")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| {
                        CliError::usage(format!(
                            "--leg must be \"domestic\" or \"foreign:i\", got {other:?}"
                        ))
                    })?;
                zcb_foreign(
                    model, spec, i, t, u, horizon, &loaded.state, &loaded.observed, conditioning,
                    cli.path_cap,
                )?
                .price
            }
            (Market::Hjm(layout), "domestic") => hjm_zcb(
                model, layout, t, u, &loaded.state, &loaded.observed, conditioning, cli.path_cap,
            )?,
            (_, other) => {
                return Err(CliError::usage(format!(
                    "--leg {other:?} is not available on this market"
                )))
            }
        };
        let yld = price.powf(-1.0 / (u - t) as f64) - 1.0;
        table.push(vec![Cell::Int(u as i64), Cell::Num(price), Cell::Num(yld)]);
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn run_simulate(
    cli: &Cli,
    loaded: &Loaded,
    conditioning: &Conditioning,
    measure: Measure,
    paths: usize,
) -> CliResult<Table> {
    if paths == 0 {
        return Err(CliError::usage("--paths must be positive"));
    }
    let model = &loaded.model;
    let inner = model.inner();
    let n = model.dim();
    let horizon = loaded.horizon;
    let t0 = loaded.state.observed.len();
    let prefixes = prefix_weights(
        model,
        &loaded.state,
        &loaded.observed,
        conditioning,
        |p| market_deltas(loaded, p),
        cli.path_cap,
    )?;
    let mut columns: Vec<String> =
        vec!["path".into(), "time".into(), "regime".into()];
    for j in 1..=n {
        columns.push(format!("y{j}"));
    }
    let cols: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new("simulate", &cols);

    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    for i in 0..paths {
        // Sample the regime prefix by its conditional weight, then extend
        // the chain to the horizon.
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut regimes = prefixes.entries.last().unwrap().0 .0.clone();
        for (prefix, w) in &prefixes.entries {
            acc += w;
            if u <= acc {
                regimes = prefix.0.clone();
                break;
            }
        }
        for t in (t0 + 1)..=horizon {
            let probs = if t == 1 {
                inner.initial_dist.clone()
            } else {
                inner.transition.row(regimes[t - 2]).transpose().clone_owned()
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = inner.n_regimes - 1;
            for (s, &p) in probs.iter().enumerate() {
                acc += p;
                if u <= acc {
                    pick = s;
                    break;
                }
            }
            regimes.push(pick);
        }
        let path = RegimePath(regimes);
        let traj = match measure {
            Measure::Real => model.simulate_real_path(&loaded.state, &path, &mut rng)?,
            Measure::Q => {
                let deltas = market_deltas(loaded, &path)?;
                let sigmas = model.covariance_path(&path)?;
                let mut st = loaded.state.clone();
                for t in (t0 + 1)..=horizon {
                    let s = path.0[t - 1];
                    let theta = deltas[t - 1].contract(&st, t);
                    let chol = model.sigma_chol(&sigmas[t - 1], s)?;
                    let eps =
                        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let y = model.conditional_mean(s, &st, t) + theta + chol.l() * eps;
                    st.push_observed(y);
                }
                st.observed
            }
        };
        for (m, y) in traj.iter().enumerate() {
            let mut row = vec![
                Cell::Int(i as i64),
                Cell::Int((m + 1) as i64),
                Cell::Int(path.0[m] as i64),
            ];
            row.extend(y.iter().map(|&v| Cell::Num(v)));
            table.push(row);
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// kernel
// ---------------------------------------------------------------------------

fn run_kernel(
    loaded: &Loaded,
    conditioning: &Conditioning,
    objective: Objective,
    regime_path: Option<&str>,
) -> CliResult<Table> {
    let model = &loaded.model;
    let inner = model.inner();
    let n = model.dim();
    let horizon = loaded.horizon;
    let t0 = loaded.state.observed.len();
    let path = match regime_path {
        Some(raw) => {
            let p = parse_usize_list(raw, "--regime-path")?;
            if p.len() != horizon {
                return Err(CliError::validation(format!(
                    "--regime-path must list {horizon} regimes, got {}",
                    p.len()
                )));
            }
            RegimePath(p)
        }
        None => {
            // Greedy most-likely chain, honoring a known prefix.
            let mut p: Vec<usize> = match conditioning {
                Conditioning::Known(prefix) => prefix.clone(),
                Conditioning::Filtered => Vec::new(),
            };
            while p.len() < horizon {
                let probs = if p.is_empty() {
                    inner.initial_dist.clone()
                } else {
                    inner.transition.row(p[p.len() - 1]).transpose().clone_owned()
                };
                p.push(probs.argmax().0);
            }
            RegimePath(p)
        }
    };

    let mut columns: Vec<String> = vec!["time".into(), "regime".into()];
    for j in 1..=n {
        columns.push(format!("theta{j}"));
    }
    columns.push("objective".into());
    let cols: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new("kernel", &cols);

    match &loaded.market {
        Market::Hjm(layout) => {
            let cs = hjm_constraints(model, layout, &path, &loaded.state, &loaded.observed, t0)?;
            let sigmas = model.covariance_path(&path)?;
            let constraint = KernelConstraint { a: cs.a, b: cs.b };
            let theta = match objective {
                Objective::Entropy => entropy_kernel(&sigmas[t0..], &constraint)?,
                Objective::Variance => {
                    variance_kernel(&sigmas[t0..], &constraint, KernelOpts::default())?
                }
            };
            let obj = match objective {
                Objective::Entropy => entropy_objective(&theta, &sigmas[t0..])?,
                Objective::Variance => variance_objective(&theta, &sigmas[t0..])?,
            };
            for (m, t) in ((t0 + 1)..=horizon).enumerate() {
                let mut row = vec![Cell::Int(t as i64), Cell::Int(path.0[t - 1] as i64)];
                row.extend(theta.rows(m * n, n).iter().map(|&v| Cell::Num(v)));
                row.push(if t == t0 + 1 { Cell::Num(obj) } else { Cell::Empty });
                table.push(row);
            }
        }
        Market::Normal(_) | Market::Fx(_) => {
            if objective == Objective::Variance {
                return Err(CliError::validation(
                    "the variance objective is only reported for hjm markets; the normal and fx \
                     kernels are the per-period corollary solutions, where the two objectives \
                     coincide",
                ));
            }
            // Kernel values along the zero-noise risk-neutral skeleton,
            // recomputed per step from the skeleton lags.
            let deltas = market_deltas(loaded, &path)?;
            let sigmas = model.covariance_path(&path)?;
            let mut st = loaded.state.clone();
            let mut obj = 0.0;
            let mut rows = Vec::new();
            for t in (t0 + 1)..=horizon {
                let s = path.0[t - 1];
                let theta = deltas[t - 1].contract(&st, t);
                obj += entropy_objective(&theta, &sigmas[t - 1..t])?;
                rows.push((t, s, theta.clone()));
                let y = model.conditional_mean(s, &st, t) + theta;
                st.push_observed(y);
            }
            for (t, s, theta) in rows {
                let mut row = vec![Cell::Int(t as i64), Cell::Int(s as i64)];
                row.extend(theta.iter().map(|&v| Cell::Num(v)));
                row.push(if t == t0 + 1 { Cell::Num(obj) } else { Cell::Empty });
                table.push(row);
            }
        }
    }
    Ok(table)
}
