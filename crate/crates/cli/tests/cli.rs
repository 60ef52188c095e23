//! End-to-end tests of the `msvar` binary: golden outputs per subcommand,
//! seed determinism, and the exit-code contract.

use std::path::PathBuf;
use std::process::{Command, Output};

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn msvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msvar"))
        .current_dir(repo_root())
        .args(args)
        .output()
        .expect("failed to run msvar")
}

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(repo_root().join("crates/cli/tests/golden").join(name)).unwrap()
}

fn assert_golden(args: &[&str], name: &str) {
    let out = msvar(args);
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        out.stdout,
        golden(name),
        "{name} drifted; left: {}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn golden_price_normal() {
    assert_golden(
        &[
            "--model",
            "models/desk_normal.json",
            "price",
            "normal",
            "--weights",
            "european:1",
            "--strike",
            "10",
        ],
        "price_normal.txt",
    );
}

#[test]
fn golden_price_margrabe() {
    assert_golden(
        &[
            "--model",
            "models/desk_fx.json",
            "price",
            "margrabe",
            "--case",
            "3",
            "--idx",
            "1",
            "--strike",
            "1.1",
        ],
        "price_margrabe.txt",
    );
}

#[test]
fn golden_price_general() {
    assert_golden(
        &[
            "--model",
            "models/desk_fx.json",
            "price",
            "general",
            "--contract",
            "models/general_contract.json",
            "--seed",
            "7",
        ],
        "price_general.txt",
    );
}

#[test]
fn golden_price_caplet() {
    assert_golden(
        &[
            "--model",
            "models/desk_hjm.json",
            "price",
            "caplet",
            "--fix",
            "2",
            "--start",
            "2",
            "--end",
            "4",
            "--strike",
            "0.03",
        ],
        "price_caplet.txt",
    );
}

#[test]
fn golden_price_zcb_option() {
    assert_golden(
        &[
            "--model",
            "models/desk_hjm.json",
            "price",
            "zcb-option",
            "--exercise",
            "2",
            "--maturity",
            "4",
            "--strike",
            "0.94",
            "--type",
            "put",
        ],
        "price_zcb_option.txt",
    );
}

#[test]
fn golden_curve_zcb() {
    assert_golden(
        &["--model", "models/desk_fx.json", "curve", "zcb", "--output", "csv"],
        "curve_zcb.csv",
    );
}

#[test]
fn golden_simulate() {
    assert_golden(
        &[
            "--model",
            "models/desk_normal.json",
            "simulate",
            "--measure",
            "q",
            "--paths",
            "2",
            "--seed",
            "3",
            "--output",
            "csv",
        ],
        "simulate.csv",
    );
}

#[test]
fn golden_kernel() {
    assert_golden(
        &[
            "--model",
            "models/desk_hjm.json",
            "kernel",
            "--objective",
            "entropy",
            "--output",
            "json",
        ],
        "kernel.json",
    );
}

#[test]
fn fixed_seed_is_byte_identical() {
    let args = [
        "--model",
        "models/desk_fx.json",
        "simulate",
        "--measure",
        "real",
        "--paths",
        "3",
        "--seed",
        "7",
    ];
    let a = msvar(&args);
    let b = msvar(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stderr, b.stderr);
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = msvar(&["--model", "models/desk_normal.json", "frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_model_exits_2() {
    let out = msvar(&["curve", "zcb"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_model_exits_3_with_field_path() {
    let dir = std::env::temp_dir().join("msvar-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let text = std::fs::read_to_string(repo_root().join("models/desk_normal.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["transition"][0][0] = serde_json::json!(0.8);
    let bad = dir.join("bad_transition.json");
    std::fs::write(&bad, doc.to_string()).unwrap();

    let out = msvar(&["--model", bad.to_str().unwrap(), "curve", "zcb"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("transition[0]"));

    // Same failure under --output json: machine-readable error on stderr.
    let out = msvar(&["--model", bad.to_str().unwrap(), "--output", "json", "curve", "zcb"]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("transition[0]"));
}

#[test]
fn numerical_failure_exits_4() {
    // The variance objective degenerates on the HJM desk model: the final
    // period enters no bond constraint, so its entropy kernel block vanishes.
    let out = msvar(&["--model", "models/desk_hjm.json", "kernel", "--objective", "variance"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn wrong_market_for_contract_exits_3() {
    let out = msvar(&[
        "--model",
        "models/desk_normal.json",
        "price",
        "caplet",
        "--fix",
        "2",
        "--start",
        "2",
        "--end",
        "4",
        "--strike",
        "0.03",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hjm"));
}

#[test]
fn draws_produce_a_standard_error() {
    let out = msvar(&[
        "--model",
        "models/desk_normal.json",
        "--draws",
        "models/desk_normal_draws.json",
        "price",
        "normal",
        "--weights",
        "asian:2",
        "--strike",
        "5",
        "--output",
        "json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let row = &doc["rows"][0];
    assert!(row[1].as_f64().unwrap() > 0.0);
    assert!(row[2].as_f64().unwrap() > 0.0);
}
