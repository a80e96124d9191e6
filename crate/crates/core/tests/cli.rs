//! End-to-end checks of the scenario pipeline and the `zvonkin-lab` binary:
//! parsing, validation messages, canonical config hashing, deterministic
//! reports, exit codes, dumps, and the family catalog.

use std::path::Path;
use std::process::{Command, Output};

use zvonkin_lab::cli::{
    config_hash, parse_scenario, parse_testfn, run_scenario, validate_scenario, TestFnSpec,
    REPORT_VERSION,
};
use zvonkin_lab::io::{read_gridfn, read_paths};

const SMALL_SCENARIO: &str = r#"
name = "small-demo"
seed = 42

[grid]
dim = 2
nx = 16
nt = 16

[[ops]]
kind = "simulate"
family = { id = "a" }
paths = 64
steps = 16
band = { max = 8.0 }

[[ops]]
kind = "krylov"
family = { id = "c" }
f = { kind = "bump", center = [0.0, 0.0], radius = 1.0 }
norm = { p = 2.0, q = "inf" }
paths = 64
steps = 16

[[ops]]
kind = "tightness"
family = { id = "a" }
deltas = [0.25, 0.5]
paths = 64
steps = 16
"#;

fn violations(text: &str) -> Vec<String> {
    match parse_scenario(text) {
        Ok(sc) => validate_scenario(&sc),
        Err(v) => v,
    }
}

fn assert_mentions(violations: &[String], needle: &str) {
    assert!(
        violations.iter().any(|v| v.contains(needle)),
        "expected a violation mentioning {needle:?}, got {violations:#?}"
    );
}

#[test]
fn small_scenario_parses_and_validates() {
    let sc = parse_scenario(SMALL_SCENARIO).expect("scenario parses");
    assert_eq!(sc.name, "small-demo");
    assert_eq!(sc.ops.len(), 3);
    assert!(validate_scenario(&sc).is_empty());
}

#[test]
fn validation_catches_unknown_fields() {
    // Top of the file, before any table header, so the key is root-level.
    let bad = format!("unexpected_knob = 3\n{SMALL_SCENARIO}");
    assert!(!violations(&bad).is_empty());
}

#[test]
fn validation_surfaces_norm_and_budget_limits() {
    let bad_q = r#"
name = "bad-q"

[[ops]]
kind = "krylov"
family = { id = "a" }
f = { kind = "one" }
norm = { p = 2.0, q = 0.5 }
"#;
    assert_mentions(&violations(bad_q), "time exponent q must exceed 1");

    let too_many_steps = r#"
name = "budget"

[[ops]]
kind = "simulate"
family = { id = "a" }
paths = 1000000
steps = 1000
"#;
    assert_mentions(&violations(too_many_steps), "max_path_steps");

    let too_many_cells = r#"
name = "budget"

[grid]
dim = 3
nx = 64
nt = 512

[[ops]]
kind = "simulate"
family = { id = "a" }
paths = 16
steps = 16
"#;
    assert_mentions(&violations(too_many_cells), "max_lattice_cells");
}

#[test]
fn lattice_families_default_their_grid_but_reject_wrong_dimensions() {
    // Without a [grid] table a lattice family falls back to its catalog
    // default, so the scenario is valid as written.
    let no_grid = r#"
name = "no-grid"

[[ops]]
kind = "simulate"
family = { id = "c" }
paths = 16
steps = 16
"#;
    assert!(violations(no_grid).is_empty());

    // An explicit grid of the wrong dimension is rejected.
    let wrong_dim = r#"
name = "wrong-dim"

[grid]
dim = 3
nx = 16
nt = 8

[[ops]]
kind = "simulate"
family = { id = "c" }
paths = 16
steps = 16
"#;
    assert_mentions(&violations(wrong_dim), "requires a 2-dimensional lattice");
}

#[test]
fn norm_op_requires_exactly_one_input() {
    let none = r#"
name = "norm-none"

[grid]
dim = 2
nx = 16
nt = 8

[[ops]]
kind = "norm"
norm = { p = 2.0, q = "inf" }
"#;
    assert!(!violations(none).is_empty());

    let two = r#"
name = "norm-two"

[grid]
dim = 2
nx = 16
nt = 8

[[ops]]
kind = "norm"
f = { kind = "one" }
family = { id = "a" }
norm = { p = 2.0, q = "inf" }
"#;
    assert!(!violations(two).is_empty());
}

#[test]
fn acceptance_op_rejects_out_of_range_criteria() {
    for k in [0usize, 11] {
        let text = format!(
            "name = \"acc\"\n\n[[ops]]\nkind = \"acceptance\"\ncriteria = [{k}]\n"
        );
        assert!(!violations(&text).is_empty(), "criterion {k} should be rejected");
    }
}

#[test]
fn config_hash_ignores_formatting_but_not_values() {
    let a = "name = \"h\"\nseed = 1\n\n[[ops]]\nkind = \"simulate\"\nfamily = { id = \"a\" }\npaths = 8\nsteps = 4\n";
    let b = "# a comment\nseed   =   1\nname=\"h\"\n[[ops]]\nsteps = 4\npaths = 8\nkind = \"simulate\"\nfamily = { id = \"a\" }\n";
    assert_eq!(config_hash(a).unwrap(), config_hash(b).unwrap());

    let c = a.replace("seed = 1", "seed = 2");
    assert_ne!(config_hash(a).unwrap(), config_hash(&c).unwrap());
}

#[test]
fn testfn_tokens_parse() {
    assert!(matches!(parse_testfn("one").unwrap(), TestFnSpec::One));
    assert!(matches!(parse_testfn("r2").unwrap(), TestFnSpec::R2));
    assert!(matches!(parse_testfn("coord:1").unwrap(), TestFnSpec::Coord { axis: 1 }));
    assert!(matches!(parse_testfn("sin:0").unwrap(), TestFnSpec::Sin { axis: 0 }));
    match parse_testfn("bump:0.5,-0.5:0.8").unwrap() {
        TestFnSpec::Bump { center, radius } => {
            assert_eq!(center, vec![0.5, -0.5]);
            assert_eq!(radius, 0.8);
        }
        other => panic!("unexpected parse: {other:?}"),
    }
    match parse_testfn("gauss:0,0,1:1.5").unwrap() {
        TestFnSpec::Gauss { center, width } => {
            assert_eq!(center, vec![0.0, 0.0, 1.0]);
            assert_eq!(width, 1.5);
        }
        other => panic!("unexpected parse: {other:?}"),
    }
    assert!(parse_testfn("waves").is_err());
    assert!(parse_testfn("bump:0.5").is_err());
}

#[test]
fn reports_are_reproducible_modulo_wall_clock() {
    let sc = parse_scenario(SMALL_SCENARIO).expect("scenario parses");
    let value = serde_json::to_value(&sc).unwrap();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let report = run_scenario(&sc, &value, None).expect("scenario runs");
        assert_eq!(report.version, REPORT_VERSION);
        assert!(report.pass, "report: {}", report.to_json());
        // Every declared operation appears exactly once, in declaration order.
        assert_eq!(report.rows.len(), sc.ops.len());
        for (i, row) in report.rows.iter().enumerate() {
            assert_eq!(row.index, i);
            assert!(row.status == "ok" || row.status == "pass", "row: {row:?}");
        }
        let mut v = serde_json::to_value(&report).unwrap();
        v["wall_clock_seconds"] = serde_json::Value::from(0.0);
        reports.push(v.to_string());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn report_dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
name = "dumps"
seed = 9

[grid]
dim = 2
nx = 16
nt = 8

[[ops]]
kind = "simulate"
family = { id = "a" }
paths = 12
steps = 8
dump = "ensemble.paths"

[[ops]]
kind = "pde-solve"
family = { id = "a" }
lambda = 1.0
f = { kind = "sin", axis = 0 }
dump = "solution.gridfn"

[[ops]]
kind = "krylov-ladder"
family = { id = "a" }
f = { kind = "one" }
norm = { p = 2.0, q = "inf" }
deltas = [0.25, 0.5]
theta = 0.5
paths = 32
steps = 8
"#;
    let sc = parse_scenario(text).expect("scenario parses");
    assert!(validate_scenario(&sc).is_empty());
    let value = serde_json::to_value(&sc).unwrap();
    let report = run_scenario(&sc, &value, Some(dir.path())).expect("scenario runs");
    assert!(report.pass, "report: {}", report.to_json());

    let (dim, paths, steps, states) = read_paths(&dir.path().join("ensemble.paths")).unwrap();
    assert_eq!((dim, paths, steps), (2, 12, 8));
    assert_eq!(states.len(), 12 * 9 * 2);
    assert!(states.iter().all(|v| v.is_finite()));

    let u = read_gridfn(
        &dir.path().join("solution.gridfn"),
        std::f64::consts::PI,
        1.0,
        8,
    )
    .unwrap();
    assert_eq!(u.grid.nx, 16);

    let report_path = dir.path().join("report.json");
    let text = std::fs::read_to_string(&report_path).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["version"], "report v1");

    let csv = std::fs::read_to_string(dir.path().join("row-02-ladder.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "ladder CSV: {csv}");
    assert!(csv.lines().next().unwrap().contains("delta"));
}

// ---------------------------------------------------------------------------
// Binary-level checks
// ---------------------------------------------------------------------------

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zvonkin-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_scenario(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn binary_validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_scenario(dir.path(), "good.toml", SMALL_SCENARIO);
    let out = bin(&["validate", "--config", &good]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("scenario is valid"));

    let bad = write_scenario(
        dir.path(),
        "bad.toml",
        "name = \"x\"\n\n[[ops]]\nkind = \"simulate\"\nfamily = { id = \"nope\" }\n",
    );
    let out = bin(&["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("violation"));
}

#[test]
fn binary_run_reports_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_scenario(dir.path(), "run.toml", SMALL_SCENARIO);
    let out = bin(&["run", "--config", &good]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a JSON report");
    assert_eq!(report["version"], "report v1");
    assert_eq!(report["pass"], true);

    // An unachievable band turns the exit code into 1.
    let failing = write_scenario(
        dir.path(),
        "fail.toml",
        r#"
name = "failing-band"

[[ops]]
kind = "simulate"
family = { id = "a" }
paths = 32
steps = 8
band = { target = 99.0, tolerance = 0.001 }
"#,
    );
    let out = bin(&["run", "--config", &failing]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], false);

    // A malformed config exits with 2.
    let out = bin(&["run", "--config", &write_scenario(dir.path(), "broken.toml", "name = [")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_seed_override_changes_hash_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scenario(dir.path(), "seeded.toml", SMALL_SCENARIO);
    let base: serde_json::Value =
        serde_json::from_slice(&bin(&["run", "--config", &cfg]).stdout).unwrap();
    let reseeded: serde_json::Value =
        serde_json::from_slice(&bin(&["run", "--config", &cfg, "--seed", "43"]).stdout).unwrap();
    assert_ne!(base["config_hash"], reseeded["config_hash"]);
    assert_ne!(
        base["rows"][0]["value"], reseeded["rows"][0]["value"],
        "a reseeded run should sample differently"
    );
}

#[test]
fn binary_lists_the_family_catalog() {
    let out = bin(&["list-families"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for id in ["family A:", "family B:", "family C:", "family D:", "family E:"] {
        assert!(text.contains(id), "catalog is missing {id}: {text}");
    }
    assert!(text.contains("d/p = 2/5"));
    assert!(text.contains("critical"));
    assert!(text.contains("uniform in n"));
}

#[test]
fn binary_quick_subcommands_print_reports() {
    let out = bin(&["simulate", "--family", "a", "--paths", "32", "--steps", "8"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["version"], "report v1");
    assert_eq!(report["rows"][0]["op"], "simulate");

    let out = bin(&[
        "norm", "--f", "one", "--p", "2", "--q", "inf", "--nx", "16", "--nt", "8",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // The norm of the unit function equals the cutoff's own norm; compare
    // against the library on the same lattice.
    let grid = zvonkin_lab::grid::Grid::new(2, std::f64::consts::PI, 16, 1.0, 8).unwrap();
    let ones = zvonkin_lab::grid::sample_scalar(grid, |_| 1.0).unwrap();
    let np = zvonkin_lab::norms::NormParams::over_horizon(
        0.0,
        2.0,
        zvonkin_lab::norms::TimeExponent::Sup,
        1.0,
        &grid,
    );
    let expected = zvonkin_lab::norms::localized_norm(&ones, &np).unwrap().value;
    let value = report["rows"][0]["value"].as_f64().unwrap();
    assert!(
        (value - expected).abs() <= 1e-12 * expected.max(1.0),
        "norm of 1 reported as {value}, library value {expected}"
    );
}
