use std::path::PathBuf;

use ppde::cli_harness::{run, ExperimentConfig, Status, Subcommand};
use ppde::Error;

const KOLMOGOROV: &str = r#"
seed = 5

[driver]
kind = "absolutely-continuous"
density = [1.0]
horizon = 1.0
exponents = [0.0, 0.0, 2.0, 2.0, 1.0]

[payoff]
g = { type = "affine", c0 = 0.0, c1 = 1.0 }

[probes]
t = [1.0]
y1 = [0.0, 0.4]

[solve]
states = [[0.2, 0.1, 0.0]]
terminal_ladder = [0.1, 0.01]

[simulation]
paths = 4000
steps = 20
levels = 2

[plots]
svg = true
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ppde-harness-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::from_toml(KOLMOGOROV).unwrap();
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(back.simulation.sim.paths, 4000);
    assert_eq!(back.probes.targets().len(), 2);
}

#[test]
fn parse_errors_name_the_line_and_field() {
    let bad = KOLMOGOROV.replace("horizon = 1.0", "horizon = \"one\"");
    let msg = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
    assert!(msg.contains("horizon") && msg.contains("line"), "{msg}");
    let unknown = KOLMOGOROV.replace("type = \"affine\"", "type = \"spline\"");
    let msg = ExperimentConfig::from_toml(&unknown).unwrap_err().to_string();
    assert!(msg.contains("spline"), "{msg}");
    let negative = format!("{KOLMOGOROV}\n[validate]\nresidual = -1.0\n");
    let err = ExperimentConfig::from_toml(&negative).unwrap_err();
    assert!(err.to_string().contains("validate.residual"), "{err}");
    assert_eq!(Status::from_error(&err), Status::ConfigError);
}

#[test]
fn check_reports_the_kolmogorov_constants() {
    let cfg = ExperimentConfig::from_toml(KOLMOGOROV).unwrap();
    let out = scratch("check");
    let o = run(Subcommand::Check, &cfg, &out).unwrap();
    assert_eq!(o.status, Status::Success, "{:?}", o.report);
    let csv = std::fs::read_to_string(out.join("admissibility.csv")).unwrap();
    assert!(csv.contains("kappa0,5.000000000000e-1"), "{csv}");
    assert!(csv.contains("kappa1,1.000000000000e0"), "{csv}");
}

#[test]
fn density_rejects_reversed_windows() {
    let text = KOLMOGOROV.replace("t = [1.0]", "t = [0.0]");
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let err = run(Subcommand::Density, &cfg, &scratch("reversed")).unwrap_err();
    assert!(matches!(err, Error::EmptyWindow { .. }), "{err}");
    assert_eq!(Status::from_error(&err).code(), 2);
}

#[test]
fn identical_runs_write_identical_bytes() {
    let cfg = ExperimentConfig::from_toml(KOLMOGOROV).unwrap();
    let (a, b) = (scratch("twice-a"), scratch("twice-b"));
    for cmd in [Subcommand::Density, Subcommand::Simulate] {
        let oa = run(cmd, &cfg, &a).unwrap();
        let ob = run(cmd, &cfg, &b).unwrap();
        assert_eq!(oa.status, Status::Success);
        for (pa, pb) in oa.artifacts.iter().zip(&ob.artifacts) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap(), "{}", pa.display());
        }
    }
    assert!(a.join("histogram.svg").exists() && a.join("density.svg").exists());
}

#[test]
fn validate_passes_on_the_kolmogorov_case() {
    let cfg = ExperimentConfig::from_toml(KOLMOGOROV).unwrap();
    let out = scratch("validate");
    let o = run(Subcommand::Validate, &cfg, &out).unwrap();
    assert_eq!(o.status, Status::Success, "{:#?}", o.report);
    let csv = std::fs::read_to_string(out.join("validate.csv")).unwrap();
    assert!(csv.lines().all(|l| l.ends_with(",true")), "{csv}");
    assert!(csv.lines().count() >= 6);
}

#[test]
fn solve_writes_values_and_the_terminal_ladder() {
    let cfg = ExperimentConfig::from_toml(KOLMOGOROV).unwrap();
    let out = scratch("solve");
    let o = run(Subcommand::Solve, &cfg, &out).unwrap();
    assert_eq!(o.status, Status::Success);
    let mut rd = csv::Reader::from_path(out.join("solve.csv")).unwrap();
    let row = rd.records().next().unwrap().unwrap();
    let v: f64 = row[3].parse().unwrap();
    assert!((v - 0.1).abs() < 1e-9, "{row:?}");
    assert!(out.join("terminal.csv").exists());
}
