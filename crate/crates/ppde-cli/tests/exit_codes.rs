use std::path::PathBuf;
use std::process::Command;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ppde-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ppde(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ppde")).args(args).env("PPDE_THREADS", "2").output().unwrap()
}

const CONFIG: &str = r#"
[driver]
kind = "power"
gamma = 0.5
horizon = 1.0
"#;

#[test]
fn check_succeeds_and_writes_its_report() {
    let dir = workdir("check");
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("out");
    let o = ppde(&["check", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("admissibility.csv").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("kappa0"));
}

#[test]
fn broken_config_exits_with_two() {
    let dir = workdir("broken");
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, "[driver]\nkind = \"power\"\n").unwrap();
    let o = ppde(&["check", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
    let o = ppde(&["check", "--config", dir.join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_hypothesis_exits_with_one() {
    let dir = workdir("fail");
    let cfg = dir.join("exp.toml");
    let text = format!("{CONFIG}\n[coefficients]\nsigma = {{ type = \"sine\", base = 1.0, amplitude = 0.5 }}\n[coefficients.holder]\nalpha = 0.5\nalpha_ell = 0.5\nc_sigma = 1e-3\nc_mu = 1.0\nc_ell_g = 1.0\n");
    std::fs::write(&cfg, text).unwrap();
    let o = ppde(&["check", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
}
