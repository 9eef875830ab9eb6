use std::path::Path;
use std::process::{Command, Output};

fn gflow(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gflow"))
        .args(args)
        .env("GFLOW_OUT_DIR", out_dir)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

const GRID: &str = r#"
[env]
type = "hypergrid"
dims = 2
side = 3

[objective]
kind = "tb"

[loss]
name = "linex_half"

[model]
type = "tabular"

[training]
trajectories = 320
seed = 1

[eval]
interval = 5
"#;

#[test]
fn run_writes_csv_summary_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    std::fs::write(&cfg, GRID).unwrap();
    let out = gflow(&["run", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["trajectories"], 320);
    let csv = std::fs::read_to_string(dir.path().join("hypergrid_tb_linex_half_s1.csv")).unwrap();
    assert!(csv.starts_with("step,trajectories,loss,objective,"));
    assert_eq!(csv.lines().count(), 1 + 1 + 4);
    assert!(dir.path().join("hypergrid_tb_linex_half_s1.summary.json").exists());
    assert!(dir.path().join("hypergrid_tb_linex_half_s1.ckpt").exists());

    // second execution gives identical bytes
    let other = tempfile::tempdir().unwrap();
    let again = gflow(&["run", cfg.to_str().unwrap(), "--out", other.path().to_str().unwrap()], dir.path());
    assert!(again.status.success());
    let csv2 = std::fs::read_to_string(other.path().join("hypergrid_tb_linex_half_s1.csv")).unwrap();
    assert_eq!(csv, csv2);
}

#[test]
fn run_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, GRID.replace("interval = 5", "intervall = 5")).unwrap();
    let out = gflow(&["run", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("intervall"));
}

#[test]
fn suite_runs_every_seed_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    std::fs::write(configs.join("grid.toml"), GRID).unwrap();
    std::fs::write(configs.join("notes.txt"), "ignored").unwrap();
    let out = gflow(&["suite", configs.to_str().unwrap(), "--seeds", "3,4,5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in 3..=5 {
        assert!(dir.path().join(format!("hypergrid_tb_linex_half_s{s}.csv")).exists());
    }
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("suite_summary.json")).unwrap()).unwrap();
    assert_eq!(stats[0]["runs"], 3);
    assert_eq!(stats[0]["failures"], 0);
}

#[test]
fn verify_reports_rows_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = gflow(&["verify", "--dags", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4 * 4 * 4);
    assert!(rows.iter().all(|r| r["pass"] == true));

    let strict = gflow(&["verify", "--dags", "1", "--tol", "1e-300"], dir.path());
    assert_eq!(strict.status.code(), Some(1));
    assert!(dir.path().join("counterexamples").read_dir().unwrap().next().is_some());
}

#[test]
fn classify_prints_the_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let expected = [
        ("quadratic", "zero-forcing yes, zero-avoiding no"),
        ("linex1", "zero-forcing no, zero-avoiding yes"),
        ("linex_half", "zero-forcing no, zero-avoiding no"),
        ("shifted_cosh", "zero-forcing yes, zero-avoiding yes"),
    ];
    for (loss, pattern) in expected {
        let out = gflow(&["classify", loss], dir.path());
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains(pattern), "{loss}: {text}");
    }
    let custom = gflow(&["classify", "exp(t) - 1 - t"], dir.path());
    assert!(String::from_utf8_lossy(&custom.stdout).contains("zero-avoiding yes"));
    assert!(!gflow(&["classify", "nonsense"], dir.path()).status.success());
}

#[test]
fn convert_tabulates_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    let out = gflow(&["convert", "--g", "quadratic"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t\tf(t)");
    assert_eq!(lines.len(), 14);
    // every generator vanishes at t = 1
    let at_one: f64 = lines[7].split('\t').nth(1).unwrap().parse().unwrap();
    assert!(at_one.abs() < 1e-12);

    let back = gflow(&["convert", "--f", "t*log(t) - t + 1"], dir.path());
    assert!(back.status.success(), "{}", String::from_utf8_lossy(&back.stderr));
    assert!(!gflow(&["convert"], dir.path()).status.success());
    assert!(!gflow(&["convert", "--g", "quadratic", "--f", "t"], dir.path()).status.success());
}
