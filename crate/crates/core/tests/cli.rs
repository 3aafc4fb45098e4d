use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
[experiment]
algorithm = upcycled
clients = 4
rounds = 3
seeds = 7

[model]
feat_dim = 8
hidden = 6

[data]
classes = 3
shards_per_client = 2
n_min = 20
n_max = 30

[local]
epochs = 1

[privacy]
eps_target = 1.0
jammer_mode = auto

[bound]
enabled = false
";

fn otafl(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_otafl"));
    cmd.args(args).env_remove("OTAFL_OUTPUT_DIR");
    if let Some(d) = out_dir {
        cmd.env("OTAFL_OUTPUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn design_jammer_prints_factor() {
    let o = otafl(
        &[
            "design-jammer", "--eps", "1", "--delta", "1e-5", "--rounds", "10",
            "--data-size", "100", "--alpha-u", "1", "--h-cj", "1", "--sigma-c", "0.1",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0));
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 0.1183868276489014).abs() < 1e-12);
}

#[test]
fn bad_arguments_exit_with_config_error() {
    let o = otafl(
        &[
            "design-jammer", "--eps", "-1", "--delta", "0.01", "--rounds", "10",
            "--data-size", "10", "--alpha-u", "1", "--h-cj", "1", "--sigma-c", "0",
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(otafl(&["no-such-command"], None).status.code(), Some(1));
    assert_eq!(otafl(&["run", "--config", "/nonexistent/cfg.ini"], None).status.code(), Some(1));
    assert_eq!(otafl(&["--help"], None).status.code(), Some(0));
}

#[test]
fn run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.ini");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = otafl(&["run", "--config", cfg.to_str().unwrap()], Some(&out));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics_7.csv", "ledger_7.csv", "curves.svg", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let o = otafl(&["accountant", "--replay", out.join("ledger_7.csv").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,eps_bound,eps_max_client");
    assert_eq!(lines.len(), 4);

    let metrics = otafl::runner::parse_metrics_csv(&std::fs::read_to_string(out.join("metrics_7.csv")).unwrap()).unwrap();
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        let it: usize = cols[0].parse().unwrap();
        let eps: f64 = cols[1].parse().unwrap();
        let m = &metrics[it - 1];
        assert!((eps - m.eps_bound).abs() <= 1e-8 * m.eps_bound);
    }
}

#[test]
fn overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.ini");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = otafl(
        &["run", "--config", cfg.to_str().unwrap(), "--override", "experiment.seeds=3,4"],
        Some(&out),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("metrics_3.csv").is_file() && out.join("metrics_4.csv").is_file());

    let o = otafl(&["run", "--config", cfg.to_str().unwrap(), "--override", "rounds=3"], Some(&out));
    assert_eq!(o.status.code(), Some(1));
    let o = otafl(
        &["run", "--config", cfg.to_str().unwrap(), "--override", "privacy.delta=2"],
        Some(&out),
    );
    assert_eq!(o.status.code(), Some(1));
}
