//! End-to-end CLI checks: stage composition, file round-trips, exit codes,
//! and seed/env handling. Uses small worlds; the statistical batteries
//! live in the acceptance suite.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hongbao")
}

const SMALL: &[&str] = &[
    "--set",
    "population.groups=30",
    "--set",
    "sim.horizon_days=12",
    "--set",
    "estimate.bootstrap_reps=50",
    "--set",
    "matching.bootstrap_reps=50",
    "--set",
    "estimate.full_tables=false",
];

fn run(args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    cmd.env_remove("HONGBAO_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn hongbao");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn pipeline_into(dir: &Path, extra: &[&str], envs: &[(&str, &str)]) {
    let mut args: Vec<&str> = vec!["pipeline", "--out"];
    let dir_s = dir.to_str().unwrap();
    args.push(dir_s);
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let (code, _out, err) = run(&args, envs);
    assert_eq!(code, 0, "pipeline failed: {err}");
}

#[test]
fn pipeline_then_stagewise_reproduces_files() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    pipeline_into(&full, &[], &[]);

    // Re-running each stage over the pipeline's own outputs reproduces the
    // downstream files byte for byte (the round-trip invariant).
    let staged = tmp.path().join("staged");
    std::fs::create_dir_all(&staged).unwrap();
    for f in ["members.csv", "edges.csv", "groups.csv"] {
        std::fs::copy(full.join(f), staged.join(f)).unwrap();
    }
    let staged_s = staged.to_str().unwrap();
    for sub in ["simulate", "panel", "estimate"] {
        let mut args = vec![sub, "--out", staged_s];
        args.extend_from_slice(SMALL);
        let (code, _, err) = run(&args, &[]);
        assert_eq!(code, 0, "{sub} failed: {err}");
    }
    for f in ["events.csv", "panel.csv", "report.csv", "summary.txt"] {
        assert_eq!(
            read(&full.join(f)),
            read(&staged.join(f)),
            "{f} differs between pipeline and stagewise runs"
        );
    }
}

#[test]
fn env_seed_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let gen = |dir: &PathBuf, envs: &[(&str, &str)], extra: &[&str]| {
        let mut args = vec!["gen", "--out", dir.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        let (code, _, err) = run(&args, envs);
        assert_eq!(code, 0, "{err}");
    };
    gen(&a, &[("HONGBAO_SEED", "777")], &[]);
    gen(&b, &[], &["--set", "seed=777"]);
    gen(&c, &[], &["--set", "seed=778"]);
    assert_eq!(read(&a.join("members.csv")), read(&b.join("members.csv")));
    assert_ne!(read(&a.join("members.csv")), read(&c.join("members.csv")));
}

#[test]
fn unknown_config_key_exits_2() {
    let (code, _, err) = run(&["gen", "--set", "behavior.theta_extt=1"], &[]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("theta_extt"));
}

#[test]
fn invalid_config_value_exits_2() {
    let (code, _, err) = run(&["gen", "--set", "population.groups=0"], &[]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, _) =
        run(&["panel", "--out", tmp.path().join("nope").to_str().unwrap()], &[]);
    assert_eq!(code, 2);
}

#[test]
fn verify_splitter_passes_and_rejects_bad_spec() {
    let (code, out, _) = run(
        &["verify-splitter", "--amount-cents", "500", "--recipients", "3", "--reps", "50000"],
        &[],
    );
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("PASS"));
    assert!(out.contains("law-of-total-variance"));
    // Degenerate single-recipient packet: point mass, still passes.
    let (code, out, _) = run(
        &["verify-splitter", "--amount-cents", "1", "--recipients", "1", "--reps", "1000"],
        &[],
    );
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("PASS"));
    // Total below one cent per recipient is an invalid spec.
    let (code, _, err) = run(
        &["verify-splitter", "--amount-cents", "2", "--recipients", "3", "--reps", "1000"],
        &[],
    );
    assert_eq!(code, 2, "{err}");
}

#[test]
fn panel_csv_reingestion_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("w");
    pipeline_into(&dir, &[], &[]);
    let report1 = read(&dir.join("report.csv"));
    // estimate again from the written panel.csv only.
    let mut args = vec!["estimate", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let (code, _, err) = run(&args, &[]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(report1, read(&dir.join("report.csv")), "report.csv not reproduced exactly");
}

#[test]
fn events_csv_has_pinned_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("w");
    pipeline_into(&dir, &[], &[]);
    let text = String::from_utf8(read(&dir.join("events.csv"))).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "event_type,timestamp_s,group_id,packet_id,user_id,total_amount_cents,\
         n_recipients,order,amount_cents,counterparty_id"
    );
    assert!(text.lines().skip(1).any(|l| l.starts_with("send,")));
    assert!(text.lines().skip(1).any(|l| l.starts_with("receive,")));
    let reports = String::from_utf8(read(&dir.join("report.csv"))).unwrap();
    assert_eq!(
        reports.lines().next().unwrap(),
        "name,estimate,se,ci_lo,ci_hi,n_obs,n_strata,adj_r2"
    );
}

#[test]
fn tau_sensitivity_sweep_emitted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("w");
    pipeline_into(&dir, &[], &[]);
    let text =
        String::from_utf8(read(&dir.join("plotdata/figa2_tau_sensitivity.csv"))).unwrap();
    let mut taus: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    taus.sort_unstable();
    taus.dedup();
    assert_eq!(taus, vec!["12", "24", "48", "6"], "expected all four tau values: {text}");
}
