use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cgqn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgqn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn qpa(dir: &Path) -> String {
    assert_eq!(
        code(&cgqn(dir, &["generate", "--fixture", "qpa", "--out", "fx"])),
        0
    );
    "fx/problem.json".into()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn generate_from_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgqn(
        dir.path(),
        &[
            "generate", "--n", "2", "--eigs", "2,4", "--seed", "1", "--out", "p",
        ],
    );
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("n = 2, cond = 2, seed = 1"), "{stdout}");
    let qp = cgqn_core::QuadraticProblem::load(dir.path().join("p/problem.json")).unwrap();
    assert_eq!(qp.n(), 2);
}

#[test]
fn generate_log_spaced() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgqn(
        dir.path(),
        &["generate", "--n", "10", "--cond", "1e4", "--seed", "7"],
    );
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("cond = 10000"));
    assert!(dir.path().join("problem.json").exists());
}

#[test]
fn generate_rejects_bad_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgqn(dir.path(), &["generate", "--eigs", "-1,2"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    assert_eq!(code(&cgqn(dir.path(), &["generate", "--n", "3"])), 2);
}

#[test]
fn bfgs_race_on_fixture_is_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let problem = qpa(dir.path());
    let out = cgqn(
        dir.path(),
        &[
            "race",
            "--problem",
            &problem,
            "--scheme",
            "broyden",
            "--phi",
            "0",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("r/race.csv"));
    assert_eq!(rows.len(), 1);
    for row in &rows {
        assert!((row[1].parse::<f64>().unwrap() - 1.0).abs() <= 1e-10);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/race.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "PARALLEL");
    assert_eq!(summary["r_cg"], 2);
    assert_eq!(summary["r_qn"], 2);
}

#[test]
fn rank_one_race_reports_predicted_delta() {
    let dir = tempfile::tempdir().unwrap();
    let problem = qpa(dir.path());
    let out = cgqn(
        dir.path(),
        &[
            "race",
            "--problem",
            &problem,
            "--scheme",
            "rank1",
            "--alphas",
            "1:2",
        ],
    );
    assert_eq!(code(&out), 0);
    let rows = csv_rows(&dir.path().join("race.csv"));
    assert_eq!(rows[0][0], "1");
    assert!((rows[0][1].parse::<f64>().unwrap() - 81.0 / 89.0).abs() <= 1e-10);
    assert!((rows[0][2].parse::<f64>().unwrap() - 81.0 / 89.0).abs() <= 1e-15);
}

#[test]
fn equal_alphas_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgqn(
        dir.path(),
        &[
            "race", "--n", "3", "--cond", "10", "--scheme", "rank1", "--alphas", "1:1",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_k must differ from alpha_{k-1}"));
}

#[test]
fn degenerate_target_exits_with_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let problem = qpa(dir.path());
    let delta_hat = format!("{}", 81.0f64 / 85.0);
    let out = cgqn(
        dir.path(),
        &[
            "race",
            "--problem",
            &problem,
            "--scheme",
            "delta1",
            "--delta",
            &delta_hat,
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate value"));
    let summary = fs::read_to_string(dir.path().join("race.json")).unwrap();
    assert!(summary.contains("\"BREAKDOWN\""));
    // the header is still written for the partial report
    assert!(dir.path().join("race.csv").exists());
}

#[test]
fn race_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "race",
            "--n",
            "6",
            "--cond",
            "50",
            "--seed",
            "3",
            "--scheme",
            "w-identity",
            "--out",
            out,
        ]
    };
    assert_eq!(code(&cgqn(dir.path(), &args("a"))), 0);
    assert_eq!(code(&cgqn(dir.path(), &args("b"))), 0);
    for f in ["race.csv", "race.json", "problem.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn scheme_flags_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let problem = qpa(dir.path());
    for args in [
        vec!["race", "--problem", &problem, "--scheme", "rank1"],
        vec![
            "race",
            "--problem",
            &problem,
            "--scheme",
            "sr1",
            "--phi",
            "1",
        ],
        vec![
            "race",
            "--problem",
            &problem,
            "--scheme",
            "delta1",
            "--delta",
            "0",
        ],
        vec!["race", "--problem", &problem, "--scheme", "nope"],
        vec!["race", "--problem", "missing.json", "--scheme", "sr1"],
        vec!["race", "--scheme", "sr1"],
    ] {
        assert_eq!(code(&cgqn(dir.path(), &args)), 2, "{args:?}");
    }
}

#[test]
fn verify_fixture_and_single_property() {
    let dir = tempfile::tempdir().unwrap();
    let out = cgqn(
        dir.path(),
        &["verify", "--trials", "1", "--n", "2", "--out", "v"],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/verify.json")).unwrap())
            .unwrap();
    let fixture = report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == "qpa-fixture")
        .unwrap();
    assert_eq!(fixture["passed"], true);
    assert_eq!(code(&out), if report["passed"] == true { 0 } else { 1 });

    let out = cgqn(
        dir.path(),
        &[
            "verify",
            "--property",
            "pd-threshold",
            "--trials",
            "50",
            "--out",
            "w",
        ],
    );
    assert_eq!(code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("w/verify.json")).unwrap())
            .unwrap();
    assert_eq!(report["properties"].as_array().unwrap().len(), 1);

    assert_eq!(
        code(&cgqn(dir.path(), &["verify", "--property", "nope"])),
        2
    );
    assert_eq!(code(&cgqn(dir.path(), &["verify", "--trials", "0"])), 2);
}
