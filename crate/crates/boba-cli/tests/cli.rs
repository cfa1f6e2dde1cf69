use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use boba_core::gradfile::GradientFile;
use boba_core::linalg::Matrix;

fn boba() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_boba"));
    cmd.env_remove("BOBA_SIM_SEED");
    cmd
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
[task]
classes = 3
dim = 4
per_class = 20
test_per_class = 20
server_per_class = 4
oracle_per_class = 50

[partition]
honest = 6

[schedule]
rounds = 4

[aggregator]
f = 1

[attack]
kind = "ipm"
byzantine = 1
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

fn simulate(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    run(boba().args(["simulate", "--config"]).arg(cfg).arg("--out").arg(out).args(extra))
}

#[test]
fn simulate_missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&dir.path().join("absent.toml"), &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn simulate_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["[task]\nbogus = 1\n", "[aggregator]\nrule = \"nope\"\n", "[attack]\nkind = \"ipm\"\nbyzantine = 0\n[schedule]\neta = -1\n"] {
        let cfg = write_config(dir.path(), text);
        let out = simulate(&cfg, &dir.path().join("o"), &[]);
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
}

#[test]
fn simulate_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("rounds = 4", "rounds = 4\neta = 1e305").replace("kind = \"ipm\"", "kind = \"none\"");
    let cfg = write_config(dir.path(), &text);
    let out = simulate(&cfg, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = dir.path().join("o");
    let out = simulate(&cfg, &o, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(o.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,agr,attack,seed,eta,train_loss,test_acc,grad_err,trsvd_calls,accepted_count");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,boba,ipm,0,0.5,"));
    let summary = fs::read_to_string(o.join("summary.txt")).unwrap();
    for key in ["agr=boba", "attack=ipm", "rounds=4", "byzantine=1"] {
        assert!(summary.lines().any(|l| l == key), "{key} missing from\n{summary}");
    }
    assert!(summary.lines().all(|l| l.contains('=')));
    assert!(fs::read_to_string(o.join("pca.csv")).unwrap().starts_with("component,fraction\n1,"));
}

#[test]
fn simulate_is_reproducible_across_seeds_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let read = |o: &Path| (fs::read(o.join("rounds.csv")).unwrap(), fs::read(o.join("summary.txt")).unwrap());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let e = dir.path().join("e");
    assert!(simulate(&cfg, &a, &["--seed", "11"]).status.success());
    assert!(simulate(&cfg, &b, &["--seed", "11", "--threads", "1"]).status.success());
    assert!(simulate(&cfg, &c, &["--seed", "12", "--threads", "3"]).status.success());
    assert!(run(boba().env("BOBA_SIM_SEED", "11").args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&e))
        .status
        .success());
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&e));
    assert_ne!(read(&a).0, read(&c).0);
}

#[test]
fn packaged_configs_parse() {
    for name in ["desk.toml", "smoke.toml", "fedavg_minmax.toml"] {
        let path = repo().join("configs").join(name);
        boba_core::config::SimConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

fn aggregate(file: &Path, agr: &str, f: usize) -> Output {
    run(boba().args(["aggregate", "--file"]).arg(file).args(["--agr", agr, "--f", &f.to_string()]))
}

fn parse_line(line: &str) -> (String, String, usize, Vec<f64>) {
    let parts: Vec<&str> = line.trim().split(',').collect();
    (
        parts[0].to_string(),
        parts[1].to_string(),
        parts[2].parse().unwrap(),
        parts[3..].iter().map(|x| x.parse().unwrap()).collect(),
    )
}

#[test]
fn identical_columns_aggregate_to_that_column() {
    let dir = tempfile::tempdir().unwrap();
    let v = [1.5, -0.25, 3.0];
    let g = Matrix::from_fn(3, 8, |r, _| v[r]);
    // Server columns average to the client value, so the server direction
    // used by fltrust agrees with the clients.
    let offsets = [[1.0, 0.0, -1.0], [0.0, 1.0, -1.0], [0.0, 0.0, 0.0]];
    let server = Matrix::from_fn(3, 3, |r, c| v[r] + offsets[r][c]);
    let path = dir.path().join("same.bgf");
    GradientFile::new(g, Some(server), 3).unwrap().save(&path).unwrap();
    for agr in ["average", "coomed", "trmean", "krum", "mkrum", "geomed", "fltrust", "boba", "boba-es", "b-mkrum"] {
        let out = aggregate(&path, agr, 1);
        assert_eq!(out.status.code(), Some(0), "{agr}: {}", String::from_utf8_lossy(&out.stderr));
        let (name, _, _, values) = parse_line(&stdout(&out));
        assert_eq!(name, agr);
        for (x, y) in values.iter().zip(v) {
            assert!((x - y).abs() < 1e-12, "{agr}: {values:?}");
        }
    }
}

#[test]
fn aggregate_prints_loss_and_acceptance() {
    let out = aggregate(&fixture("lower_bound.bgf"), "boba", 3);
    assert!(out.status.success());
    let (name, loss, accepted, values) = parse_line(&stdout(&out));
    assert_eq!(name, "boba");
    assert!(loss.parse::<f64>().unwrap() >= 0.0);
    assert!((9..=12).contains(&accepted));
    assert_eq!(values.len(), 1);
    let out = aggregate(&fixture("lower_bound.bgf"), "average", 3);
    assert_eq!(parse_line(&stdout(&out)).1, "nan");
}

#[test]
fn boba_on_lower_bound_fixture_stays_within_printed_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lb.bgf");
    let made = run(boba().args(["make-fixture", "lower-bound", "--out"]).arg(&path).args(["--delta", "2"]));
    assert!(made.status.success());
    let notes = String::from_utf8(made.stderr).unwrap();
    let value = |key: &str| -> Vec<f64> {
        let line = notes.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len() + 1..].split(',').map(|x| x.parse().unwrap()).collect()
    };
    let means = value("expected_means");
    let floor = value("error_floor")[0];
    let ceiling = value("error_ceiling")[0];
    assert_eq!(fs::read(&path).unwrap()[..8], *b"BOBAGRD1");
    let (_, _, _, agg) = parse_line(&stdout(&aggregate(&path, "boba", 3)));
    let worst = means.iter().map(|m| (agg[0] - m).powi(2)).fold(0.0, f64::max);
    assert!(worst >= floor - 1e-12 && worst <= ceiling + 1e-12, "{worst} not in [{floor}, {ceiling}]");
}

#[test]
fn krum_on_three_client_fixture_matches_printed_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tc.bgf");
    let made = run(boba().args(["make-fixture", "three-client", "--delta", "1", "--eps", "0.2", "--out"]).arg(&path));
    let notes = String::from_utf8(made.stderr).unwrap();
    let expected: f64 = notes.trim().strip_prefix("krum_error=").unwrap().parse().unwrap();
    let (_, _, accepted, agg) = parse_line(&stdout(&aggregate(&path, "krum", 0)));
    assert_eq!(accepted, 1);
    let err: f64 = agg.iter().map(|x| x * x).sum();
    assert!((err - expected).abs() < 1e-10);
}

#[test]
fn aggregate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bgf");
    fs::write(&bad, b"NOTAGRADFILE-------------------------------------").unwrap();
    assert_eq!(aggregate(&bad, "average", 1).status.code(), Some(2));
    assert_eq!(aggregate(&fixture("lower_bound.bgf"), "nope", 1).status.code(), Some(2));
    assert_eq!(aggregate(&dir.path().join("absent.bgf"), "average", 1).status.code(), Some(2));
    assert_eq!(aggregate(&fixture("lower_bound.bgf"), "selfrej", 1).status.code(), Some(2));
    assert_eq!(aggregate(&fixture("three_client.bgf"), "boba", 0).status.code(), Some(2));
    assert_eq!(aggregate(&fixture("lower_bound.bgf"), "average", 12).status.code(), Some(2));
}

#[test]
fn aggregate_text_lists_columns() {
    let out = run(boba().args(["aggregate", "--text", "--file"]).arg(fixture("lower_bound.bgf")));
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 14);
    assert_eq!(lines[0], "client,0,0.75");
    assert_eq!(lines[13], "server,1,-0.375");
}

#[test]
fn aggregate_pmin_is_applied() {
    let loose = stdout(&run(boba()
        .args(["aggregate", "--file"])
        .arg(fixture("lower_bound.bgf"))
        .args(["--agr", "boba", "--f", "3", "--pmin", "-100"])));
    assert_eq!(parse_line(&loose).2, 12);
    let out = run(boba()
        .args(["aggregate", "--file"])
        .arg(fixture("lower_bound.bgf"))
        .args(["--agr", "boba", "--f", "3", "--pmin", "0.5"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_reports_each_check() {
    let out = run(boba().args(["verify", "--suite", "fixtures"]));
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("PASS fixtures/krum_three_client")));
    assert!(text.lines().any(|l| l.starts_with("PASS fixtures/lower_bound/boba:")));
}

#[test]
fn verify_corrupted_tolerance_exits_1_naming_the_check() {
    let out = run(boba().args(["verify", "--suite", "fixtures", "--tolerance", "-1"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).lines().any(|l| l.starts_with("FAIL fixtures/lower_bound/average_equality")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("average_equality"));
}

#[test]
fn verify_unknown_suite_is_a_usage_error() {
    assert_eq!(run(boba().args(["verify", "--suite", "everything"])).status.code(), Some(2));
}

#[test]
fn bench_emits_timing_rows() {
    let out = run(boba().args(["bench", "--n", "20,30", "--d", "50", "--repeats", "1"]));
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("agr,n,d,seconds,k"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 16);
    for r in &rows {
        if r[0] == "boba" {
            let k: usize = r[4].parse().unwrap();
            assert!((1..=50).contains(&k));
        } else {
            assert_eq!(r[4], "");
        }
    }
}

#[test]
fn pca_lists_components() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(boba().args(["pca", "--config"]).arg(&cfg));
    assert!(out.status.success());
    let text = stdout(&out);
    let total: f64 = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}
