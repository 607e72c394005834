use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rbsde(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rbsde"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn cell<'a>(rows: &'a [Vec<String>], row: usize, col: &str) -> &'a str {
    let c = rows[0].iter().position(|h| h == col).unwrap_or_else(|| panic!("no column {col}"));
    &rows[row][c]
}

#[test]
fn solve_one_step_reflected_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["solve", "--dump-tree"], Some(&fixture("one_step.toml")), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&dir.path().join("solution.csv"));
    assert_eq!(cell(&rows, 1, "y"), "0.5");
    assert_eq!(cell(&rows, 1, "dk"), "0.3");
    assert_eq!(read_csv(&dir.path().join("tree.csv")).len(), 4);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"config_sha256\""));
    assert!(manifest.contains("solution.csv"));
}

#[test]
fn snell_gap_is_zero_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["snell"], Some(&fixture("one_step.toml")), dir.path());
    assert!(o.status.success());
    let rows = read_csv(&dir.path().join("oracle.csv"));
    assert_eq!(cell(&rows, 1, "gap"), "0.0");
    assert_eq!(cell(&rows, 1, "rules"), "2");
}

#[test]
fn compensator_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["validate"], Some(&fixture("bad_delta.toml")), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CompensatorOutOfRange"));
}

#[test]
fn plotdata_on_empty_dir_reports_missing_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["plotdata"], None, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("MissingResults"));
}

#[test]
fn ladder_plotdata_gap_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    assert!(rbsde(&["ladder"], Some(&fixture("entropic.toml")), dir.path()).status.success());
    assert!(rbsde(&["plotdata"], None, dir.path()).status.success());
    let rows = read_csv(&dir.path().join("plotdata/ladder_convergence.csv"));
    let gaps: Vec<f64> = (1..rows.len()).map(|r| cell(&rows, r, "gap").parse().unwrap()).collect();
    assert_eq!(gaps.len(), 6);
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    assert!(gaps[0] > 0.0);
}

#[test]
fn price_writes_one_boundary_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["price"], Some(&fixture("american_put.toml")), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_csv(&dir.path().join("boundary.csv")).len(), 1 + 2);
    let pricing = read_csv(&dir.path().join("pricing.csv"));
    let eu: f64 = cell(&pricing, 1, "value").parse().unwrap();
    let am: f64 = cell(&pricing, 2, "value").parse().unwrap();
    assert!(am >= eu);
    assert!(rbsde(&["plotdata"], None, dir.path()).status.success());
    assert_eq!(read_csv(&dir.path().join("plotdata/exercise_boundary.csv")).len(), 3);
}

#[test]
fn checks_pass_with_exact_scheme_and_fail_with_exit_3_otherwise() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["check"], Some(&fixture("entropic.toml")), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let checks = read_csv(&dir.path().join("checks.csv"));
    assert!(checks.len() > 20);
    assert!((1..checks.len()).all(|r| cell(&checks, r, "verdict") != "fail"));

    let dir = tempfile::tempdir().unwrap();
    let o = rbsde(&["check"], Some(&fixture("implicit_bound.toml")), dir.path());
    assert_eq!(o.status.code(), Some(3));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("check_failed"));
}

#[test]
fn reruns_are_byte_identical_and_hash_tracks_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(rbsde(&["check"], Some(&fixture("entropic.toml")), d.path()).status.success());
    }
    for f in ["checks.csv", "battery.csv", "bound_margins.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let hash = |d: &Path| {
        let m: String = std::fs::read_to_string(d.join("manifest.json")).unwrap();
        m.lines().find(|l| l.contains("config_sha256")).unwrap().to_string()
    };
    assert_eq!(hash(a.path()), hash(b.path()));

    let edited = a.path().join("edited.toml");
    let text = std::fs::read_to_string(fixture("entropic.toml")).unwrap();
    std::fs::write(&edited, text.replace("lambda = 1.0", "lambda = 1.5")).unwrap();
    let c = tempfile::tempdir().unwrap();
    assert!(rbsde(&["solve"], Some(&edited), c.path()).status.success());
    assert_ne!(hash(a.path()), hash(c.path()));
}

#[test]
fn seed_is_required_for_sampling_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("noseed.toml");
    let text = std::fs::read_to_string(fixture("one_step.toml")).unwrap();
    std::fs::write(&cfg, text.replace("seed = 1\n", "")).unwrap();
    let o = rbsde(&["validate"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert!(rbsde(&["validate", "--seed", "4"], Some(&cfg), dir.path()).status.success());
}

#[test]
fn unknown_expression_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(fixture("one_step.toml")).unwrap();
    std::fs::write(&cfg, text.replace("terminal = \"jumps\"", "terminal = \"jumpz\"")).unwrap();
    let o = rbsde(&["solve"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("jumpz"));
}
