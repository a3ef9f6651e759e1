use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const ANNULUS: &str = r#"
[domain]
family = "annulus"
r_inner = 0.5
r_outer = 1.0
n_radial = 4
n_angular = 32

[solver]
k = 6
"#;

/// A rectangle with S on the bottom only; its low spectrum is simple.
const RECTANGLE: &str = r#"
[domain]
family = "rectangle"
width = 1.7
height = 1.0
nx = 12
ny = 7
top = "W"

[solver]
k = 4
"#;

fn steklov(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steklov")).args(args).output().expect("binary runs")
}

fn run(dir: &Path, cmd: &str, config: &str, out: &str) -> Output {
    let cfg = dir.join(format!("{out}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(out);
    steklov(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn manifest(dir: &Path, run: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, &format!("{run}/manifest.json"))).unwrap()
}

#[test]
fn solve_on_annulus_reports_double_groups() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "solve", ANNULUS, "s");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let groups = read(dir.path(), "s/groups.csv");
    let mult: Vec<&str> = groups.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(&mult[..3], &["1", "2", "2"]);
    let m = manifest(dir.path(), "s");
    assert_eq!(m["status"], "success");
    let listed: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"spectrum.csv") && listed.contains(&"groups.csv"));
    for f in m["files"].as_array().unwrap() {
        let bytes = fs::read(dir.path().join("s").join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(bytes.len() as u64, f["bytes"].as_u64().unwrap());
    }
}

#[test]
fn invalid_variant_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{ANNULUS}\n[problem]\nvariant = \"P9\"\n");
    let o = run(dir.path(), "solve", &bad, "bad");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("P9"));
}

#[test]
fn mismatched_experiment_block_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{ANNULUS}\n[experiment]\nkind = \"simplify\"\n");
    assert_eq!(code(&run(dir.path(), "solve", &cfg, "m")), 2);
}

#[test]
fn zero_eigenpairs_gives_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ANNULUS.replace("k = 6", "k = 0");
    let o = run(dir.path(), "solve", &cfg, "z");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(dir.path(), "z/groups.csv").lines().count(), 1);
}

#[test]
fn minmax_trials_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{ANNULUS}\n[experiment]\nkind = \"solve\"\nminmax_trials = 20\n");
    let o = run(dir.path(), "solve", &cfg, "mm");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "mm/minmax.json")).unwrap();
    assert!(report["violations"].as_array().unwrap().is_empty());
}

#[test]
fn deriv_check_marks_constant_field_exact_with_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{ANNULUS}\n[experiment]\nkind = \"deriv-check\"\nsteps = [1e-2]\neigen_groups = 0\n\
         [[experiment.fields]]\nfamily = \"constant\"\nparams = {{ vx = 1.0, vy = -0.5 }}\n"
    );
    let o = run(dir.path(), "deriv-check", &cfg, "d");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lemma = read(dir.path(), "d/lemma.csv");
    let mut lines = lemma.lines();
    assert_eq!(lines.next().unwrap(), "field,form,step,residual,exact");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn deriv_check_defaults_reach_second_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "deriv-check", ANNULUS, "dd");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path(), "dd");
    assert!(m["summary"]["min_order"].as_f64().unwrap() >= 1.9);
    assert!(read(dir.path(), "dd/eigen_fd.csv").lines().count() > 1);
}

#[test]
fn simplify_on_simple_spectrum_takes_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{RECTANGLE}\n[experiment]\nkind = \"simplify\"\ncount = 3\n");
    let o = run(dir.path(), "simplify", &cfg, "r");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace: serde_json::Value = serde_json::from_str(&read(dir.path(), "r/trace.json")).unwrap();
    assert_eq!(trace["steps"].as_array().unwrap().len(), 0);
    assert_eq!(trace["termination"], "converged");
}

#[test]
fn split_without_multiple_eigenvalue_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "split", RECTANGLE, "ns");
    assert_eq!(code(&o), 1);
    assert_eq!(manifest(dir.path(), "ns")["status"], "inconclusive");
}

#[test]
fn split_opens_first_double_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "split", ANNULUS, "sp");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&read(dir.path(), "sp/split.json")).unwrap();
    assert_eq!(split["target"], serde_json::json!([1, 2]));
    assert!(split["support_violation"].as_f64().unwrap() < 1e-12);
    let slopes: Vec<f64> =
        split["predicted_slopes"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(slopes[1] - slopes[0] > 0.0);
}

#[test]
fn w_scan_requires_volume_mass() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), "w-scan", ANNULUS, "w")), 2);
    let p2 = format!("{ANNULUS}\n[problem]\nvariant = \"P2\"\n");
    assert_eq!(code(&run(dir.path(), "w-scan", &p2, "w2")), 0);
}

#[test]
fn oracle_compare_rejects_rectangles() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), "oracle-compare", RECTANGLE, "o")), 2);
}

#[test]
fn report_needs_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = steklov(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_on_solve_has_only_spectrum_sections() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), "solve", ANNULUS, "s")), 0);
    let o = steklov(&["report", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(dir.path(), "s/summary.md");
    assert!(summary.contains("### Eigenvalue groups") && summary.contains("### Spectrum"));
    assert!(!summary.contains("### Simplification") && !summary.contains("### Oracle"));
}

#[test]
fn outputs_are_byte_stable_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("seed = 7\n{ANNULUS}\n[experiment]\nkind = \"simplify\"\ncount = 4\n");
    assert_eq!(code(&run(dir.path(), "simplify", &cfg, "a")), 0);
    assert_eq!(code(&run(dir.path(), "simplify", &cfg, "b")), 0);
    let (a, b) = (manifest(dir.path(), "a"), manifest(dir.path(), "b"));
    assert_eq!(a["input_hash"], b["input_hash"]);
    assert_eq!(a["files"], b["files"]);
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("locked");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "1").unwrap();
    let o = run(dir.path(), "solve", ANNULUS, "locked");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn default_output_root_uses_the_input_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, ANNULUS).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_steklov"))
        .args(["solve", "--config", cfg.to_str().unwrap()])
        .env("STEKLOV_OUT_ROOT", dir.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let entries: Vec<String> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].starts_with("solve-") && entries[0].len() == "solve-".len() + 12);
}
