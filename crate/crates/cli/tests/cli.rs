use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn glrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glrt")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL_SIM: &str = r#"{
  "scenario": {
    "kind": "families",
    "g": { "family": "gaussian", "point": [0.0] },
    "h": { "family": "gaussian", "point": [1.0] }
  },
  "n_list": [4, 8, 12],
  "decay": { "reps": 3000 },
  "seed": 2
}"#;

fn write_temp(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn gaussian_pair_index() {
    let out = glrt(&["index", "--config", &config("gaussian_pair.json")]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["rho"].as_f64().unwrap(), 0.125);
    assert_eq!(v["z_star"].as_f64().unwrap(), 0.5);
    assert_eq!(v["provenance"]["command"], "index");
    assert_eq!(v["provenance"]["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn raw_output_keeps_full_precision() {
    let rounded = json(&glrt(&["index", "--config", &config("example2.json")]));
    let raw = json(&glrt(&["index", "--config", &config("example2.json"), "--raw"]));
    let (r, f) = (rounded["rho"].as_f64().unwrap(), raw["rho"].as_f64().unwrap());
    assert!((r - f).abs() <= 5e-6 * f);
    let mantissa = format!("{r:e}");
    let digits = mantissa.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
    assert!(digits <= 6, "{mantissa}");
    assert!(format!("{f}").len() > format!("{r}").len());
}

#[test]
fn unknown_keys_and_missing_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_temp(
        dir.path(),
        "bad.json",
        r#"{ "g": { "family": "gaussian", "point": [0.0], "colour": 1 }, "h": { "family": "gaussian", "point": [1.0] } }"#,
    );
    let out = glrt(&["index", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = glrt(&["index", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let unknown = write_temp(dir.path(), "fam.json", r#"{ "g": { "family": "cauchy" }, "h": { "family": "gaussian" } }"#);
    assert_eq!(glrt(&["index", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn contour_writes_a_commented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("grid.csv");
    let out = glrt(&["contour", "--config", &config("example1_contour.json"), "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(out_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# glrt "));
    let header = lines.next().unwrap();
    assert!(header.starts_with("theta\\gamma,0.5,"));
    assert_eq!(header.split(',').count(), 27);
    assert_eq!(lines.count(), 26);
}

#[test]
fn simulate_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_temp(dir.path(), "sim.json", SMALL_SIM);
    let run = |threads: &str| {
        let out = glrt(&["simulate", "--config", cfg.to_str().unwrap(), "--threads", threads, "--raw"]);
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn simulate_writes_the_fit_next_to_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_temp(dir.path(), "sim.json", SMALL_SIM);
    let csv = dir.path().join("decay.csv");
    let out = glrt(&["simulate", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--seed", "9"]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.lines().next().unwrap().ends_with("seed=9"));
    assert_eq!(text.lines().nth(1).unwrap(), "n,p_hat,std_err,ess,method");
    assert_eq!(text.lines().count(), 5);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("decay.fit.json")).unwrap()).unwrap();
    // P(Σ(xᵢ − ½) > 0) = Φ(−√n/2) decays at about −1/8 per observation
    let slope = fit["fit"]["slope"].as_f64().unwrap();
    assert!(slope < -0.125 && slope > -0.25, "{slope}");
    assert_eq!(fit["provenance"]["seed"], 9);
}

#[test]
fn joint_model_reports_rate_and_first_order_conditions() {
    let out = glrt(&["glm", "--config", &config("example3.json")]);
    assert!(out.status.success());
    let v = json(&out);
    assert!((v["rate"]["rho"].as_f64().unwrap() - 0.4546).abs() < 1e-3);
    assert_eq!(v["euler"]["passed"], true);
}
