use lane_emden_lab::cli::{build_manifest, Manifest, Settings};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--p", "1.5", "--rmax", "1.6", "--n", "128"];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lane-emden"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn optimize_then_spectrum_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(dir.path(), &[&["optimize"], SMALL].concat());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stderr(&first).contains("cache miss"));
    let second = run(dir.path(), &[&["spectrum", "--m-max", "2", "--eigs", "2"], SMALL].concat());
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert!(stderr(&second).contains("cache hit"));
    let spec = json(&dir.path().join("spectrum.json"));
    assert!(spec["kappa"].as_f64().unwrap() > 0.0);
    assert!(spec["bs_margin"].as_f64().unwrap() > 0.0);
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&["optimize"], SMALL].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = m.files.iter().map(|e| e.path.as_str()).collect();
    assert_eq!(names, ["optimizer.csv", "optimizer.json", "potential.csv"]);
    for e in &m.files {
        let hex: String = Sha256::digest(fs::read(dir.path().join(&e.path)).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(e.sha256, hex, "{}", e.path);
    }
    assert_eq!(build_manifest(dir.path()).unwrap(), m);
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [&["stability", "--directions", "2", "--seed", "5"], SMALL].concat();
    assert_eq!(run(a.path(), &args).status.code(), Some(0));
    assert_eq!(run(b.path(), &args).status.code(), Some(0));
    let ma = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("manifest.json")).unwrap());
    for name in ["stability.json", "stability_dir00.csv", "stability_dir01.csv", "stability_dilation.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn dilation_rows_are_flagged_as_zero_mode() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&["stability", "--directions", "1"], SMALL].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("stability_dilation.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",zero_mode")));
    let summary = json(&dir.path().join("stability.json"));
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["flagged"], false);
    assert_eq!(rows[1]["name"], "dilation");
    assert_eq!(rows[1]["flagged"], true);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\np = 1.7\nrmax = 1.6\nn = 128\nsigma = 0.4\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&out, &["flow", "--config", cfg.to_str().unwrap(), "--p", "1.5", "--t-end", "0.02"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let flow = json(&out.join("flow.json"));
    assert_eq!(flow["config"]["params"]["p"], 1.5);
    assert_eq!(flow["config"]["sigma"], 0.4);
    assert_eq!(flow["config"]["n"], 128);
    assert_eq!(flow["config"]["t_end"], 0.02);
    assert!(flow["mass_drift"].as_f64().unwrap() < 1e-8);
    assert!(flow["max_energy_increase"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn config_parser_rejects_unknown_keys() {
    assert!(Settings::parse("p = 1.5\nn=64 # trailing\n\n").is_ok());
    assert!(Settings::parse("q = 1.5").is_err());
    assert!(Settings::parse("just words").is_err());
}

#[test]
fn precondition_violation_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["constants", "--p", "1.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p_c"));
    let o = run(dir.path(), &["optimize", "--n", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["optimize", "--p", "2", "--rmax", "1.1", "--n", "32"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "").unwrap();
    let o = run(dir.path(), &[&["optimize"], SMALL].concat());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
    assert!(!dir.path().join("optimizer.json").exists());
}

#[test]
fn scattering_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&["scattering", "--t-slices", "40", "--r-points", "11"], SMALL].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = json(&dir.path().join("scattering.json"));
    assert_eq!(rep["s"], 1.0);
    assert!(rep["residual"].as_f64().unwrap() <= 1e-8);
    assert!(rep["max_monotonicity_violation"].as_f64().unwrap() <= 1e-6);
    assert!(rep["origin_margin"].as_f64().unwrap() > 0.0);
    let h = fs::read_to_string(dir.path().join("hamiltonian.csv")).unwrap();
    assert_eq!(h.lines().next(), Some("r,value"));
}

#[test]
fn constants_report_has_regime() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &[&["constants"], SMALL].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let c = json(&dir.path().join("constants.json"));
    assert_eq!(c["regime"], "Subcritical");
    let a = c["a"].as_f64().unwrap();
    assert!((c["mu"].as_f64().unwrap() - a * (1.0 - 1.5 / (2.0 * 3.0 * 0.5))).abs() < 1e-5 * a);
}
