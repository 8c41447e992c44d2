use std::path::Path;
use std::process::{Command, Output};

fn nkn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nkn")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_line(o: &Output) -> serde_json::Value {
    let s = stdout(o);
    let line = s.lines().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON in {s:?}"));
    serde_json::from_str(line).unwrap()
}

fn write_series(dir: &Path) -> std::path::PathBuf {
    let mut s = String::from("x,y\n");
    for i in 0..30 {
        let x = i as f64 * 0.2;
        s.push_str(&format!("{x},{}\n", (2.0 * x).sin() + 0.1 * x));
    }
    let p = dir.join("series.csv");
    std::fs::write(&p, s).unwrap();
    p
}

#[test]
fn help_lists_every_subcommand() {
    let d = tempfile::tempdir().unwrap();
    let h = stdout(&nkn(&["--help"], d.path()));
    for c in ["fit", "predict", "extrapolate", "bo", "texture", "gradcheck", "compile-pwp", "synth"] {
        assert!(h.contains(c), "{c} missing from help");
    }
    for f in ["--config", "--seed", "--out", "--threads"] {
        assert!(h.contains(f), "{f} missing from help");
    }
}

#[test]
fn fit_then_predict() {
    let d = tempfile::tempdir().unwrap();
    let data = write_series(d.path());
    let out = d.path().join("m");
    let o = nkn(
        &["fit", "--data", data.to_str().unwrap(), "--preset", "rbf", "--iters", "50", "--lr", "0.05", "--out", out.to_str().unwrap()],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_line(&o);
    assert!(v["final_lml"].as_f64().unwrap() > v["initial_lml"].as_f64().unwrap());
    let o = nkn(
        &["predict", "--model", out.join("model.json").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_line(&o);
    assert_eq!(v["n"], 30);
    assert!(v["rmse"].as_f64().unwrap() < 0.5);
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 31);
}

#[test]
fn extrapolate_writes_curve_and_summary() {
    let d = tempfile::tempdir().unwrap();
    let data = write_series(d.path());
    let o = nkn(
        &["extrapolate", "--data", data.to_str().unwrap(), "--preset", "rbf", "--iters", "20", "--out", "res"],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = std::fs::read_dir(d.path().join("res/extrapolate")).unwrap().next().unwrap().unwrap().path();
    let curve = std::fs::read_to_string(run.join("curve_rbf_s0.csv")).unwrap();
    assert!(curve.starts_with("x,mean,std,truth,flag"));
    let flags: Vec<&str> = curve.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags.iter().filter(|f| **f == "1").count(), 20);
    assert_eq!(flags.len(), 30);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], "nkn-summary/1");
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn gradcheck_passes_for_default6() {
    let d = tempfile::tempdir().unwrap();
    let o = nkn(&["gradcheck", "--preset", "default6", "--n", "12"], d.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(json_line(&o)["max_rel_err"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn compile_pwp_respects_width_bound() {
    let d = tempfile::tempdir().unwrap();
    let o = nkn(&["compile-pwp", "--expr", "0.3*k0*k1^2 + k2^3", "--primitives", "rbf,per,lin"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec["schema"], "nkn-spec/1");
    assert!(String::from_utf8_lossy(&o.stderr).contains("bound 12"));
}

#[test]
fn synth_writes_fig1_data() {
    let d = tempfile::tempdir().unwrap();
    let o = nkn(&["synth", "--kind", "fig1_2d", "--out", "s"], d.path());
    assert!(o.status.success());
    assert_eq!(json_line(&o)["n_train"], 100);
    assert!(d.path().join("s/fig1_2d_train.csv").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let o = nkn(&["synth", "--kind", "nope"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown synthetic dataset"));
    let o = nkn(&["fit", "--data", "missing.csv"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let o = nkn(&["--threads", "0", "synth", "--kind", "fig1_2d"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_kind_must_match_subcommand() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(&cfg, r#"{"name": "t", "task": {"kind": "bo", "benchmark": "stybtang"}}"#).unwrap();
    let o = nkn(&["--config", cfg.to_str().unwrap(), "texture"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not texture"));
}
