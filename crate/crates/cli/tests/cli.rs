use std::path::Path;
use std::process::Command;

fn jumplab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_jumplab"))
        .args(args)
        .env_remove("JUMPLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const ISOTROPIC: &str = r#"{"field": {"family": "isotropic_stable", "d": 1, "alpha": 1.0}, "seed": 7,
  "simulate": {"paths": 500, "t_max": 0.5, "write_paths": true},
  "heatkernel": {"window": 4.0, "times": [0.1, 0.5]},
  "forms": {"functions": 3, "support": 3},
  "clt": {"n_list": [2, 4], "paths": 2000}}"#;

#[test]
fn validate_isotropic_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    let out = dir.path().join("out");
    let o = jumplab(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("validation.json")).unwrap();
    assert!(report.contains("\"A3\"") && report.contains("\"A4\""));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn validate_isotropic_2d_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"field": {"family": "isotropic_stable", "d": 2, "alpha": 1.0}}"#);
    let o = jumplab(&["validate", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_axes_fails_with_witnesses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"field": {"family": "axes_counterexample", "d": 2, "alpha": 1.0},
            "validate": {"lo": [-2, -2], "hi": [2, 2]}}"#,
    );
    let out = dir.path().join("out");
    let o = jumplab(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("validation.json")).unwrap()).unwrap();
    let checks = v["report"]["checks"].as_array().unwrap();
    for name in ["A3", "A4"] {
        let c = checks.iter().find(|c| c["assumption"] == name).unwrap();
        assert_eq!(c["passed"], false, "{name}");
        assert!(c["witness"].is_object(), "{name}");
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "check_failed");
}

#[test]
fn malformed_and_unknown_fields_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", "{\"field\": ");
    let o = jumplab(&["build", "--config", &bad, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    let unknown = write_config(
        dir.path(),
        "u.json",
        r#"{"field": {"family": "isotropic_stable", "d": 1, "alpha": 1.0}, "sedd": 3}"#,
    );
    let o = jumplab(&["build", "--config", &unknown, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sedd"));
}

#[test]
fn resource_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"field": {"family": "isotropic_stable", "d": 1, "alpha": 1.0}, "limits": {"max_paths": 10}}"#,
    );
    let o = jumplab(&["simulate", "--config", &cfg, "--paths", "11", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unwritable_output_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = jumplab(&["build", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn manifest_only_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    let out = dir.path().join("out");
    let o = jumplab(&["--manifest-only", "simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!out.join("summary.csv").exists());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["dry_run"], true);
    assert_eq!(m["wall_time_seconds"], 0.0);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    for cmd in ["build", "simulate", "heatkernel", "forms", "clt"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        let o = jumplab(&[cmd, "--config", &cfg, "--out", a.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let o = jumplab(&["--threads", "1", cmd, "--config", &cfg, "--out", b.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        assert_eq!(tree(&a), tree(&b), "{cmd}");
    }
    // Rerunning the emitted config reproduces the tree.
    let emitted = dir.path().join("simulate-a").join("config.json");
    let c = dir.path().join("simulate-c");
    let o = jumplab(&["simulate", "--config", emitted.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(tree(&dir.path().join("simulate-a")), tree(&c));
}

#[test]
fn csv_columns_and_hash_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    let out = dir.path().join("o");
    let expect = [
        ("simulate", "summary.csv", "statistic,value,ci_low,ci_high"),
        ("heatkernel", "heatkernel.csv", "t,x0,y0,p,error_bound"),
        ("forms", "forms.csv", "function_id,form_kind,value,error_bound,ratio,pass"),
        ("clt", "clt.csv", "n,ks,cf_dist,ci,seconds"),
    ];
    for (cmd, file, header) in expect {
        let o = jumplab(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config_sha256: "));
        assert_eq!(lines.next().unwrap(), header);
    }
    // Binary event log: 16 bytes per record in d = 1, one start record per path.
    let bytes = std::fs::read(out.join("paths.bin")).unwrap();
    assert_eq!(bytes.len() % 16, 0);
    assert!(bytes.len() >= 16 * 500);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", ISOTROPIC);
    let out = dir.path().join("o");
    let o = jumplab(&[
        "heatkernel", "--config", &cfg, "--out", out.to_str().unwrap(), "--times", "0.25", "--rho", "2", "--window", "1",
        "--source", "-0.5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("heatkernel.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.starts_with("0.25,-0.5,")));
}
