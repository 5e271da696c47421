use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dyadic-lab"));
    c.env_remove("DYADIC_LAB_SEED");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn a2_of_constant_power_weight_is_one() {
    let out = bin().args(["a2", "--family", "power", "--alpha", "0", "--N", "6"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["constant"], 1.0);
}

#[test]
fn a2_of_explicit_two_leaf_weight() {
    let out = bin().args(["a2", "--explicit", "2,0.5", "--N", "1"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["constant"], 1.5625);
}

#[test]
fn malformed_flags_exit_two() {
    let out = bin().args(["a2", "--alpha", "abc", "--N", "4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["a2", "--alpha", "0.5", "--N", "40"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["a2", "--family", "cascade", "--N", "4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_verify_passes() {
    let dir = scratch("verify_default");
    let out = bin().arg("verify").arg("--output").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 11);
}

#[test]
fn selected_check_yields_one_entry() {
    let dir = scratch("verify_one");
    let cfg = dir.join("config.json");
    fs::write(
        &cfg,
        r#"{"model":{"d":1,"N":7},"shift":{"type":"random","m":1,"n":2,"seed":4},
            "weights":{"family":"cascade","seed":3,"params":[3.0,8.0]},"checks":["decomposition"]}"#,
    )
    .unwrap();
    let out = bin().arg("verify").arg(&cfg).arg("--output").arg(&dir).output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "decomposition");
}

#[test]
fn unknown_config_field_exits_two() {
    let dir = scratch("bad_config");
    let cfg = dir.join("config.json");
    fs::write(&cfg, r#"{"model":{"d":1,"N":4},"shift":{"type":"petermichl"},"weights":{"family":"power","params":[0.1]},"extra":1}"#).unwrap();
    let out = bin().arg("verify").arg(&cfg).arg("--output").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_sweep_exits_two() {
    let dir = scratch("sweep_empty");
    let cfg = dir.join("config.json");
    fs::write(&cfg, r#"{"model":{"d":1,"N":6},"shift":{"type":"petermichl"},"weights":{"family":"power","params":[]}}"#).unwrap();
    let out = bin().arg("sweep").arg(&cfg).arg("--output").arg(dir.join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("out").join("sweep.csv").exists());
}

#[test]
fn repeated_sweeps_are_byte_identical() {
    let dir = scratch("sweep_repeat");
    let cfg = dir.join("config.json");
    fs::write(
        &cfg,
        r#"{"model":{"d":2,"N":4},"shift":{"type":"haar_multiplier"},"weights":{"family":"cascade","seed":9,"params":[2.0,5.0,20.0]}}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.join(name);
        let st = bin().arg("sweep").arg(&cfg).arg("--output").arg(&out).output().unwrap();
        assert!(st.status.success());
        fs::read(out.join("sweep.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(String::from_utf8(a).unwrap().starts_with("param,a2,norm,kappa,d,N,shift_id,seed,residual"));
    for f in ["fit.json", "sweep.json", "plot.svg"] {
        assert!(dir.join("a").join(f).exists());
    }
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = scratch("seed_env");
    let out = bin()
        .env("DYADIC_LAB_SEED", "77")
        .args(["verify", "--checks", "weights", "--output"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"][0], 77);
}

#[test]
fn build_shift_writes_descriptor_and_matrix() {
    let dir = scratch("build_shift");
    let out = bin()
        .args(["build-shift", "--type", "random", "--m", "2", "--n", "1", "--residue", "1", "--seed", "5", "--N", "6"])
        .arg("--output")
        .arg(dir.join("shift.json"))
        .arg("--matrix")
        .arg(dir.join("shift.bin"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("shift.json")).unwrap()).unwrap();
    assert_eq!(j["type"], "random");
    let bytes = fs::read(dir.join("shift.bin")).unwrap();
    assert_eq!(bytes.len(), 8 + 64 * 64 * 8);
}

#[test]
fn decompose_then_report() {
    let dir = scratch("decompose");
    let out = bin().arg("decompose").arg("--N").arg("7").arg("--output").arg(&dir).output().unwrap();
    assert!(out.status.success());
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("decomposition.json")).unwrap()).unwrap();
    assert!(j["identity_error"].as_f64().unwrap() <= 1e-10);
    for k in ["total", "U", "Vstar", "W", "V", "Vtilde", "I", "II"] {
        assert!(j["report"][k].is_number(), "{k}");
    }
    let out = bin().arg("report").arg(&dir).output().unwrap();
    assert!(out.status.success());
    let out = bin().arg("report").arg(dir.join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
