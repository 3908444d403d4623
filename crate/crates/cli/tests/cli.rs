use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_openexposure"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn simulate(name: &str, dir: &Path) {
    let out = bin().arg("simulate").arg("--scenario").arg(scenario(name)).arg("--out").arg(dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_small(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    let text = format!(
        "seed = 3\nagents = 10\nduration = 288\nkey_bits = 512\n\n[[contacts]]\nat = 20\nduration = 2\nagents = [0, 1]\n\n[[reporters]]\nagent = 0\ntest_at = 60\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn keygen_is_deterministic_with_a_seed() {
    let run = || bin().args(["keygen", "--miid", "LAB-9", "--bits", "512", "--seed", "4"]).output().unwrap();
    let (a, b) = (run(), run());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let key = stdout_json(&a);
    assert_eq!(key["miid"], "LAB-9");
    assert_eq!(key["bits"], 512);
    assert_eq!(key["e"], "10001");

    let bad = bin().args(["keygen", "--miid", "NAME-TOO-LONG"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn honest_simulation_audits_clean_and_verifies() {
    let tmp = TempDir::new().unwrap();
    let scenario = write_small(tmp.path(), "");
    let out_dir = tmp.path().join("run");
    let sim = bin().arg("simulate").arg("--scenario").arg(&scenario).arg("--seed").arg("9").env("OPENEXPOSURE_OUT_DIR", &out_dir).output().unwrap();
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let summary = stdout_json(&sim);
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["recall"], 1.0);

    let audit = bin().arg("audit").arg("--trace").arg(&out_dir).output().unwrap();
    assert_eq!(audit.status.code(), Some(0));
    assert_eq!(stdout_json(&audit)["verdict"], "clean");

    let publication = out_dir.join("publications/epoch-000000.bin");
    let verify = bin().arg("verify").arg("--publication").arg(&publication).arg("--chain").arg(out_dir.join("chain.json")).output().unwrap();
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stdout));
    assert_eq!(stdout_json(&verify)["valid"], true);

    let matched = bin()
        .arg("match")
        .arg("--phone-state")
        .arg(out_dir.join("phones/phone-0001.json"))
        .arg("--publications")
        .arg(out_dir.join("publications"))
        .output()
        .unwrap();
    assert!(matched.status.success(), "{}", String::from_utf8_lossy(&matched.stderr));
    assert_eq!(stdout_json(&matched)["notifications"].as_array().unwrap().len(), 1);
}

#[test]
fn tampered_publication_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let scenario = write_small(tmp.path(), "");
    let out_dir = tmp.path().join("run");
    let sim = bin().arg("simulate").arg("--scenario").arg(&scenario).arg("--out").arg(&out_dir).output().unwrap();
    assert!(sim.status.success());
    let publication = out_dir.join("publications/epoch-000000.bin");
    let mut bytes = std::fs::read(&publication).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let copy = out_dir.join("publications/tampered.bin");
    std::fs::write(&copy, bytes).unwrap();
    let verify = bin().arg("verify").arg("--publication").arg(&copy).arg("--chain").arg(out_dir.join("chain.json")).output().unwrap();
    assert_eq!(verify.status.code(), Some(2));
    assert_eq!(stdout_json(&verify)["valid"], false);
}

#[test]
fn detected_threat_exits_two() {
    let tmp = TempDir::new().unwrap();
    simulate("fake-report.toml", tmp.path());
    let audit = bin().args(["audit", "--compact", "--trace"]).arg(tmp.path()).output().unwrap();
    assert_eq!(audit.status.code(), Some(2));
    let report = stdout_json(&audit);
    assert_eq!(report["verdict"], "detected");
    let e = report["findings"].as_array().unwrap().iter().find(|f| f["check"] == "E").unwrap();
    assert_eq!(e["threat"], "3a");
    assert_eq!(e["verdict"], "detected");
}

#[test]
fn errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let audit = bin().arg("audit").arg("--trace").arg(tmp.path().join("missing")).output().unwrap();
    assert_eq!(audit.status.code(), Some(1));
    let scenario = write_small(tmp.path(), "\n[[threats]]\nthreat = \"9z\"\ntarget = 0\nat = 1\n");
    let sim = bin().arg("simulate").arg("--scenario").arg(&scenario).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(sim.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&sim.stderr).contains("9z"));
}
