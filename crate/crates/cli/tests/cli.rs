use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tap_core::btca::ClockDataset;
use tap_core::ue::calibrate_t0;
use tap_core::Duration;

fn tapsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapsim")).args(args).output().expect("spawn tapsim")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tapsim(&["--help"]).status.code(), Some(0));
    assert_eq!(tapsim(&["frobnicate"]).status.code(), Some(3));

    let missing = tapsim(&["run", "/nonexistent/scenario.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("file not found"));

    let garbage = tmp.path().join("bad.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(tapsim(&["run", garbage.to_str().unwrap()]).status.code(), Some(3));

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(tapsim(&["calibrate", empty.to_str().unwrap()]).status.code(), Some(3));

    let y = scenario("terminal_y");
    assert_eq!(tapsim(&["run", &y, "--set", "duration_s=-5"]).status.code(), Some(3));
    assert_eq!(tapsim(&["run", &y, "--set", "no_equals_sign"]).status.code(), Some(3));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let y = scenario("terminal_y");
    let args = |dir: &Path| vec!["run".to_string(), y.clone(), "--set".into(), "duration_s=30".into(), "--out".into(), dir.to_string_lossy().into()];
    let first = Command::new(env!("CARGO_BIN_EXE_tapsim")).args(args(a.path())).output().unwrap();
    let second = Command::new(env!("CARGO_BIN_EXE_tapsim")).args(args(b.path())).output().unwrap();
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let files = dir_contents(a.path());
    assert!(files.iter().any(|(n, _)| n == "summary.json"));
    assert!(files.iter().any(|(n, _)| n.ends_with("_offsets.csv")));
    assert_eq!(files, dir_contents(b.path()));
}

#[test]
fn seed_flag_changes_the_run() {
    let y = scenario("terminal_y");
    let a = tapsim(&["run", &y, "--set", "duration_s=10", "--seed", "5"]);
    let b = tapsim(&["run", &y, "--set", "duration_s=10", "--seed", "6"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn calibrate_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("errors.csv");
    let errs: Vec<i64> = (0..101).map(|i| (i * 7919 % 503) - 250 + 6700).collect();
    let mut text = String::from("t_s,error_ns\n");
    for (i, e) in errs.iter().enumerate() {
        text.push_str(&format!("{i},{e}\n"));
    }
    fs::write(&log, text).unwrap();
    let o = tapsim(&["calibrate", log.to_str().unwrap()]);
    assert!(o.status.success());
    let want = calibrate_t0(&errs.iter().map(|&e| Duration::from_ns(e)).collect::<Vec<_>>()).unwrap();
    let out = stdout(&o);
    assert!(out.lines().next().unwrap() == format!("t0 = {want}"), "{out}");
    assert!(out.contains("residual median = 0"), "{out}");
}

#[test]
fn btca_address_vector() {
    let o = tapsim(&["btca", "--addr", "0A1CB0DD", "172.16.0.0/16"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "172.16.135.119");
    assert_eq!(tapsim(&["btca", "--addr", "zz", "172.16.0.0/16"]).status.code(), Some(3));
}

#[test]
fn btca_tie_reports_coordination() {
    let tmp = tempfile::tempdir().unwrap();
    let clock = |id: &str| ClockDataset {
        id: id.into(),
        tap_level: 6,
        priority: 128,
        avg_rsrq: -10.0,
        tau_star: Duration::from_secs(8),
        allan_min: 1e-18,
        hops_to_mc: 1,
        offset_scale_variance: 1e-18,
        address: 0,
    };
    let path = tmp.path().join("sets.json");
    fs::write(&path, serde_json::to_string(&[clock("a"), clock("b")]).unwrap()).unwrap();
    let o = tapsim(&["btca", path.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tie_set"], serde_json::json!(["a", "b"]));
    assert!(v.get("coordination").is_some());
}

#[test]
fn allan_flags_one_argmin() {
    let tmp = tempfile::tempdir().unwrap();
    let y = scenario("terminal_y");
    assert!(tapsim(&["run", &y, "--set", "duration_s=120", "--out", tmp.path().to_str().unwrap()]).status.success());
    let offsets = tmp.path().join("ue_4601_offsets.csv");
    let o = tapsim(&["allan", offsets.to_str().unwrap(), "--accepted-only"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("tau_s,adev_variance,n,argmin"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 5);
    assert_eq!(rows.iter().filter(|l| l.ends_with(",*")).count(), 1);
}

#[test]
fn export_writes_plot_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tapsim(&["export", &scenario("terminal_g"), "--set", "duration_s=20", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    for name in ["errors.csv", "allan.csv", "boxplot.csv"] {
        let text = fs::read_to_string(tmp.path().join(name)).unwrap();
        assert!(text.lines().count() >= 2, "{name}");
    }
}

#[test]
fn attack_report_counts_attacker_frames() {
    let o = tapsim(&["attack", &scenario("attack_forwarding"), "--set", "attack.per_shot_offset_ns=300"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ue = &v["ues"][0];
    assert!(ue["attacked_frames"].as_u64().unwrap() > 0);
    assert_eq!(ue["attacked_accepted"], 0);
    assert_eq!(tapsim(&["attack", &scenario("terminal_y")]).status.code(), Some(3));
}
