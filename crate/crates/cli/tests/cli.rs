//! End-to-end checks of the `lowalt` binary.

use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"{
  "experiment": "sweep-power",
  "grid": { "origin": [-6.0, -6.0, 40.0], "nx": 4, "ny": 4, "nz": 1, "dx": 3.0, "dy": 3.0, "dz": 3.0 },
  "system": {
    "n_bs": 4, "bs_height_m": 20.0, "bs_spacing_m": 140.0, "upa_side": 2, "center_freq_hz": 2.6e9,
    "n_subcarriers": 2, "bandwidth_hz": 2e7, "tx_power_dbm": 40.0, "noise_power_dbm": -110.0
  },
  "sweep": [30, 40]
}"#;

fn lowalt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lowalt")).args(args).output().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn run_sp_writes_records_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.json");
    std::fs::write(&spec, SMALL).unwrap();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = lowalt(&["run-sp", "--spec", spec.to_str().unwrap(), "--trials", "10", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("manifest.json").is_file());
        assert_eq!(std::fs::read_dir(out.join("trials")).unwrap().count(), 10);
        outs.push(out);
    }
    assert_eq!(read_dir_sorted(&outs[0].join("trials")), read_dir_sorted(&outs[1].join("trials")));
    assert_eq!(
        std::fs::read(outs[0].join("manifest.json")).unwrap(),
        std::fs::read(outs[1].join("manifest.json")).unwrap()
    );

    let o = lowalt(&["report", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("run,experiment,"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn schema_errors_exit_nonzero_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"experiment":"sweep-power","sweep":[30],"n_trials":"many"}"#).unwrap();
    let out = dir.path().join("out");
    let o = lowalt(&["run-sp", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_trials"));
}
