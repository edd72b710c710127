// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn apl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apl"))
        .args(args)
        .env_remove("APL_LOG")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Little-endian f32 payload of one tensor in a checkpoint, read straight
/// from the file layout (8-byte header length, JSON header, data).
fn tensor(path: &Path, name: &str) -> Vec<f32> {
    let bytes = std::fs::read(path).unwrap();
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    let off = &header[name]["data_offsets"];
    let (a, b) = (off[0].as_u64().unwrap() as usize, off[1].as_u64().unwrap() as usize);
    bytes[8 + n + a..8 + n + b]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn toy_lab_delta_trace_prune_merge() {
    let dir = tempfile::tempdir().unwrap();
    let lab = dir.path().join("lab");
    let o = apl(&["toy-train", "--out", s(&lab), "--tasks", "2", "--angles", "0,90"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (base, fine) = (lab.join("base.safetensors"), lab.join("task0.safetensors"));

    let d = dir.path().join("d.safetensors");
    let o = apl(&["delta", "--base", s(&base), "--fine", s(&fine), "--out", s(&d)]);
    assert_eq!(o.status.code(), Some(0));
    for name in ["layer1.weight", "layer3.bias"] {
        let (b, f, got) = (tensor(&base, name), tensor(&fine, name), tensor(&d, name));
        for i in 0..got.len() {
            assert_eq!(got[i], (f[i] as f64 - b[i] as f64) as f32);
        }
    }

    let imp = dir.path().join("imp.json");
    let batch = lab.join("task0.batch.json");
    let o = apl(&["trace", "--base", s(&base), "--fine", s(&fine), "--batch", s(&batch), "--out", s(&imp)]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&imp).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 3);

    let p = dir.path().join("p.safetensors");
    let o = apl(&[
        "prune", "--base", s(&base), "--fine", s(&fine), "--out", s(&p), "--method", "apl-linear",
        "--provider", "file", "--importance", s(&imp), "--ratio", "0.5", "--epsilon", "0.1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let m = dir.path().join("m.safetensors");
    let o = apl(&["--threads", "2", "merge", "--recipe", s(&lab.join("recipe.toml")), "--out", s(&m)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("m.safetensors.report.json");
    assert!(report.exists());
    let o = apl(&["report", "--run", s(&report)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("task1"));
}

#[test]
fn missing_recipe_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = dir.path().join("out.safetensors");
    let o = apl(&["merge", "--recipe", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing.toml") && err.contains("[load]"), "{err}");
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(apl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(apl(&[]).status.code(), Some(1));
    assert_eq!(apl(&["bench", "--ratios", "x"]).status.code(), Some(1));
    assert_eq!(apl(&["prune", "--base", "a", "--fine", "b", "--out", "c", "--method", "apl-tanh", "--ratio", "0.5"]).status.code(), Some(1));
    assert_eq!(apl(&["--help"]).status.code(), Some(0));
    assert_eq!(apl(&["--version"]).status.code(), Some(0));
}

#[test]
fn invalid_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let imp = dir.path().join("imp.json");
    std::fs::write(&imp, "{\"version\": 7}").unwrap();
    let o = apl(&["calibrate", "--importance", s(&imp), "--ratio", "0.99", "--epsilon", "0.05", "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[calibrate]"));
}

#[test]
fn bench_csv_rows_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = apl(&["bench", "--tasks", "2", "--ratios", "0.9,0.99,0.995", "--seeds", "5", "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("version,task,method,ratio,seed,accuracy"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3 * 5 * 3);

    let mut mean: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r[3] == "0.995") {
        let e = mean.entry(r[2]).or_default();
        e.0 += r[5].parse::<f64>().unwrap();
        e.1 += 1.0;
    }
    let m = |k: &str| mean[k].0 / mean[k].1;
    assert!(m("apl-linear") >= m("dare") && m("dare") >= m("magnitude"), "{mean:?}");

    let o = apl(&["report", "--csv", s(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0.995"));
}
