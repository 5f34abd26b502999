use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn skpc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skpc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn skpc")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = skpc(dir, args);
    assert!(
        out.status.success(),
        "skpc {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Header plus rows as maps from column name to cell.
fn read_csv(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .zip(l.split(','))
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

#[test]
fn verify_all_ones_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify", "--seed", "4"]);
    let dev: f64 = out
        .split_whitespace()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .expect("deviation in output");
    assert!(dev <= 1e-4, "{out}");
    assert!(out.contains("PASS"));
}

#[test]
fn run_writes_outputs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "f.fseq", "--seed", "1"]);
    ok(d, &["init-model", "--out", "m.skpc", "--seed", "2"]);
    let out = ok(
        d,
        &[
            "run", "--model", "m.skpc", "--frames", "f.fseq", "--gate", "output-norm", "--epsilon", "15e-5",
            "--reset-period", "4", "--reps", "1", "--out-dir", "o",
        ],
    );
    assert!(out.contains("MAC reduction"));
    for f in ["outputs.fseq", "summary.csv", "frames.csv", "firing.csv"] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }
    let frames = read_csv(&d.join("o/frames.csv"));
    assert_eq!(frames.len(), 8);
    let refs: Vec<bool> = frames.iter().map(|r| r["reference"] == "true").collect();
    assert_eq!(refs, [true, false, false, false, true, false, false, false]);
    let summary = read_csv(&d.join("o/summary.csv"));
    assert!(summary[0]["mac_reduction"].parse::<f64>().unwrap() >= 1.0);

    let table = ok(d, &["report", "o/summary.csv"]);
    assert!(table.contains("mac_reduction") && table.contains("-----"));
}

#[test]
fn bench_static_video_has_zero_effective_macs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "still.fseq", "--squares", "0", "--frame-count", "4"]);
    ok(
        d,
        &[
            "bench", "--frames", "still.fseq", "--gate", "input-norm,output-norm", "--epsilon", "0,1e-3,1e-2,1e-1",
            "--reset-period", "inf", "--no-camera", "--reps", "1", "--out-dir", "b",
        ],
    );
    let rows = read_csv(&d.join("b/frames.csv"));
    assert_eq!(rows.len(), 2 * 4 * 4);
    let mut checked = 0;
    for r in rows.iter().filter(|r| r["reference"] == "false") {
        if r["epsilon"].parse::<f64>().unwrap() > 0.0 {
            assert_eq!(r["effective_macs"], "0", "{r:?}");
            checked += 1;
        }
    }
    assert_eq!(checked, 2 * 3 * 3);
    assert!(!d.join("b/camera.csv").exists());
}

#[test]
fn bench_mac_columns_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| {
        vec![
            "bench", "--seed", "5", "--gate", "input-norm", "--block", "1,2", "--camera-motion", "0,1", "--reps",
            "1", "--out-dir", out,
        ]
    };
    ok(d, &args("a"));
    ok(d, &args("b"));
    for file in ["summary.csv", "frames.csv", "firing.csv", "camera.csv"] {
        let (a, b) = (read_csv(&d.join("a").join(file)), read_csv(&d.join("b").join(file)));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            for (k, v) in x {
                if !k.ends_with("_ms") && k != "time_reduction" {
                    assert_eq!(v, &y[k], "{file} column {k}");
                }
            }
        }
    }
}

#[test]
fn train_gates_produces_loadable_gumbel_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "train-gates", "--steps", "4", "--dense-steps", "4", "--clips", "2", "--beta", "1e-2", "--out-dir", "t",
        ],
    );
    assert!(out.contains("MAC reduction"));
    let curve = read_csv(&d.join("t/curve.csv"));
    assert_eq!(curve.len(), 4);
    for r in &curve {
        let g: f64 = r["gate_loss"].parse().unwrap();
        assert!((0.0..=1.0).contains(&g));
    }
    ok(d, &["synth", "--out", "f.fseq", "--channels", "1"]);
    ok(
        d,
        &["run", "--model", "t/gated.skpc", "--frames", "f.fseq", "--gate", "gumbel", "--reps", "1", "--out-dir", "r"],
    );
    let firing = read_csv(&d.join("r/firing.csv"));
    assert!(firing.iter().all(|r| r["gate"] == "gumbel"));
}

#[test]
fn contract_violations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model", "--out", "m.skpc"]);
    ok(d, &["synth", "--out", "one.fseq", "--channels", "1"]);
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--model", "missing.skpc"],
        vec!["run", "--model", "m.skpc", "--gate", "gumbel"],
        vec!["run", "--model", "m.skpc", "--frames", "one.fseq"],
        vec!["run", "--gate", "input-norm", "--block", "3"],
        vec!["run", "--epsilon", "0.1"],
        vec!["run", "--gate", "sideways"],
        vec!["run", "--reset-period", "0"],
        vec!["train-gates", "--clip-length", "1", "--steps", "1", "--dense-steps", "0"],
        vec!["report", "missing.csv"],
    ];
    for args in cases {
        let out = skpc(d, &args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} should explain");
    }
    fs::write(d.join("bad.skpc"), b"SKPC garbage").unwrap();
    let out = skpc(d, &["run", "--model", "bad.skpc"]);
    assert!(!out.status.success());
}
