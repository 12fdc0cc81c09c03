use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtu_core::datapipe::{load_manifest, read_image_png, read_mask_png};
use mtu_core::inference::predict_image;
use mtu_core::metrics::{evaluate_masks, DetectionCounts, DetectionReport, DEFAULT_D_THRESH};
use mtu_core::postprocess::threshold;
use mtu_core::MtuNet;
use serde_json::Value;

fn mtu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtu"))
        .args(args)
        .output()
        .expect("run mtu")
}

fn ok(args: &[&str]) {
    let out = mtu(args);
    assert!(
        out.status.success(),
        "mtu {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--count", "4", "--size", "64", "--seed", seed]);
    data
}

const TINY_MODEL: &str =
    r#"{"model": {"k": 2, "channels": [2, 4], "stem_channels": 2, "heads_per_level": [2], "input_size": 32, "mlp_ratio": 1}}"#;

fn trained(dir: &Path, data: &Path) -> PathBuf {
    let cfg = dir.join("model.json");
    std::fs::write(&cfg, TINY_MODEL).unwrap();
    let run = dir.join("run");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(data), "--out", s(&run), "--steps", "6", "--batch-size", "4",
        "--lr", "0.05", "--seed", "2",
    ]);
    run.join("model.mtuw")
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let out = dir.path().join("eval");
    ok(&["eval", "--gt-dir", s(&data.join("masks")), "--pred-dir", s(&data.join("masks")), "--out", s(&out)]);
    let report = json(out.join("report.json"));
    assert_eq!(report["pd"], 1.0);
    assert_eq!(report["fa"], 0.0);
    assert_eq!(report["iou"], 1.0);
    assert_eq!(json(out.join("config.json"))["command"], "eval");
}

#[test]
fn roc_has_one_monotone_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4");
    let model = trained(dir.path(), &data);
    let pred = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&model), "--data", s(&data), "--out", s(&pred)]);
    let roc = dir.path().join("roc");
    ok(&["roc", "--gt-dir", s(&data.join("masks")), "--pred-dir", s(&pred), "--out", s(&roc), "--taus", "21"]);

    let text = std::fs::read_to_string(roc.join("roc.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau,pd,fa"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 21);
    for w in rows.windows(2) {
        assert!(w[1][1] <= w[0][1] && w[1][2] <= w[0][2], "{w:?}");
    }
    assert_eq!(rows[20], vec![1.0, 0.0, 0.0]);
    for (name, header) in [("roc_fa_pd.csv", "fa,pd"), ("roc_tau_pd.csv", "tau,pd"), ("roc_tau_fa.csv", "tau,fa")] {
        let proj = std::fs::read_to_string(roc.join(name)).unwrap();
        assert!(proj.starts_with(header));
        assert_eq!(proj.lines().count(), 22);
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let data = synth(dir, "9");
        let model = trained(dir, &data);
        ok(&["augment", "--data", s(&data), "--out", s(&dir.join("aug")), "--seed", "3", "--classic"]);
        ok(&["tile", "--data", s(&data), "--out", s(&dir.join("tiles")), "--tile-size", "32"]);
        ok(&["predict", "--checkpoint", s(&model), "--data", s(&data), "--out", s(&dir.join("pred"))]);
        ok(&["cluster", "--pred-dir", s(&dir.join("pred")), "--out", s(&dir.join("cl")), "--adaptive-tau"]);
        ok(&["eval", "--gt-dir", s(&data.join("masks")), "--pred-dir", s(&dir.join("pred")), "--out", s(&dir.join("ev"))]);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 30);
    // Compared by relative path, so the two temp roots do not matter.
    assert_eq!(ta, tb);
}

#[test]
fn composed_commands_match_the_in_process_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "5");
    let model = trained(dir.path(), &data);
    let pred = dir.path().join("pred");
    let clustered = dir.path().join("cl");
    let out = dir.path().join("eval");
    ok(&["predict", "--checkpoint", s(&model), "--data", s(&data), "--out", s(&pred), "--raw"]);
    ok(&["cluster", "--pred-dir", s(&pred), "--out", s(&clustered), "--tau", "0.5"]);
    ok(&["eval", "--gt-dir", s(&data.join("masks")), "--pred-dir", s(&clustered.join("masks")), "--out", s(&out)]);
    let from_cli: DetectionReport = serde_json::from_value(json(out.join("report.json"))).unwrap();

    let net = MtuNet::<f32>::load(&model).unwrap();
    let mut counts = DetectionCounts::default();
    for e in load_manifest(data.join("manifest.json")).unwrap() {
        let map = predict_image(&net, &read_image_png(&e.image_path).unwrap()).unwrap();
        let gt = read_mask_png(&e.mask_path).unwrap();
        counts += evaluate_masks(&gt, &threshold(&map, 0.5), DEFAULT_D_THRESH).unwrap();
    }
    let in_process = DetectionReport::from_counts(counts, DEFAULT_D_THRESH).unwrap();
    assert_eq!(from_cli, in_process);

    // Evaluating the raw maps directly at the same threshold agrees too.
    let direct = dir.path().join("direct");
    ok(&["eval", "--gt-dir", s(&data.join("masks")), "--pred-dir", s(&pred), "--out", s(&direct), "--tau", "0.5"]);
    let direct: DetectionReport = serde_json::from_value(json(direct.join("report.json"))).unwrap();
    assert_eq!(direct, in_process);
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("stderr ends with JSON")
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "1");
    let masks = data.join("masks");
    let out = dir.path().join("x");

    let bad_tau = mtu(&["eval", "--gt-dir", s(&masks), "--pred-dir", s(&masks), "--out", s(&out), "--tau", "2"]);
    assert_eq!(bad_tau.status.code(), Some(2));
    assert_eq!(error_of(&bad_tau)["error"]["kind"], "config");

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"tile_sise": 64}"#).unwrap();
    let unknown = mtu(&["tile", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(mtu(&["synth"]).status.code(), Some(2));
    assert_eq!(mtu(&["frobnicate"]).status.code(), Some(2));

    let missing = mtu(&["train", "--data", s(&dir.path().join("none")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(error_of(&missing)["error"]["exit_code"], 3);

    // No targets anywhere leaves Pd undefined.
    let empty_cfg = dir.path().join("empty.json");
    std::fs::write(&empty_cfg, r#"{"targets": {"count": [0, 0]}}"#).unwrap();
    let empty = dir.path().join("empty");
    ok(&["synth", "--config", s(&empty_cfg), "--out", s(&empty), "--count", "2"]);
    let undefined = mtu(&[
        "eval", "--gt-dir", s(&empty.join("masks")), "--pred-dir", s(&empty.join("masks")), "--out", s(&out),
    ]);
    assert_eq!(undefined.status.code(), Some(4));
    assert_eq!(error_of(&undefined)["error"]["kind"], "numeric");
}
