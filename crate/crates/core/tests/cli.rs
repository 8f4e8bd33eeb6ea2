use std::path::Path;
use std::process::{Command, Output};

fn masf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn inspect_and_bench_presets() {
    let dir = tempfile::tempdir().unwrap();
    let o = masf(dir.path(), &["inspect", "--model-config", "tiny"]);
    assert!(o.status.success());
    let table = stdout(&o);
    for layer in ["stem", "mfam2", "head"] {
        assert!(table.contains(layer), "{table}");
    }
    let o = masf(dir.path(), &["bench", "--model-config", "baseline-tiny", "--iters", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("params") && text.contains("gflops") && text.contains("forward_ms"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(masf(p, &["inspect", "--model-config", "missing.json"]).status.code(), Some(2));
    let o = masf(p, &["eval", "--checkpoint", "missing.json", "--data", "synthetic"]);
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(p.join("bad.json"), r#"{"num_classes": 3}"#).unwrap();
    assert_eq!(masf(p, &["inspect", "--model-config", "bad.json"]).status.code(), Some(2));
    assert_eq!(masf(p, &["frobnicate"]).status.code(), Some(2));
    std::fs::write(p.join("tc.json"), r#"{"momentum": 2.0}"#).unwrap();
    let o = masf(p, &["train", "--model-config", "tiny", "--train-config", "tc.json", "--data", "synthetic", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(p.join("tc.json"), r#"{"lr0": 1e300, "epochs": 4, "batch_size": 2, "image_size": 64}"#).unwrap();
    let o = masf(p, &["inspect", "--model-config", "tiny", "--json"]);
    std::fs::write(p.join("mc.json"), stdout(&o).replace("\"image_size\": 128", "\"image_size\": 64")).unwrap();
    let o = masf(
        p,
        &[
            "train", "--model-config", "mc.json", "--train-config", "tc.json", "--data", "synthetic", "--synthetic-train", "4",
            "--synthetic-val", "2", "--out", "boom",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("boom/nan_dump.json").exists());
}

#[test]
fn train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("gen.json"), r#"{"image_size": 64, "max_objects": 8}"#).unwrap();
    assert!(masf(p, &["synth", "--out", "data", "--train", "4", "--val", "2", "--gen-config", "gen.json"]).status.success());
    let o = masf(p, &["inspect", "--model-config", "tiny", "--json"]);
    std::fs::write(p.join("mc.json"), stdout(&o).replace("\"image_size\": 128", "\"image_size\": 64")).unwrap();
    std::fs::write(p.join("tc.json"), r#"{"epochs": 2, "batch_size": 2, "image_size": 64}"#).unwrap();
    let o = masf(
        p,
        &["train", "--model-config", "mc.json", "--train-config", "tc.json", "--data", "data/manifest.json", "--out", "run"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(p.join("run/metrics.jsonl")).unwrap().lines().count(), 2);

    let o = masf(
        p,
        &["eval", "--checkpoint", "run/last.json", "--data", "data/manifest.json", "--split", "val", "--json", "--predictions", "pred.jsonl"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["map50"].as_f64().unwrap() >= 0.0);
    assert!(p.join("pred.jsonl").exists());

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("data/manifest.json")).unwrap()).unwrap();
    let item = &manifest["items"][0];
    let image = format!("data/{}", item["image"].as_str().unwrap());
    let ann = format!("data/{}", item["annotations"].as_str().unwrap());
    let o = masf(
        p,
        &[
            "render", "--checkpoint-a", "run/best.json", "--checkpoint-b", "run/last.json", "--image", &image, "--annotations", &ann,
            "--out", "cmp.png", "--scale", "2",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = image::open(p.join("cmp.png")).unwrap();
    assert_eq!((img.width(), img.height()), (2 * 128 + 4, 128));

    // A malformed annotation line is a data error naming the file and line.
    std::fs::write(p.join(&ann), "0 0.5 0.5 0.1\n").unwrap();
    let o = masf(p, &["eval", "--checkpoint", "run/last.json", "--data", "data/manifest.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":1:"));
}
