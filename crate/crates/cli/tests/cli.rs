use std::path::Path;
use std::process::{Command, Output};

fn ron(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ron"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_data(dir: &Path, n: usize) {
    let o = ron(&["gen-data", "--out", dir.to_str().unwrap(), "--n", &n.to_string(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_weights_fail_with_a_file_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path(), 2);
    let o = ron(&[
        "eval",
        "--weights",
        "/nonexistent/model.ronw",
        "--data",
        dir.path().to_str().unwrap(),
        "--metrics-out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("not found") && err.contains("/nonexistent/model.ronw"), "{err}");
}

#[test]
fn gradcheck_all_passes() {
    let o = ron(&["gradcheck", "--ops", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn zero_iteration_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    gen_data(&data, 3);
    let o = ron(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "total_iters=0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let init = std::fs::read(out.join("checkpoint_000000.ronw")).unwrap();
    assert_eq!(init, std::fs::read(out.join("final.ronw")).unwrap());
    assert!(out.join("config.txt").exists());

    // the initial weights are usable by every read-only subcommand
    let weights = out.join("final.ronw");
    let image = data.join("images").join("000000.ppm");
    let dets = dir.path().join("dets.jsonl");
    let o = ron(&[
        "detect",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        dets.to_str().unwrap(),
        "--conf-thresh",
        "0",
        "--top-k",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = std::fs::read_to_string(&dets).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["box"].as_array().unwrap().len(), 4);
    }

    let curve = dir.path().join("recall.csv");
    let o = ron(&[
        "proposals",
        "--weights",
        weights.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--n-list",
        "1,10",
        "--curve-out",
        curve.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 3);
}

#[test]
fn usage_config_and_missing_file_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let usage = ron(&["train", "--bogus-flag"]);
    assert_eq!(usage.status.code(), Some(2));

    gen_data(dir.path(), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "batch_size = 4\nno_such_key = 1\n").unwrap();
    let bad = ron(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));

    let missing = ron(&[
        "train",
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(4));

    let codes = [usage.status.code(), bad.status.code(), missing.status.code()];
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
}
