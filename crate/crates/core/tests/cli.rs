//! End-to-end runs of the `compnet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn compnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn mnist() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist")
        .display()
        .to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synth(out: &Path, variant: &str, n: &str) {
    let o = compnet(&[
        "synth", "--variant", variant, "--n", n, "--n-test", "4", "--seed", "3", "--out",
        out.to_str().unwrap(), "--mnist", &mnist(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_manifest_and_pngs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "multi", "5");
    let train = dir.path().join("train");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(train.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 5);
    assert!(train.join("img_000004.png").exists());
    assert!(train.join("msk_000000_0.png").exists());
    assert!(train.join("msk_000000_1.png").exists());
    assert!(dir.path().join("test/img_000003.png").exists());
}

#[test]
fn train_eval_backtrace_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "single", "6");
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 5\ndata_dir = {:?}\nout_dir = {:?}\nepochs = 1\nbatch_size = 3\n\n\
             [network]\nstem_pools = 1\nblocks = [[1, 4]]\n\n[loss]\nvariant = \"comp-full\"\n",
            data.display().to_string(),
            out.display().to_string()
        ),
    )
    .unwrap();
    let o = compnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let trace = std::fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,L_d,L_c,total,wall_ms"));
    assert_eq!(lines.count(), 2);
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,topk\n0,"));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["status"]["state"], "completed");

    let ckpt = out.join("last.ckpt");
    assert!(std::fs::read(&ckpt).unwrap().starts_with(b"COMPNET-CKPT-1\n"));
    let report = dir.path().join("report.json");
    let o = compnet(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.join("test").to_str().unwrap(), "--metrics",
        "topk", "--stratify", "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let v = r["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert_eq!(r["strata"].as_array().unwrap().iter().map(|s| s["instances"].as_u64().unwrap()).sum::<u64>(), 4);

    // AP needs a sigmoid head: validation failure.
    let o = compnet(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.join("test").to_str().unwrap(), "--metrics", "ap",
    ]);
    assert_eq!(code(&o), 1);

    let heat = dir.path().join("heat.png");
    let o = compnet(&[
        "backtrace", "--ckpt", ckpt.to_str().unwrap(), "--image", data.join("test/img_000000.png").to_str().unwrap(),
        "--class", "3", "--out", heat.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&heat).unwrap()));
    let info = decoder.read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (120, 120));
}

#[test]
fn gradcheck_exit_codes() {
    let o = compnet(&["gradcheck", "--net", "toy", "--tol", "1e-4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("comp-full"));
    // No gradient is that close to its finite difference: numerical failure.
    let o = compnet(&["gradcheck", "--net", "toy", "--tol", "1e-30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn validation_failures_exit_one() {
    assert_eq!(code(&compnet(&["train", "--config", "/nonexistent/run.toml"])), 1);
    assert_eq!(code(&compnet(&["synth", "--variant", "triple", "--n", "1", "--seed", "0", "--out", "x"])), 1);
    assert_eq!(code(&compnet(&["eval"])), 1);
    assert_eq!(code(&compnet(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\ndata_dir = \"d\"\nout_dir = \"o\"\nepochz = 3\n").unwrap();
    let o = compnet(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}
