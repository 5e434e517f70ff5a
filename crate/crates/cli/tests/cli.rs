//! The `dswinir` binary: NDJSON output and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use dswinir_core::io::synthetic_scene;

fn dswinir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dswinir")).args(args).output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).expect("every stdout line is JSON")).collect()
}

fn write_config(dir: &Path, train: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, format!(r#"{{"model":{{}},"train":{train}}}"#)).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_filter_emits_reports() {
    let out = dswinir(&["gradcheck", "--filter", "softmax"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["kernel"], "softmax");
    assert_eq!(lines[0]["pass"], true);
    assert_eq!(dswinir(&["gradcheck", "--filter", "no_such_op"]).status.code(), Some(2));
}

#[test]
fn oracle_reports_every_kernel_in_both_dtypes() {
    let out = dswinir(&["oracle", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 22);
    assert!(lines.iter().all(|l| l["pass"] == true));
}

#[test]
fn usage_config_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dswinir(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dswinir(&["train"]).status.code(), Some(2));
    let bad = write_config(dir.path(), r#"{"learning_rate":1}"#);
    assert_eq!(dswinir(&["bench", "--config", &bad]).status.code(), Some(2));
    let good = write_config(dir.path(), r#"{"total_steps":1,"patch":16,"batch":1}"#);
    let missing = dir.path().join("nothing");
    let out = dswinir(&["train", "--config", &good, "--data", missing.to_str().unwrap(), "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["exit_code"], 3);
    assert_eq!(dswinir(&["infer", "--ckpt", "missing.ckpt", "--in", "a.ppm", "--out", "b.ppm"]).status.code(), Some(3));
    assert_eq!(dswinir(&["bench", "--config", &good, "--hw", "12"]).status.code(), Some(3));
}

#[test]
fn train_infer_offsets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for i in 0..2 {
        synthetic_scene(i, 24, 24).save(&data.join(format!("{i}.ppm"))).unwrap();
    }
    let cfg = write_config(dir.path(), r#"{"total_steps":2,"patch":16,"batch":1,"eval_patches":1,"lr0":0.005}"#);
    let ckpt = dir.path().join("m.ckpt");
    let (d, c) = (data.to_str().unwrap(), ckpt.to_str().unwrap());
    let out = dswinir(&["train", "--config", &cfg, "--data", d, "--out", c, "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["step"], 2);
    assert!(lines[1]["psnr"].is_number());
    assert_eq!(lines[2]["steps"], 2);

    let again = dswinir(&["train", "--config", &cfg, "--data", d, "--out", c, "--seed", "4"]);
    let losses = |o: &Output| json_lines(o).iter().take(2).map(|l| l["loss"].as_f64().unwrap()).collect::<Vec<_>>();
    assert_eq!(losses(&out), losses(&again));

    let input = dir.path().join("odd.ppm");
    synthetic_scene(7, 19, 11).save(&input).unwrap();
    let restored = dir.path().join("restored.ppm");
    let out = dswinir(&["infer", "--ckpt", c, "--in", input.to_str().unwrap(), "--out", restored.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let img = dswinir_core::io::Image::load(&restored).unwrap();
    assert_eq!((img.width, img.height), (19, 11));

    let heat = dir.path().join("heat.pgm");
    let out = dswinir(&["offsets", "--ckpt", c, "--in", input.to_str().unwrap(), "--stage", "2", "--out", heat.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = &json_lines(&out)[0];
    assert_eq!((s["width"].as_u64(), s["height"].as_u64()), (Some(6), Some(4)));
    assert!(heat.exists() && dir.path().join("heat.json").exists());
    let bad_stage = dswinir(&["offsets", "--ckpt", c, "--in", input.to_str().unwrap(), "--stage", "9", "--out", heat.to_str().unwrap()]);
    assert_eq!(bad_stage.status.code(), Some(2));
}

#[test]
fn bench_reports_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{}");
    let out = dswinir(&["bench", "--config", &cfg, "--hw", "16", "--repeat", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let l = &json_lines(&out)[0];
    assert_eq!(l["params"], 244385);
    assert!(l["macs"].as_u64().unwrap() > 0 && l["mean_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    for i in 0..2 {
        synthetic_scene(i, 64, 64).save(&data.join(format!("{i}.ppm"))).unwrap();
    }
    let report = dir.path().join("report.json");
    let out = dswinir(&[
        "ablate", "--data", data.to_str().unwrap(), "--steps", "1", "--seeds", "1", "--variants", "window_baseline,sliding_k7,dswin_k7",
        "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&out).len(), 4);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["runs"].as_array().unwrap().len(), 3);
    assert_eq!(r["orderings"].as_array().unwrap().len(), 3);
    let unknown = dswinir(&["ablate", "--data", data.to_str().unwrap(), "--variants", "nope", "--out", report.to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(2));
}
