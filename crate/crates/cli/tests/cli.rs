use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmgan::imageio::{load_rgb, procedural_sample, save_instance_map, save_mask, save_rgb};
use cmgan::maskgen::Mask;
use cmgan::training::CSV_HEADER;
use cmgan::Prng;
use serde_json::{json, Value};

fn cmgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmgan")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 16x16 config that trains in well under a second per step.
fn tiny_config(dir: &Path, name: &str) -> PathBuf {
    let config = json!({
        "generator": {
            "resolution": 16, "widths": [4, 4, 6], "style_dim": 4, "w_dim": 4, "z_dim": 4,
            "mapping_depth": 2
        },
        "dataset": { "resolution": 16, "max_objects": 2, "seed": 3 },
        "loss": { "r1_interval": 2 },
        "batch_size": 2,
        "steps": 4,
        "seed": 9,
        "checkpoint_every": 2,
        "sample_every": 2,
        "out_dir": dir.join(name),
    });
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn train(config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", p(config)];
    args.extend_from_slice(extra);
    cmgan(&args)
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "run");
    let out = train(&config, &["--steps", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), format!("{CSV_HEADER}\n"));
    assert!(run.join("checkpoints/step_000000.cmgn").exists());
    assert!(run.join("latest.cmgn").exists());
    assert!(run.join("samples/step_000000.png").exists());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(dir.path(), "a");
    let b = tiny_config(dir.path(), "b");
    assert!(train(&a, &[]).status.success());
    assert!(train(&b, &[]).status.success());
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    let log = read("a/metrics.csv");
    assert_eq!(log, read("b/metrics.csv"));
    assert_eq!(read("a/latest.cmgn"), read("b/latest.cmgn"));
    assert_eq!(String::from_utf8(log.clone()).unwrap().lines().count(), 5);
    let triptych = load_rgb(&dir.path().join("a/samples/step_000004.png")).unwrap();
    assert_eq!((triptych.width, triptych.height), (48, 16));

    // continue b from its step-2 checkpoint; the log and final state match
    let mid = dir.path().join("b/checkpoints/step_000002.cmgn");
    assert!(train(&b, &["--resume", p(&mid)]).status.success());
    assert_eq!(read("b/metrics.csv"), log);
    assert_eq!(read("b/latest.cmgn"), read("a/latest.cmgn"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"masks": {"tau": 0.5}}"#).unwrap();
    let out = train(&bad, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    fs::write(&bad, r#"{"masks": {"p_rect": 0.3}}"#).unwrap();
    assert_eq!(train(&bad, &[]).status.code(), Some(1));
    assert_eq!(train(&dir.path().join("missing.json"), &[]).status.code(), Some(1));
    assert_eq!(cmgan(&["train"]).status.code(), Some(1));
    assert_eq!(cmgan(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cmgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "run");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["adam"] = json!({ "lr": 1e30 });
    v["steps"] = json!(20);
    fs::write(&config, v.to_string()).unwrap();
    let out = train(&config, &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

fn instance_dir(dir: &Path, n: u64) -> PathBuf {
    let maps = dir.join("instances");
    fs::create_dir_all(&maps).unwrap();
    for i in 0..n {
        let s = procedural_sample(&mut Prng::new(i), 32, 4);
        save_instance_map(&maps.join(format!("{i}.png")), &s.instances).unwrap();
    }
    maps
}

fn sample_masks(dir: &Path, maps: &Path, count: usize) -> (Output, PathBuf) {
    let config = dir.join("masks.json");
    fs::write(&config, r#"{"seed": 2}"#).unwrap();
    let out_dir = dir.join(format!("masks_{count}"));
    let out = cmgan(&[
        "sample-masks",
        "--instances",
        p(maps),
        "--config",
        p(&config),
        "--count",
        &count.to_string(),
        "--out",
        p(&out_dir),
    ]);
    (out, out_dir)
}

#[test]
fn sample_masks_stats_schema() {
    let dir = tempfile::tempdir().unwrap();
    let maps = instance_dir(dir.path(), 5);
    let (out, out_dir) = sample_masks(dir.path(), &maps, 200);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["count"], 200);
    assert_eq!(stats["instance_maps"], 5);
    assert_eq!(stats["exclusion_violations"], 0);
    let counts = &stats["type_counts"];
    let total: u64 = ["free_form", "object", "rect"].iter().map(|k| counts[k].as_u64().unwrap()).sum();
    assert_eq!(total, 200);
    let hist = &stats["area_histogram"];
    assert_eq!(hist["edges"].as_array().unwrap().len(), 21);
    assert_eq!(hist["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 200);
    let n_png = fs::read_dir(&out_dir).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    });
    assert_eq!(n_png.count(), 200);

    // rerunning overwrites identically
    let before = fs::read(out_dir.join("mask_00123.png")).unwrap();
    assert!(sample_masks(dir.path(), &maps, 200).0.status.success());
    assert_eq!(fs::read(out_dir.join("mask_00123.png")).unwrap(), before);
}

#[test]
fn sample_masks_zero_count_and_missing_instances() {
    let dir = tempfile::tempdir().unwrap();
    let maps = instance_dir(dir.path(), 1);
    let (out, out_dir) = sample_masks(dir.path(), &maps, 0);
    assert!(out.status.success());
    let entries: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["stats.json"]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["count"], 0);
    assert_eq!(stats["type_frequencies"]["object"], 0.0);

    let (out, _) = sample_masks(dir.path(), &dir.path().join("nowhere"), 3);
    assert_eq!(out.status.code(), Some(1));
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(sample_masks(dir.path(), &empty, 3).0.status.code(), Some(1));
}

/// Trains the tiny config for zero steps and writes a probe image and masks.
fn inference_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let config = tiny_config(dir, "run");
    assert!(train(&config, &["--steps", "0"]).status.success());
    let ckpt = dir.join("run/latest.cmgn");
    let image = dir.join("image.png");
    save_rgb(&image, &procedural_sample(&mut Prng::new(5), 16, 2).image).unwrap();
    let mut m = Mask::new(16, 16);
    for y in 4..12 {
        for x in 4..12 {
            m.set(x, y, true);
        }
    }
    let mask = dir.join("mask.png");
    save_mask(&mask, &m).unwrap();
    let empty = dir.join("empty.png");
    save_mask(&empty, &Mask::new(16, 16)).unwrap();
    (ckpt, image, mask, empty)
}

fn inpaint(ckpt: &Path, image: &Path, mask: &Path, out: &Path, seed: &str) -> Output {
    cmgan(&[
        "inpaint", "--ckpt", p(ckpt), "--image", p(image), "--mask", p(mask), "--out", p(out), "--seed", seed,
    ])
}

#[test]
fn inpaint_preserves_known_pixels_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ckpt, image, mask, empty) = inference_fixture(d);

    assert!(inpaint(&ckpt, &image, &empty, &d.join("copy.png"), "0").status.success());
    assert_eq!(load_rgb(&d.join("copy.png")).unwrap(), load_rgb(&image).unwrap());

    assert!(inpaint(&ckpt, &image, &mask, &d.join("a.png"), "4").status.success());
    assert!(inpaint(&ckpt, &image, &mask, &d.join("b.png"), "4").status.success());
    assert_eq!(fs::read(d.join("a.png")).unwrap(), fs::read(d.join("b.png")).unwrap());
    let (src, out) = (load_rgb(&image).unwrap(), load_rgb(&d.join("a.png")).unwrap());
    for y in 0..16 {
        for x in 0..16 {
            let i = 3 * (y * 16 + x);
            if !((4..12).contains(&x) && (4..12).contains(&y)) {
                assert_eq!(src.pixels[i..i + 3], out.pixels[i..i + 3]);
            }
        }
    }
}

#[test]
fn inpaint_rejects_resolution_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ckpt, _, mask, _) = inference_fixture(d);
    let big = d.join("big.png");
    save_rgb(&big, &procedural_sample(&mut Prng::new(1), 32, 1).image).unwrap();
    let out = inpaint(&ckpt, &big, &mask, &d.join("x.png"), "0");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("16x16"));
    let not_ckpt = d.join("image.png");
    assert_eq!(inpaint(&not_ckpt, &big, &mask, &d.join("x.png"), "0").status.code(), Some(1));
}

#[test]
fn dump_features_writes_every_scale() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ckpt, image, mask, _) = inference_fixture(d);
    let out_dir = d.join("features");
    let out = cmgan(&[
        "dump-features", "--ckpt", p(&ckpt), "--image", p(&image), "--mask", p(&mask), "--out", p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("features.json")).unwrap()).unwrap();
    let scales = report["scales"].as_array().unwrap();
    // widths [4, 4, 6]: two scales, features exist at scale 1 only
    assert_eq!(scales.len(), 1);
    let s = &scales[0];
    assert_eq!((s["scale"].as_u64(), s["width"].as_u64()), (Some(1), Some(8)));
    assert_eq!(s["hole_pixels"], 16);
    assert_eq!(s["visible_pixels"], 48);
    for branch in ["encoder", "global", "spatial"] {
        assert!(s[branch]["relative_gap"].as_f64().unwrap() >= 0.0);
        let img = cmgan::imageio::load_gray8(&out_dir.join(format!("scale1_{branch}.png"))).unwrap();
        assert_eq!((img.width, img.height), (8, 8));
    }
}

#[test]
fn verify_filter_and_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("report.json");
    let out = cmgan(&["verify", "--filter", "demodulation", "--json", p(&json_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(report["passed"], 4);
    assert_eq!(report["failed"], 0);
    let kinds = ["below", "above", "at_least", "within", "equals"];
    for r in results {
        assert!(r["name"].as_str().unwrap().starts_with("demodulation."));
        assert!(r["seconds"].as_f64().unwrap() >= 0.0);
        assert!(r["error"].is_null());
        let ms = r["measurements"].as_array().unwrap();
        assert!(!ms.is_empty());
        for m in ms {
            assert!(m["value"].is_number());
            assert_eq!(m["passed"], true);
            assert!(kinds.contains(&m["bound"]["kind"].as_str().unwrap()));
        }
    }
    // the printed report names every check with its measured value and bound
    let text = String::from_utf8(out.stdout).unwrap();
    for r in results {
        assert!(text.contains(r["name"].as_str().unwrap()));
    }
    assert!(text.contains("(want in [0.9, 1.1])"));
    assert!(text.contains("4 passed, 0 failed"));

    assert_eq!(cmgan(&["verify", "--filter", "no-such-check"]).status.code(), Some(1));
    let listed = String::from_utf8(cmgan(&["verify", "--list"]).stdout).unwrap();
    assert!(listed.lines().count() >= 80);
}
