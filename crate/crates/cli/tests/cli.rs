use std::path::Path;
use std::process::{Command, Output};

use mms_core::image::write_pnm;
use mms_core::synth::{render_word, SynthConfig};

fn mms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mms")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(dir: &Path, n: &str) {
    let o = mms(&["synth", "--n", n, "--seed", "3", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn untrained(dir: &Path, data: &Path) -> std::path::PathBuf {
    let o = mms(&["pretrain", "--data", p(data), "--out", p(dir), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("final.mms")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn version_names_checkpoint_format() {
    let o = mms(&["--version"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("MMS1 v1"), "{s}");
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    for args in [
        vec!["mask", "--demo", "--strategy", "diagonal", "--out", p(&out)],
        vec!["mask", "--image", "/does/not/exist.ppm", "--strategy", "span", "--out", p(&out)],
        vec!["mask", "--demo", "--strategy", "span", "--span-max", "0", "--out", p(&out)],
        vec!["pretrain", "--data", "/does/not/exist", "--out", p(&out)],
        vec!["synth", "--n", "0", "--out", p(&out)],
        vec!["attn", "--ckpt", "/does/not/exist.mms", "--out", p(&out)],
        vec!["probe", "--out", p(&out)],
    ] {
        let o = mms(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = mms(&["mask", "--demo", "--strategy", "span", "--span-max", "0", "--out", p(&out)]);
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn invalid_training_config_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "4");
    let o = mms(&["pretrain", "--data", p(&data), "--out", p(&t.path().join("o")), "--batch-size", "0"]);
    assert_eq!(code(&o), 2);
    let o = mms(&["pretrain", "--data", p(&data), "--out", p(&t.path().join("o")), "--set", "colour=red"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "2");
    let bad = t.path().join("bad.mms");
    std::fs::write(&bad, b"MMS1 but not really").unwrap();
    let o = mms(&["eval", "--ckpt", p(&bad), "--data", p(&data), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn demo_mask_rerun_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for dir in [&a, &b] {
        let o = mms(&["mask", "--demo", "--strategy", "span", "--ratio", "0.5", "--seed", "1", "--out", p(dir)]);
        assert_eq!(code(&o), 0);
    }
    for f in ["preview.ppm", "mask.pgm", "mask.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a.join("run_manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "mask");
    assert!(manifest["finished_unix"].is_u64());
    let mask: serde_json::Value = serde_json::from_slice(&read(&a.join("mask.json"))).unwrap();
    let runs = mask["column_runs"].as_array().unwrap();
    assert!(runs.iter().all(|r| r[1].as_u64().unwrap() <= 8));
    // original stacked over the masked copy
    assert!(read(&a.join("preview.ppm")).starts_with(b"P6\n128 64\n"));
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "4");
    let ckpt = untrained(&t.path().join("run"), &data);
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(t.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics, "step,lr,loss_r,loss_b,loss_s,loss_mms\n");
    let cfg = std::fs::read_to_string(t.path().join("run/config.txt")).unwrap();
    assert!(cfg.contains("epochs = 0"));
}

#[test]
fn eval_of_untrained_checkpoint_is_finite_and_leaves_inputs_alone() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "6");
    let ckpt = untrained(&t.path().join("run"), &data);
    let before: Vec<Vec<u8>> = ["manifest.jsonl", "000000.ppm"].iter().map(|f| read(&data.join(f))).collect();
    let ck_before = read(&ckpt);
    let out = t.path().join("eval");
    let spec = format!("init={}", p(&ckpt));
    let o = mms(&["eval", "--ckpt", &spec, "--data", p(&data), "--out", p(&out), "--strips", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("psnr_table.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,random_75,block_50,span_50");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "init");
    for v in &row[1..] {
        assert!(v.parse::<f64>().unwrap().is_finite(), "{csv}");
    }
    assert!(out.join("strips/init/000000.ppm").exists());
    assert!(out.join("eval_sets.json").exists());
    let after: Vec<Vec<u8>> = ["manifest.jsonl", "000000.ppm"].iter().map(|f| read(&data.join(f))).collect();
    assert_eq!(before, after);
    assert_eq!(ck_before, read(&ckpt));

    // frozen masks reproduce the same table
    let again = t.path().join("eval2");
    let o = mms(&[
        "eval", "--ckpt", &spec, "--data", p(&data), "--out", p(&again), "--strips", "0",
        "--eval-sets", p(&out.join("eval_sets.json")),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(csv, std::fs::read_to_string(again.join("psnr_table.csv")).unwrap());
}

#[test]
fn attention_modes_write_maps() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "2");
    let ckpt = untrained(&t.path().join("run"), &data);
    let sample = render_word("HELLO", &SynthConfig::default(), 4).unwrap();
    let image = t.path().join("word.ppm");
    let char_mask = t.path().join("char.pgm");
    write_pnm(&image, &sample.image).unwrap();
    write_pnm(&char_mask, &sample.char_box_image(1)).unwrap();
    for (mode, extra) in [("cls", vec![]), ("patch", vec!["--patch-index", "40"]), ("char", vec!["--char-mask", p(&char_mask)])] {
        let out = t.path().join(mode);
        let mut args = vec!["attn", "--ckpt", p(&ckpt), "--image", p(&image), "--mode", mode, "--out", p(&out)];
        args.extend(extra);
        let o = mms(&args);
        assert_eq!(code(&o), 0, "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(read(&out.join("heatmap.pgm")).starts_with(b"P5\n128 32\n"));
        assert!(out.join("overlay.ppm").exists());
        let map: serde_json::Value = serde_json::from_slice(&read(&out.join("attention.json"))).unwrap();
        assert_eq!(map["weights"].as_array().unwrap().len(), 256);
    }
    let o = mms(&["attn", "--ckpt", p(&ckpt), "--mode", "patch", "--patch-index", "256", "--out", p(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn scratch_probe_reports_accuracies() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("probe");
    let o = mms(&["probe", "--scratch", "--preset", "micro", "--train", "8", "--test", "4", "--epochs", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&read(&out.join("probe.json"))).unwrap();
    let acc = r["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(r["classes"], 37);

    // a free-layout dataset has no fixed columns to label
    let data = t.path().join("free");
    synth(&data, "12");
    let o = mms(&["probe", "--scratch", "--data", p(&data), "--train", "8", "--test", "4", "--out", p(&t.path().join("p2"))]);
    assert_eq!(code(&o), 2);
    let fixed = t.path().join("fixed");
    let o = mms(&["synth", "--n", "12", "--layout", "probe", "--out", p(&fixed)]);
    assert_eq!(code(&o), 0);
    let o = mms(&[
        "probe", "--scratch", "--preset", "micro", "--data", p(&fixed), "--train", "8", "--test", "4", "--epochs", "2",
        "--out", p(&t.path().join("p3")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "6");
    let common = ["--total-steps", "4", "--batch-size", "3", "--warmup-steps", "1", "--checkpoint-every", "2"];
    let (full, part) = (t.path().join("full"), t.path().join("part"));
    for dir in [&full, &part] {
        let mut args = vec!["pretrain", "--data", p(&data), "--out", p(dir)];
        args.extend(common);
        assert_eq!(code(&mms(&args)), 0);
    }
    // roll `part` back to its step-2 checkpoint and continue
    let ck = part.join("checkpoints/step_000002.mms");
    let mut args = vec!["pretrain", "--data", p(&data), "--out", p(&part), "--resume", p(&ck)];
    args.extend(common);
    let o = mms(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&full.join("final.mms")), read(&part.join("final.mms")));
    assert_eq!(read(&full.join("metrics.csv")), read(&part.join("metrics.csv")));
}
