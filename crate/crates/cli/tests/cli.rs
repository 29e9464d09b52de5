//! Integration tests of the `lrf` binary surface: exit codes, JSON shapes,
//! and file outputs.

use std::path::{Path, PathBuf};
use std::process::Command;

fn lrf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lrf"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lrf_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn synth_small_corpus(dir: &Path, k: usize, seed: u64) {
    let out = lrf()
        .args([
            "data",
            "synth",
            "--k",
            &k.to_string(),
            "--train",
            "10",
            "--dev",
            "4",
            "--eval",
            "4",
            "--frames",
            "80",
            "--seed",
            &seed.to_string(),
            "--out-dir",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rf_standard_preset_reports_41() {
    let out = lrf()
        .args(["rf", "--preset", "standard", "--channels", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rf_general"], 41);
    assert_eq!(report["rf_paper"], 41);
    assert_eq!(report["structural"], 41);
    assert_eq!(report["gradient_probe"], 41);
}

#[test]
fn rf_hgnet_report_carries_encoder_values() {
    let out = lrf()
        .args(["rf", "--preset", "hgnet", "--channels", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["encoder"]["exact"], 36);
    assert_eq!(report["encoder"]["paper"], 17);
    assert_eq!(report["rf_paper"], 680);
}

#[test]
fn malformed_spec_exits_2_with_message() {
    let dir = temp_dir("badspec");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{"family":"standard","num_classes":0}"#).unwrap();
    let out = lrf().args(["rf", "--spec"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn measure_on_identical_files_is_inf_zero_zero() {
    use lrf_core::acoustics::{write_raw64, Waveform, SAMPLE_RATE};
    use lrf_core::rng::Rng;
    let dir = temp_dir("measure");
    let mut rng = Rng::new(5);
    let x = Waveform::new((0..2000).map(|_| rng.normal()).collect(), SAMPLE_RATE);
    let path = dir.join("x.f64");
    write_raw64(&path, &x).unwrap();
    let out = lrf()
        .arg("measure")
        .arg("--ref")
        .arg(&path)
        .arg("--deg")
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["snr_db"], "inf");
    assert_eq!(v["is"], 0.0);
    assert_eq!(v["cd"], 0.0);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn corpus_regeneration_is_deterministic() {
    let dir_a = temp_dir("synth_a");
    let dir_b = temp_dir("synth_b");
    synth_small_corpus(&dir_a, 4, 42);
    synth_small_corpus(&dir_b, 4, 42);
    assert_eq!(
        std::fs::read(dir_a.join("manifest.json")).unwrap(),
        std::fs::read(dir_b.join("manifest.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir_a.join("train_0003.bin")).unwrap(),
        std::fs::read(dir_b.join("train_0003.bin")).unwrap()
    );
    std::fs::remove_dir_all(&dir_a).unwrap();
    std::fs::remove_dir_all(&dir_b).unwrap();
}

#[test]
fn reverb_lowers_mean_snr_as_t60_grows() {
    use lrf_core::acoustics::snr_db;
    let clean = temp_dir("rev_clean");
    synth_small_corpus(&clean, 4, 7);

    let mut means = Vec::new();
    for t60 in ["0.3", "0.6"] {
        let wet = temp_dir(&format!("rev_{t60}"));
        let out = lrf()
            .args(["data", "reverb", "--t60", t60, "--seed", "9", "--corpus"])
            .arg(&clean)
            .arg("--out-dir")
            .arg(&wet)
            .output()
            .unwrap();
        assert!(out.status.success());

        // Payload layout: u64 sample count then f64 samples, labels after.
        let mut total = 0.0;
        for i in 0..10 {
            let name = format!("train_{i:04}.bin");
            let clean_utt = read_corpus_wave(&clean.join(&name));
            let wet_utt = read_corpus_wave(&wet.join(&name));
            total += snr_db(&clean_utt, &wet_utt).unwrap();
        }
        means.push(total / 10.0);
        std::fs::remove_dir_all(&wet).unwrap();
    }
    assert!(
        means[1] < means[0],
        "mean SNR should fall with t60: {means:?}"
    );
    std::fs::remove_dir_all(&clean).unwrap();

    fn read_corpus_wave(path: &Path) -> lrf_core::acoustics::Waveform {
        let bytes = std::fs::read(path).unwrap();
        let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let samples = bytes[8..8 + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        lrf_core::acoustics::Waveform::new(samples, lrf_core::acoustics::SAMPLE_RATE)
    }
}

#[test]
fn train_then_eval_round_trip_and_class_mismatch() {
    let corpus = temp_dir("train_corpus");
    synth_small_corpus(&corpus, 4, 11);
    let run = temp_dir("train_run");
    let out = lrf()
        .args([
            "train",
            "--preset",
            "standard",
            "--width",
            "3",
            "--depth",
            "2",
            "--channels",
            "12",
            "--classes",
            "4",
            "--epochs",
            "2",
            "--crop-frames",
            "64",
            "--batch-size",
            "4",
            "--seed",
            "2",
            "--corpus",
        ])
        .arg(&corpus)
        .arg("--out-dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("metrics.jsonl").exists());

    // Evaluating the checkpoint twice gives identical stdout.
    let eval = |split: &str| {
        let out = lrf()
            .args(["eval", "--split", split, "--checkpoint"])
            .arg(run.join("model.ckpt"))
            .arg("--corpus")
            .arg(&corpus)
            .output()
            .unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(eval("eval"), eval("eval"));

    // A corpus with a different class count is a validation error (exit 2).
    let other = temp_dir("train_other_k");
    synth_small_corpus(&other, 6, 11);
    let out = lrf()
        .args(["eval", "--checkpoint"])
        .arg(run.join("model.ckpt"))
        .arg("--corpus")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::remove_dir_all(&corpus).unwrap();
    std::fs::remove_dir_all(&run).unwrap();
    std::fs::remove_dir_all(&other).unwrap();
}

#[test]
fn sweep_rejects_even_kernels() {
    let corpus = temp_dir("sweep_even");
    synth_small_corpus(&corpus, 4, 3);
    let out = lrf()
        .args(["sweep", "--kernels", "3,4", "--corpus"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&corpus).unwrap();
}

#[test]
fn train_config_file_overrides_hyperparameters() {
    let corpus = temp_dir("cfg_corpus");
    synth_small_corpus(&corpus, 4, 13);
    let dir = temp_dir("cfg_run");
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, r#"{"epochs":1,"batch_size":2,"crop_frames":48}"#).unwrap();
    let out = lrf()
        .args([
            "train",
            "--preset",
            "tdnn",
            "--channels",
            "8",
            "--classes",
            "4",
            "--seed",
            "4",
        ])
        .arg("--config")
        .arg(&config_path)
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    // epoch-0 dev + one epoch (train + dev rows) under the config override.
    assert_eq!(csv.lines().count(), 1 + 3);
    std::fs::remove_dir_all(&corpus).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
}
