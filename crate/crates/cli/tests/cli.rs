// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vbse_core::dataset::Manifest;
use vbse_core::dsp::Waveform;
use vbse_core::model::ModelConfig;
use vbse_core::signals::speech_like;
use vbse_core::wav::{write_mono, WavFormat};

fn vbse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbse"))
        .args(args)
        .env_remove("VBSE_WORK_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vbse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic sources plus a small manifest of `n` recipes.
fn sources(d: &Path, n: usize, seed: &str) -> PathBuf {
    ok(&[
        "make-sources",
        "--out-dir",
        p(d),
        "--n-speech",
        "2",
        "--n-noise",
        "2",
        "--seconds",
        "1.5",
    ]);
    let m = d.join(format!("m_{seed}.jsonl"));
    ok(&[
        "make-manifest",
        "--speech-dir",
        p(&d.join("speech")),
        "--noise-dir",
        p(&d.join("noise")),
        "--n",
        &n.to_string(),
        "--seed",
        seed,
        "--segment-len",
        "12000",
        "--snr-range",
        "0:5",
        "--out",
        p(&m),
    ]);
    m
}

fn micro_config(d: &Path, train: &str, data: &str) -> PathBuf {
    let model = serde_json::to_string(&ModelConfig::micro()).unwrap();
    let path = d.join("pipeline.json");
    std::fs::write(
        &path,
        format!(r#"{{"model": {model}, "train": {train}, "data": {data}}}"#),
    )
    .unwrap();
    path
}

#[test]
fn make_manifest_is_reproducible_and_respects_ranges() {
    let d = TempDir::new().unwrap();
    let a = sources(d.path(), 10, "7");
    let b = d.path().join("again.jsonl");
    ok(&[
        "make-manifest",
        "--speech-dir",
        p(&d.path().join("speech")),
        "--noise-dir",
        p(&d.path().join("noise")),
        "--n",
        "10",
        "--seed",
        "7",
        "--segment-len",
        "12000",
        "--snr-range",
        "0:5",
        "--out",
        p(&b),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let wide = d.path().join("wide.jsonl");
    ok(&[
        "make-manifest",
        "--speech-dir",
        p(&d.path().join("speech")),
        "--noise-dir",
        p(&d.path().join("noise")),
        "--n",
        "10",
        "--snr-range",
        "-15:15",
        "--scenario",
        "antiphasic",
        "--segment-len",
        "12000",
        "--out",
        p(&wide),
    ]);
    let m = Manifest::load(&wide).unwrap();
    assert_eq!(m.recipes.len(), 10);
    for r in &m.recipes {
        assert!((-15.0..=15.0).contains(&r.snr_db));
        assert_eq!(r.scenario_kind.as_str(), "antiphasic");
    }
}

#[test]
fn empty_source_directory_exits_with_input_error() {
    let d = TempDir::new().unwrap();
    std::fs::create_dir_all(d.path().join("empty")).unwrap();
    let out = vbse(&[
        "make-manifest",
        "--speech-dir",
        p(&d.path().join("empty")),
        "--noise-dir",
        p(&d.path().join("empty")),
        "--out",
        p(&d.path().join("m.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_type_exits_3_naming_the_key() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"gamma": "high"}}"#).unwrap();
    let out = vbse(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.gamma"));
    std::fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    assert_eq!(vbse(&["train", "--config", p(&cfg)]).status.code(), Some(3));
}

#[test]
fn synth_is_idempotent() {
    let d = TempDir::new().unwrap();
    let m = sources(d.path(), 2, "3");
    let a = d.path().join("a");
    let b = d.path().join("b");
    ok(&["synth", "--manifest", p(&m), "--out-dir", p(&a)]);
    ok(&["synth", "--manifest", p(&m), "--out-dir", p(&b)]);
    for id in Manifest::load(&m)
        .unwrap()
        .recipes
        .iter()
        .map(|r| r.id.clone())
    {
        for f in ["y.wav", "yl.wav", "yr.wav", "s.wav"] {
            assert_eq!(
                std::fs::read(a.join(&id).join(f)).unwrap(),
                std::fs::read(b.join(&id).join(f)).unwrap()
            );
        }
    }
}

#[test]
fn brir_directory_feeds_the_manifest() {
    let d = TempDir::new().unwrap();
    let brirs = d.path().join("brirs");
    ok(&["brir", "--out-dir", p(&brirs)]);
    assert!(brirs.join("antiphasic_noise.wav").exists());
    ok(&[
        "make-sources",
        "--out-dir",
        p(d.path()),
        "--n-speech",
        "1",
        "--n-noise",
        "1",
        "--seconds",
        "1",
    ]);
    let m = d.path().join("m.jsonl");
    ok(&[
        "make-manifest",
        "--speech-dir",
        p(&d.path().join("speech")),
        "--noise-dir",
        p(&d.path().join("noise")),
        "--n",
        "1",
        "--segment-len",
        "8000",
        "--brir-dir",
        p(&brirs),
        "--out",
        p(&m),
    ]);
    ok(&[
        "synth",
        "--manifest",
        p(&m),
        "--out-dir",
        p(&d.path().join("data")),
    ]);
    ok(&[
        "brir",
        "--out-dir",
        p(&brirs),
        "--azimuth",
        "-30",
        "--azimuth",
        "45",
    ]);
    assert!(brirs.join("az_-30.wav").exists() && brirs.join("az_+45.wav").exists());
}

#[test]
fn identity_checkpoint_evaluates_to_zero_improvement() {
    let d = TempDir::new().unwrap();
    let m = sources(d.path(), 2, "5");
    let cfg = micro_config(d.path(), "{}", "{}");
    let ck = d.path().join("ident.ckpt");
    ok(&[
        "init-checkpoint",
        "--config",
        p(&cfg),
        "--identity",
        "--out",
        p(&ck),
    ]);
    let out_dir = d.path().join("eval");
    let table = ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--manifest",
        p(&m),
        "--out-dir",
        p(&out_dir),
    ]);
    let mean = table
        .lines()
        .find(|l| l.starts_with("mean"))
        .expect("mean row");
    let sii: f64 = mean.split_whitespace().last().unwrap().parse().unwrap();
    assert!(sii.abs() < 1e-3, "{table}");
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn train_then_eval_with_model_check() {
    let d = TempDir::new().unwrap();
    let m = sources(d.path(), 2, "9");
    let cfg = micro_config(
        d.path(),
        r#"{"max_steps": 3, "batch_size": 2, "eval_every": 2}"#,
        &format!(
            r#"{{"train_manifest": "{}", "work_dir": "run"}}"#,
            m.file_name().unwrap().to_str().unwrap()
        ),
    );
    ok(&["train", "--config", p(&cfg), "--log-every", "1"]);
    let run = d.path().join("run");
    let ck = run.join("checkpoints/final.ckpt");
    assert!(ck.exists());
    let log = std::fs::read_to_string(run.join("checkpoints/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--dataset",
        p(&run.join("train_data")),
        "--config",
        p(&cfg),
        "--out-dir",
        p(&d.path().join("ev")),
    ]);
    let other = d.path().join("other.json");
    std::fs::write(&other, r#"{"model": {"n_ssm_pairs": 2}}"#).unwrap();
    let out = vbse(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--dataset",
        p(&run.join("train_data")),
        "--config",
        p(&other),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ssm_pair_ablation_writes_five_columns() {
    let d = TempDir::new().unwrap();
    let train_m = sources(d.path(), 2, "11");
    let eval_m = sources(d.path(), 1, "12");
    let cfg = micro_config(
        d.path(),
        r#"{"max_steps": 1, "batch_size": 1}"#,
        &format!(
            r#"{{"train_manifest": "{}", "eval_manifest": "{}", "work_dir": "abl"}}"#,
            p(&train_m),
            p(&eval_m)
        ),
    );
    let text = ok(&["ablate", "--config", p(&cfg), "--axis", "ssm_pairs"]);
    assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 6);
    let json = std::fs::read_to_string(d.path().join("abl/ablation_ssm_pairs/table.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["variants"].as_array().unwrap().len(), 5);
}

fn write_pair(d: &Path, left: &[f64], right: &[f64]) -> (PathBuf, PathBuf) {
    let l = d.join("l.wav");
    let r = d.join("r.wav");
    write_mono(
        &l,
        &Waveform::new(left.to_vec(), 16_000).unwrap(),
        WavFormat::Float32,
    )
    .unwrap();
    write_mono(
        &r,
        &Waveform::new(right.to_vec(), 16_000).unwrap(),
        WavFormat::Float32,
    )
    .unwrap();
    (l, r)
}

fn mean_ipd(stdout: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("mean |IPD|"))
        .unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn analyze_identical_and_inverted_pairs() {
    let d = TempDir::new().unwrap();
    let x = speech_like(16_000, 16_000, 1);
    let (l, r) = write_pair(d.path(), &x, &x);
    let prefix = d.path().join("same_");
    let out = ok(&[
        "analyze",
        "--left",
        p(&l),
        "--right",
        p(&r),
        "--out-prefix",
        p(&prefix),
        "--heatmap",
    ]);
    assert_eq!(mean_ipd(&out), 0.0);
    let psd = std::fs::read_to_string(d.path().join("same_psd_ratio.csv")).unwrap();
    let mut lines = psd.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 257);
    assert_eq!(header[1], "31.25");
    assert!(lines.flat_map(|l| l.split(',')).all(|v| v == "1"));
    assert!(d.path().join("same_ipd.png").exists());

    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let (l, r) = write_pair(d.path(), &x, &neg);
    let out = ok(&[
        "analyze",
        "--left",
        p(&l),
        "--right",
        p(&r),
        "--out-prefix",
        p(d.path()),
    ]);
    assert!((mean_ipd(&out) - std::f64::consts::PI).abs() < 1e-6);
    assert!(d.path().join("ipd.csv").exists());

    let (l, r) = write_pair(d.path(), &x, &x[..8_000]);
    let out = vbse(&[
        "analyze",
        "--left",
        p(&l),
        "--right",
        p(&r),
        "--out-prefix",
        p(d.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schema_is_published() {
    let v: serde_json::Value = serde_json::from_str(&ok(&["schema"])).unwrap();
    assert!(v["properties"]["train"].is_object());
}
