// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::binaural::ScenarioKind;
use crate::dataset::{generate_dataset, make_manifest, write_synthetic_sources, ManifestRequest};
use tempfile::TempDir;

fn tiny_data(n: usize, seg: usize, seed: u64) -> (TempDir, Manifest) {
    let dir = TempDir::new().unwrap();
    let (speech, noises) = write_synthetic_sources(dir.path(), 2, 2, seg + 2_000, seed).unwrap();
    let m = make_manifest(
        &speech,
        &noises,
        &ManifestRequest {
            n,
            segment_len: seg,
            seed,
            snr_range_db: (0.0, 5.0),
            ..Default::default()
        },
    )
    .unwrap();
    let out = dir.path().join("data");
    generate_dataset(&m, &out).unwrap();
    (dir, m)
}

use crate::dataset::Manifest;

fn examples(dir: &TempDir) -> Vec<Example> {
    load_all(&dir.path().join("data")).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn batch_order_visits_every_example_per_epoch() {
    let mut a = BatchOrder::new(5, 3);
    let mut b = BatchOrder::new(5, 3);
    let first: Vec<usize> = (0..5).flat_map(|_| a.next_batch(1)).collect();
    let mut sorted = first.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    assert_eq!(
        first,
        (0..5).flat_map(|_| b.next_batch(1)).collect::<Vec<_>>()
    );
}

#[test]
fn config_validation_and_schedule() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            gamma: -1.0,
            ..Default::default()
        },
        TrainConfig {
            grad_clip_norm: 0.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }
    let c = TrainConfig {
        max_steps: 100,
        schedule: Schedule::Cosine { min_lr: 1e-5 },
        ..Default::default()
    };
    assert_eq!(c.lr_at(1), 1e-3);
    assert!((c.lr_at(51) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
    assert!(c.lr_at(100) > 1e-5 && c.lr_at(100) < 2e-5);
    let json = r#"{"gamma": "high"}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (d, _) = tiny_data(3, 3_200, 1);
    let data = examples(&d);
    let model = ModelConfig::micro();
    let a = train(&model, &quick(4), &data).unwrap();
    let b = train(&model, &quick(4), &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );
    let half = train(&model, &quick(2), &data).unwrap();
    let resumed = train_with(&model, &quick(4), &data, Some(half.checkpoint), &mut |_| {}).unwrap();
    assert_eq!(resumed.checkpoint.params, a.checkpoint.params);
    assert_eq!(resumed.log, a.log[2..]);
}

#[test]
fn log_and_checkpoints_are_written() {
    let (d, _) = tiny_data(2, 3_200, 2);
    let data = examples(&d);
    let ckdir = d.path().join("run");
    let cfg = TrainConfig {
        checkpoint_dir: Some(ckdir.clone()),
        eval_every: 2,
        ..quick(5)
    };
    let out = train(&ModelConfig::micro(), &cfg, &data).unwrap();
    let text = std::fs::read_to_string(ckdir.join(LOG_FILE)).unwrap();
    let lines: Vec<StepLog> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.log);
    assert!(!text.contains("wall_ms"));
    for f in ["step_000002.ckpt", "step_000004.ckpt", FINAL_CHECKPOINT] {
        assert!(ckdir.join(f).exists(), "{f}");
    }
    let back = Checkpoint::load(&ckdir.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(back, out.checkpoint);
}

#[test]
fn gamma_changes_only_the_stage_one_weight() {
    let (d, _) = tiny_data(2, 3_200, 3);
    let data = examples(&d);
    let model = ModelConfig::micro();
    let a = train(&model, &quick(3), &data).unwrap();
    let b = train(
        &model,
        &TrainConfig {
            gamma: 0.0,
            ..quick(3)
        },
        &data,
    )
    .unwrap();
    assert_eq!(a.log[0].l_sm, b.log[0].l_sm);
    assert_eq!(b.log[0].l_total, b.log[0].l_re);
    assert_ne!(a.log[2].l_sm, b.log[2].l_sm);
}

#[test]
fn non_finite_loss_names_step_and_block() {
    let (d, _) = tiny_data(1, 3_200, 4);
    let data = examples(&d);
    let model = ModelConfig::micro();
    let mut params = ParameterSet::init(&model, 0).unwrap();
    params.get_mut("ssm.r.1.out.b").unwrap().data_mut()[0] = f64::NAN;
    let plan = Arc::new(StftPlan::new(model.stft).unwrap());
    let batch: Vec<&Example> = data.iter().collect();
    let err = loss_and_grads(&params, &model, &plan, &batch, 0.01, 7)
        .err()
        .unwrap();
    match err {
        Error::TrainingFault { step, reason } => {
            assert_eq!(step, 7);
            assert!(reason.contains("block 1 (right)"), "{reason}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn clipped_update_respects_the_bound() {
    let (d, _) = tiny_data(2, 3_200, 5);
    let data = examples(&d);
    let model = ModelConfig::micro();
    let params = ParameterSet::init(&model, 0).unwrap();
    let plan = Arc::new(StftPlan::new(model.stft).unwrap());
    let batch: Vec<&Example> = data.iter().collect();
    let mut r = loss_and_grads(&params, &model, &plan, &batch, 0.01, 1).unwrap();
    let before = clip_global_norm(&mut r.grads, 1e-3);
    assert!(before > 1e-3);
    assert!(global_norm(&r.grads) <= 1e-3 + 1e-9);
}

#[test]
fn evaluation_round_trip_and_identity_diagnostic() {
    let (d, _) = tiny_data(2, 12_000, 6);
    let data_dir = d.path().join("data");
    let model = ModelConfig::micro();
    let ident = Checkpoint::identity(&model).unwrap();
    let r = evaluate(&ident, &data_dir, Some(&model), None).unwrap();
    assert_eq!(r.count, 2);
    for u in &r.utterances {
        assert!(
            u.si_snr_improvement_db.abs() < 1e-6,
            "{}",
            u.si_snr_improvement_db
        );
    }
    let random = Checkpoint::init(&model, 11).unwrap();
    let path = d.path().join("rand.ckpt");
    random.save(&path).unwrap();
    let a = evaluate(&random, &data_dir, None, None).unwrap();
    let b = evaluate(&Checkpoint::load(&path).unwrap(), &data_dir, None, None).unwrap();
    assert_eq!(a, b);
    assert!(a.means.unwrap().si_snr_improvement_db < 1.0);
    let other = ModelConfig {
        n_ssm_pairs: 3,
        ..model
    };
    assert!(matches!(
        evaluate(&random, &data_dir, Some(&other), None),
        Err(Error::Version(_))
    ));
}

#[test]
fn ssm_pair_ablation_has_five_columns_with_constant_increments() {
    let (d, m) = tiny_data(2, 12_000, 8);
    let eval = make_manifest(
        &[m.recipes[0].speech_path.clone()],
        &[m.recipes[0].noise_path.clone()],
        &ManifestRequest {
            n: 1,
            segment_len: 12_000,
            seed: 99,
            ..Default::default()
        },
    )
    .unwrap();
    let spec = AblationSpec {
        axis: AblationAxis::SsmPairs,
        model: ModelConfig::micro(),
        train: quick(1),
    };
    let table = run_ablation(&spec, &m, &eval, &d.path().join("abl"), &mut |_, _| {}).unwrap();
    assert_eq!(table.variants.len(), 5);
    let counts: Vec<usize> = table.variants.iter().map(|v| v.param_count).collect();
    let step = counts[1] - counts[0];
    assert!(counts.windows(2).all(|w| w[1] - w[0] == step && step > 0));
    let text = table.to_text();
    assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 6);
    assert!(text.contains("STOI (%)"));
}

#[test]
fn scenario_axis_changes_only_targets() {
    let (d, m) = tiny_data(2, 3_200, 9);
    let a = d.path().join("anti");
    let h = d.path().join("homo");
    generate_dataset(&m.with_scenario(ScenarioKind::Antiphasic).unwrap(), &a).unwrap();
    generate_dataset(&m.with_scenario(ScenarioKind::Homophasic).unwrap(), &h).unwrap();
    for r in &m.recipes {
        for f in ["y.wav", "s.wav"] {
            assert_eq!(
                std::fs::read(a.join(&r.id).join(f)).unwrap(),
                std::fs::read(h.join(&r.id).join(f)).unwrap()
            );
        }
        assert_ne!(
            std::fs::read(a.join(&r.id).join("yr.wav")).unwrap(),
            std::fs::read(h.join(&r.id).join("yr.wav")).unwrap()
        );
    }
}
