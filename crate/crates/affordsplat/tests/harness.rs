mod common;

use affordsplat::config::ExperimentConfig;
use affordsplat::harness::{
    evaluate_predictions, evaluation_entries, fixed_question, predict_object, resolve_split, run_datagen, run_evaluate,
    run_finetune, run_predict, run_pretrain, sample_indices, MANIFEST_FILE,
};
use affordsplat::ply::{save_gaussian_ply, PlyEncoding};
use affordsplat::scores::read_scores;
use affordsplat_core::datagen::{Dataset, SplitMode};
use affordsplat_core::evalkit::IouMode;
use affordsplat_core::params::ParamGroup;
use affordsplat_core::rng;
use rand::Rng;

#[test]
fn oracle_predictor_scores_perfectly() {
    let ds = common::two_category_dataset(16, 4);
    let cfg = ExperimentConfig { seed: Some(0), ..Default::default() };
    let split = resolve_split(&cfg, &ds).unwrap();
    for ids in [&split.train, &split.test] {
        let entries = evaluation_entries(&ds, ids, 3).unwrap();
        let truth = entries.iter().map(|e| ds.ground_truth(&ds.samples[e.sample]).scores.clone()).collect();
        let r = evaluate_predictions(&ds, &entries, truth, "seen", IouMode::Sweep).unwrap();
        assert_eq!(r.overall.miou.mean, Some(1.0));
        assert_eq!(r.overall.mae.mean, Some(0.0));
        assert!((r.overall.sim.mean.unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn random_scores_on_balanced_labels_rank_at_chance() {
    // 100 samples whose truth is half positive: AUC of uniform noise concentrates at 0.5.
    let mut ds: Dataset = common::small_dataset(50, 6);
    for o in &mut ds.objects {
        for m in &mut o.masks {
            let n = m.scores.len();
            m.scores = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
        }
    }
    let ids: Vec<String> = ds.samples.iter().take(100).map(|s| s.id.clone()).collect();
    assert_eq!(ids.len(), 100);
    let entries = evaluation_entries(&ds, &ids, 1).unwrap();
    let mut r = rng::stream(17, "random-predictor");
    let scores = entries.iter().map(|e| (0..ds.ground_truth(&ds.samples[e.sample]).len()).map(|_| r.random::<f64>()).collect()).collect();
    let rep = evaluate_predictions(&ds, &entries, scores, "seen", IouMode::Sweep).unwrap();
    let auc = rep.overall.auc.mean.unwrap();
    assert!((0.45..=0.55).contains(&auc), "{auc}");
}

#[test]
fn fixed_questions_are_distinct_and_stable() {
    let qs: Vec<String> = (0..3).map(|j| fixed_question("mug", "grasp", j, 3).unwrap()).collect();
    assert_eq!(qs.len(), 3);
    assert!(qs[0] != qs[1] && qs[1] != qs[2] && qs[0] != qs[2]);
    assert_eq!(qs[1], fixed_question("mug", "grasp", 1, 3).unwrap());
}

#[test]
fn evaluation_is_deterministic_and_writes_masks() {
    let ds = common::two_category_dataset(16, 9);
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { out: Some(dir.path().to_path_buf()), ..common::toy_config(5) };
    let split = resolve_split(&cfg, &ds).unwrap();
    let ck = run_finetune(&cfg, &ds, &split, None).unwrap();
    let a = run_evaluate(&cfg, &ck, &ds).unwrap();
    let b = run_evaluate(&cfg, &ck, &ds).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.samples.len(), split.test.len() * 3);
    let first = &a.samples[0].id;
    let file = dir.path().join("masks").join(format!("{}.f32", first.replace(['/', '#'], "_")));
    let (scores, side) = read_scores(&file).unwrap();
    let s = ds.sample(first.split('#').next().unwrap()).unwrap();
    assert_eq!(scores.len(), ds.objects[s.object].gaussian.len());
    assert_eq!(side.source, *first);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = common::small_dataset(4, 1);
    let cfg = ExperimentConfig { lr: Some(0.0), epochs: Some(2), ..common::toy_config(3) };
    let split = resolve_split(&cfg, &ds).unwrap();
    let trained = run_pretrain(&cfg, &ds, &split).unwrap();
    let fresh = run_pretrain(&ExperimentConfig { epochs: Some(0), ..cfg.clone() }, &ds, &split).unwrap();
    for g in ParamGroup::ALL {
        assert_eq!(trained.store.checksum(g), fresh.store.checksum(g), "{g:?}");
    }
    assert_eq!(trained.header.loss_history.len(), 2);
}

#[test]
fn pretraining_never_reads_gaussian_labels() {
    let ds = common::small_dataset(4, 2);
    let cfg = ExperimentConfig { epochs: Some(2), ..common::toy_config(8) };
    let split = resolve_split(&cfg, &ds).unwrap();
    let mut unlabeled = ds.clone();
    for o in &mut unlabeled.objects {
        for m in &mut o.masks {
            m.scores.iter_mut().for_each(|s| *s = f64::NAN);
        }
    }
    let a = run_pretrain(&cfg, &ds, &split).unwrap();
    let b = run_pretrain(&cfg, &unlabeled, &split).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(a.header.loss_history, b.header.loss_history);
}

#[test]
fn finetune_keeps_the_text_encoder_and_the_best_epoch() {
    let ds = common::two_category_dataset(16, 3);
    let cfg = ExperimentConfig { epochs: Some(3), ..common::toy_config(4) };
    let split = resolve_split(&cfg, &ds).unwrap();
    assert!(!split.val.is_empty());
    let init = run_pretrain(&ExperimentConfig { epochs: Some(0), ..cfg.clone() }, &ds, &split).unwrap();
    let ck = run_finetune(&cfg, &ds, &split, Some(&init)).unwrap();
    assert_eq!(ck.store.checksum(ParamGroup::TextEncoder), init.store.checksum(ParamGroup::TextEncoder));
    assert_ne!(ck.store.checksum(ParamGroup::Decoder), init.store.checksum(ParamGroup::Decoder));
    let vals: Vec<f64> = ck.header.val_history.iter().map(|v| v.unwrap()).collect();
    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(vals[ck.header.epoch - 1], best);
}

#[test]
fn prediction_aligns_with_the_input_file() {
    let ds = common::small_dataset(4, 7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_config(1);
    let split = resolve_split(&cfg, &ds).unwrap();
    let ck = run_finetune(&cfg, &ds, &split, None).unwrap();
    let g = &ds.objects[0].gaussian;
    let ply = dir.path().join("object.ply");
    save_gaussian_ply(&ply, g, PlyEncoding::BinaryLittleEndian).unwrap();
    let pcfg = ExperimentConfig {
        input: Some(ply),
        question: Some("where would you grasp this mug".into()),
        out: Some(dir.path().join("pred")),
        ..cfg.clone()
    };
    let a = run_predict(&pcfg, &ck).unwrap();
    let a_bytes = std::fs::read(a.score_file.as_ref().unwrap()).unwrap();
    let b = run_predict(&pcfg, &ck).unwrap();
    assert_eq!(a_bytes, std::fs::read(b.score_file.as_ref().unwrap()).unwrap());
    let (scores, side) = read_scores(a.score_file.as_ref().unwrap()).unwrap();
    assert_eq!(scores.len(), g.len());
    assert_eq!(scores, predict_object(&ck, g, "where would you grasp this mug").unwrap().scores);
    assert_eq!(side.answer.as_deref(), Some(a.prediction.answer.as_str()));
    assert!(a.preview_file.unwrap().exists());
}

#[test]
fn datagen_writes_a_consistent_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seed: Some(12),
        objects: Some(16),
        min_gaussians: Some(40),
        max_gaussians: Some(48),
        points: Some(64),
        split: Some(affordsplat::config::SplitName::Unseen),
        holdout_count: Some(1),
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let g = run_datagen(&cfg).unwrap();
    assert_eq!(g.split.mode, SplitMode::Unseen);
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let m: affordsplat::harness::Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.split, g.split);
    assert_eq!(m.fingerprint, g.dataset.fingerprint());
    // Reloading the dataset and re-deriving the split reproduces the manifest.
    let loaded = affordsplat::compact::load_dataset(dir.path().join("dataset.afs")).unwrap();
    assert_eq!(resolve_split(&cfg, &loaded).unwrap(), m.split);
    let train = sample_indices(&loaded, &m.split.train).unwrap();
    assert!(train.iter().all(|&i| {
        let s = &loaded.samples[i];
        !m.split.held_out.contains(&(s.category.clone(), s.affordance.clone()))
    }));
}
