mod common;

use affordsplat::checkpoint::Checkpoint;
use affordsplat::config::{ExperimentConfig, SplitName, StageName, Subset};
use affordsplat::harness::{resolve_split, run_evaluate, run_pretrain};
use affordsplat::{Error, ExitClass};
use affordsplat_core::affordnet::ModelConfig;
use affordsplat_core::train::Stage;

#[test]
fn flat_toml_parses_and_flags_override() {
    let cfg = ExperimentConfig::from_toml("stage = \"finetune\"\nseed = 4\nlr = 0.001\nsplit = \"unseen\"\nd = 32\n").unwrap();
    assert_eq!(cfg.stage, Some(StageName::Finetune));
    assert_eq!(cfg.split, Some(SplitName::Unseen));
    let top = ExperimentConfig { lr: Some(0.5), epochs: Some(3), ..Default::default() };
    let merged = cfg.overlay(&top).unwrap();
    assert_eq!((merged.lr, merged.epochs, merged.seed, merged.d), (Some(0.5), Some(3), Some(4), Some(32)));
    let back = ExperimentConfig::from_toml(&merged.to_toml().unwrap()).unwrap();
    assert_eq!(back, merged);
}

#[test]
fn unknown_keys_and_missing_seed_are_config_errors() {
    let e = ExperimentConfig::from_toml("learning_rate = 1.0\n").unwrap_err();
    assert_eq!(e.class(), ExitClass::Config);
    let e = ExperimentConfig::default().stage(Stage::Pretrain).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let bad_model = ExperimentConfig { d: Some(30), heads: Some(4), ..Default::default() };
    assert_eq!(bad_model.model().unwrap_err().class(), ExitClass::Config);
}

#[test]
fn stage_defaults_follow_the_training_recipe() {
    let cfg = ExperimentConfig { seed: Some(1), ..Default::default() };
    let p = cfg.stage(Stage::Pretrain).unwrap();
    let f = cfg.stage(Stage::Finetune).unwrap();
    assert_eq!((p.optimizer.lr, p.epochs, p.k), (1e-5, 1, 4));
    assert_eq!((f.optimizer.lr, f.epochs), (1e-4, 60));
    assert_eq!((f.optimizer.beta1, f.optimizer.beta2, f.optimizer.weight_decay), (0.9, 0.999, 0.01));
    assert_eq!(cfg.model().unwrap(), ModelConfig::default());
    assert_eq!(cfg.question_count().unwrap(), 3);
}

#[test]
fn evaluating_with_a_different_architecture_is_incompatible() {
    let ds = common::small_dataset(4, 8);
    let cfg = common::toy_config(2);
    let split = resolve_split(&cfg, &ds).unwrap();
    let ck: Checkpoint = run_pretrain(&cfg, &ds, &split).unwrap();
    let other = ExperimentConfig { d: Some(16), ..cfg.clone() };
    let e = run_evaluate(&other, &ck, &ds).unwrap_err();
    assert!(matches!(e, Error::Core(affordsplat_core::Error::Compatibility(_))), "{e}");
    assert_eq!(e.class(), ExitClass::Config);
    // Leaving the architecture unset defers to the checkpoint.
    let bare = ExperimentConfig { seed: Some(2), subset: Some(Subset::Train), ..Default::default() };
    run_evaluate(&bare, &ck, &ds).unwrap();
}
