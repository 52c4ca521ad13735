#![allow(dead_code)]

use affordsplat::config::ExperimentConfig;
use affordsplat_core::datagen::{generate_dataset, Dataset, DatasetConfig};

pub fn small_dataset(n_objects: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        n_objects,
        seed,
        max_affordances: Some(2),
        n_gaussians_range: (40, 56),
        n_points: 128,
        ..Default::default()
    })
    .unwrap()
}

/// Smallest architecture the model accepts, for fast harness tests.
pub fn toy_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        d: Some(8),
        d_text: Some(8),
        n1: Some(16),
        n2: Some(8),
        n3: Some(4),
        group_size: Some(4),
        heads: Some(2),
        text_heads: Some(2),
        text_layers: Some(1),
        answer_layers: Some(1),
        encoder_layers: Some(1),
        decoder_layers: Some(1),
        max_text_len: Some(24),
        d_consis: Some(8),
        pc_points: Some(32),
        epochs: Some(1),
        batch_size: Some(4),
        lr: Some(1e-3),
        ..Default::default()
    }
}

/// Mugs and knives only, so every (category, affordance) pair has enough
/// samples for non-empty Seen validation and test parts from 16 objects.
pub fn two_category_dataset(n_objects: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        n_objects,
        seed,
        categories: vec!["mug".into(), "knife".into()],
        max_affordances: Some(2),
        n_gaussians_range: (40, 56),
        n_points: 128,
        ..Default::default()
    })
    .unwrap()
}
