//! Reference settings for the desk-scale pipeline: encoder pretraining,
//! classifier examples, demonstrations and training hyperparameters. The
//! command line uses them as defaults and the end-to-end suites run them.

use crate::buffers::annotate_returns;
use crate::collect::{collect_demos, pretraining_pairs, success_examples};
use crate::encoder::{pretrain_backbone, EncoderBackbone, EncoderConfig, PretrainConfig, PretrainReport, PretrainSample};
use crate::envs::{EnvConfig, EnvKind};
use crate::error::Result;
use crate::reward::{train_classifier, ClassifierConfig, ClassifierReport, SuccessClassifier};
use crate::types::{TrainConfig, Trajectory};

pub const PRETRAIN_EPISODES: usize = 100;
pub const PRETRAIN_NOISE: f64 = 0.3;
pub const PRETRAIN_SEED: u64 = 10_000;
/// Expert actions per pretraining label.
pub const ACTION_CHUNK: usize = 20;
pub const PRETRAIN_EPOCHS: usize = 20;

pub const EXAMPLE_EPISODES: usize = 250;
pub const EXAMPLE_NOISE: f64 = 0.3;
pub const EXAMPLE_SEED: u64 = 20_000;

/// Discount used for the return annotation of demonstrations.
pub const RETURN_GAMMA: f64 = 0.99;

/// Batch size for single-core runs. The other hyperparameters keep their
/// defaults.
pub const DESK_BATCH: usize = 64;

/// Backbone pretrained on noisy expert play of all three tasks.
pub fn pretrain_reference_encoder() -> Result<(EncoderBackbone, PretrainReport)> {
    let pairs = pretraining_pairs(&EnvKind::ALL, PRETRAIN_EPISODES, PRETRAIN_NOISE, PRETRAIN_SEED, ACTION_CHUNK)?;
    let samples: Vec<PretrainSample<'_>> = pairs
        .iter()
        .map(|(obs, action)| PretrainSample {
            obs,
            action: action.clone(),
        })
        .collect();
    let cfg = PretrainConfig {
        epochs: PRETRAIN_EPOCHS,
        ..PretrainConfig::default()
    };
    pretrain_backbone(&samples, EncoderConfig::default(), &cfg)
}

pub fn reference_classifier(
    kind: EnvKind,
    backbone: &EncoderBackbone,
) -> Result<(SuccessClassifier, ClassifierReport)> {
    let ex = success_examples(&EnvConfig::new(kind), EXAMPLE_EPISODES, EXAMPLE_NOISE, EXAMPLE_SEED)?;
    train_classifier(&ex.positives, &ex.negatives, backbone, &ClassifierConfig::default())
}

/// The default number of successful demonstrations at the default operator
/// noise, annotated with discounted returns. Seeds start at `1000 * seed`.
pub fn reference_demos(kind: EnvKind, seed: u64) -> Result<Vec<Trajectory>> {
    let mut demos = collect_demos(
        &EnvConfig::new(kind),
        kind.default_demos(),
        kind.default_demo_noise(),
        seed * 1000,
        true,
    )?;
    for d in &mut demos {
        annotate_returns(d, RETURN_GAMMA)?;
    }
    Ok(demos)
}

pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: DESK_BATCH,
        seed,
        ..TrainConfig::default()
    }
}

/// Online episode `i` of run `seed` resets with `online_seed_base(seed) + i`,
/// clear of demonstration and evaluation seeds.
pub fn online_seed_base(seed: u64) -> u64 {
    100_000 + seed * 1000
}
