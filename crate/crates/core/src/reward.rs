//! Binary success classifier over frozen embeddings, and the sparse reward
//! it emits.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderBackbone;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Adam, Mlp};
use crate::types::{Observation, REWARD_STEP, REWARD_SUCCESS};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub threshold: f64,
    /// Fraction of each class held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            hidden: 64,
            lr: 1e-3,
            batch_size: 64,
            threshold: DEFAULT_THRESHOLD,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessClassifier {
    pub net: Mlp<f32>,
    pub threshold: f64,
    pub reward_success: f64,
    pub reward_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    /// Accuracy on the held-out split; equals the training accuracy when a
    /// class is too small to hold anything out.
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(success, reward)` for a success probability.
pub fn reward_for_probability(p: f64, threshold: f64) -> (f64, bool) {
    let success = p >= threshold;
    (if success { REWARD_SUCCESS } else { REWARD_STEP }, success)
}

impl SuccessClassifier {
    pub fn embed_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn probabilities(&self, emb: &Array2<f32>) -> Result<Array1<f64>> {
        check_dim("classifier input", self.embed_dim(), emb.ncols())?;
        Ok(self.net.forward(emb.view()).column(0).mapv(|z| sigmoid(z as f64)))
    }

    pub fn probability(&self, emb: &[f32]) -> Result<f64> {
        let m = Array2::from_shape_vec((1, emb.len()), emb.to_vec()).expect("row");
        Ok(self.probabilities(&m)?[0])
    }

    /// Reward and success flag for one embedded observation.
    pub fn step_reward_embedded(&self, emb: &[f32]) -> Result<(f64, bool)> {
        let success = self.probability(emb)? >= self.threshold;
        Ok((if success { self.reward_success } else { self.reward_step }, success))
    }

    pub fn step_reward(&self, backbone: &EncoderBackbone, obs: &Observation) -> Result<(f64, bool)> {
        self.step_reward_embedded(&backbone.encode(obs)?)
    }
}

/// Fraction classified correctly at the deployed decision threshold.
fn accuracy(net: &Mlp<f32>, x: &Array2<f32>, y: &[f32], threshold: f64) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    let z = net.forward(x.view());
    let hits = z
        .column(0)
        .iter()
        .zip(y)
        .filter(|(z, y)| (sigmoid(**z as f64) >= threshold) == (**y > 0.5))
        .count();
    hits as f64 / y.len() as f64
}

/// Trains on embedding rows. A per-class `holdout` fraction is kept aside
/// for the reported accuracy.
pub fn train_on_embeddings(
    positives: &Array2<f32>,
    negatives: &Array2<f32>,
    cfg: &ClassifierConfig,
) -> Result<(SuccessClassifier, ClassifierReport)> {
    if positives.nrows() == 0 {
        return Err(Error::Empty("positive example set"));
    }
    if negatives.nrows() == 0 {
        return Err(Error::Empty("negative example set"));
    }
    check_dim("example width", positives.ncols(), negatives.ncols())?;
    if !(0.0..1.0).contains(&cfg.holdout) || !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::Config("holdout must lie in [0, 1) and threshold in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (set, label) in [(positives, 1.0f32), (negatives, 0.0)] {
        let mut idx: Vec<usize> = (0..set.nrows()).collect();
        idx.shuffle(&mut rng);
        let k = (set.nrows() as f64 * cfg.holdout).floor() as usize;
        test.extend(idx[..k].iter().map(|&i| (set.row(i), label)));
        train.extend(idx[k..].iter().map(|&i| (set.row(i), label)));
    }
    let stack = |rows: &[(ndarray::ArrayView1<f32>, f32)]| -> (Array2<f32>, Vec<f32>) {
        let views: Vec<_> = rows.iter().map(|(r, _)| r.view().insert_axis(Axis(0))).collect();
        let x = if views.is_empty() {
            Array2::zeros((0, positives.ncols()))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        (x, rows.iter().map(|(_, y)| *y).collect())
    };
    let (xt, yt) = stack(&train);
    let (xh, yh) = stack(&test);

    let mut net: Mlp<f32> = Mlp::new(&[positives.ncols(), cfg.hidden, 1], &mut rng);
    let mut opt = Adam::new(cfg.lr).with_clip(10.0);
    let mut order: Vec<usize> = (0..yt.len()).collect();
    // balance the classes in the loss
    let n_pos = yt.iter().filter(|y| **y > 0.5).count() as f32;
    let n_neg = yt.len() as f32 - n_pos;
    let (w_pos, w_neg) = (0.5 / n_pos.max(1.0), 0.5 / n_neg.max(1.0));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = xt.select(Axis(0), chunk);
            let (z, tape) = net.forward_tape(x);
            let scale = yt.len() as f32 / chunk.len() as f32;
            let g = Array2::from_shape_fn((chunk.len(), 1), |(r, _)| {
                let y = yt[chunk[r]];
                let p = sigmoid(z[[r, 0]] as f64) as f32;
                let w = if y > 0.5 { w_pos } else { w_neg };
                w * scale * (p - y)
            });
            let mut grads = net.zeros_like();
            net.backward(&tape, g, Some(&mut grads));
            opt.step(&mut net, &grads);
        }
    }
    let train_accuracy = accuracy(&net, &xt, &yt, cfg.threshold);
    let heldout_accuracy = if yh.is_empty() {
        train_accuracy
    } else {
        accuracy(&net, &xh, &yh, cfg.threshold)
    };
    Ok((
        SuccessClassifier {
            net,
            threshold: cfg.threshold,
            reward_success: REWARD_SUCCESS,
            reward_step: REWARD_STEP,
        },
        ClassifierReport {
            train_accuracy,
            heldout_accuracy,
            heldout_size: yh.len(),
        },
    ))
}

pub fn train_classifier(
    positives: &[Observation],
    negatives: &[Observation],
    backbone: &EncoderBackbone,
    cfg: &ClassifierConfig,
) -> Result<(SuccessClassifier, ClassifierReport)> {
    if positives.is_empty() {
        return Err(Error::Empty("positive example set"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative example set"));
    }
    let p: Vec<&Observation> = positives.iter().collect();
    let n: Vec<&Observation> = negatives.iter().collect();
    train_on_embeddings(&backbone.encode_batch(&p)?, &backbone.encode_batch(&n)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::standard_normal;

    fn blobs(n: usize, seed: u64) -> (Array2<f32>, Array2<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Array2<f32> = standard_normal(n, 8, &mut rng);
        let mut q: Array2<f32> = standard_normal(n, 8, &mut rng);
        p.column_mut(0).mapv_inplace(|v| 0.3 * v + 3.0);
        q.column_mut(0).mapv_inplace(|v| 0.3 * v - 3.0);
        (p, q)
    }

    #[test]
    fn separable_blobs_are_learned_exactly() {
        let (p, q) = blobs(100, 1);
        let cfg = ClassifierConfig {
            epochs: 50,
            ..ClassifierConfig::default()
        };
        let (_, rep) = train_on_embeddings(&p, &q, &cfg).unwrap();
        assert_eq!(rep.heldout_accuracy, 1.0);
        assert_eq!(rep.heldout_size, 40);
    }

    #[test]
    fn identical_sets_are_irreducibly_confused() {
        let (p, _) = blobs(100, 2);
        let cfg = ClassifierConfig {
            epochs: 50,
            ..ClassifierConfig::default()
        };
        let (_, rep) = train_on_embeddings(&p, &p, &cfg).unwrap();
        assert!((rep.heldout_accuracy - 0.5).abs() <= 0.1, "{rep:?}");
        assert!(rep.train_accuracy < 0.8);
    }

    #[test]
    fn single_points_are_separated() {
        let p = Array2::from_shape_vec((1, 3), vec![1.0f32, 0.0, 0.5]).unwrap();
        let q = Array2::from_shape_vec((1, 3), vec![-1.0f32, 0.2, 0.0]).unwrap();
        let cfg = ClassifierConfig {
            epochs: 500,
            threshold: 0.5,
            ..ClassifierConfig::default()
        };
        let (c, _) = train_on_embeddings(&p, &q, &cfg).unwrap();
        assert!(c.step_reward_embedded(p.row(0).as_slice().unwrap()).unwrap().1);
        assert!(!c.step_reward_embedded(q.row(0).as_slice().unwrap()).unwrap().1);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (p, _) = blobs(3, 0);
        let e = Array2::zeros((0, 8));
        let cfg = ClassifierConfig::default();
        assert!(matches!(train_on_embeddings(&p, &e, &cfg), Err(Error::Empty(_))));
        assert!(matches!(train_on_embeddings(&e, &p, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (p, q) = blobs(30, 3);
        let cfg = ClassifierConfig {
            epochs: 5,
            ..ClassifierConfig::default()
        };
        let (a, _) = train_on_embeddings(&p, &q, &cfg).unwrap();
        let (b, _) = train_on_embeddings(&p, &q, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reward_follows_threshold() {
        assert_eq!(reward_for_probability(0.95, 0.9), (10.0, true));
        assert_eq!(reward_for_probability(0.5, 0.9), (-0.05, false));
        assert_eq!(reward_for_probability(0.9, 0.9), (10.0, true));
        // raising the threshold never turns a failure into a success
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            for t in [0.3, 0.5, 0.7, 0.9] {
                let lo = reward_for_probability(p, t).1;
                let hi = reward_for_probability(p, t + 0.05).1;
                assert!(!hi || lo);
            }
        }
    }
}
