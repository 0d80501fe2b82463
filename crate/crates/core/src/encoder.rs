//! Frozen observation encoder.
//!
//! Each image goes through its own stack of strided 3x3 convolutions; the
//! flattened feature maps are concatenated with proprioception and mapped by
//! two dense layers to a `tanh`-bounded embedding. The backbone is trained
//! once by behavior cloning through a throwaway regression head (or left at
//! its random initialization) and never changes afterwards.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::nn::{Adam, Conv2d, ConvTape, Mlp, MlpTape, Parameters};
use crate::types::Observation;

pub const DEFAULT_EMBED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub conv_channels: Vec<usize>,
    pub dense_hidden: usize,
    /// `[height, width, channels]` of every camera, in observation order.
    pub image_shapes: Vec<[usize; 3]>,
    pub proprio_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        use crate::envs::render::{SIDE_SIZE, WRIST_SIZE};
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            conv_channels: vec![8, 16, 16],
            dense_hidden: 128,
            image_shapes: vec![[SIDE_SIZE, SIDE_SIZE, 3], [WRIST_SIZE, WRIST_SIZE, 3]],
            proprio_dim: crate::envs::PROPRIO_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Skip training and freeze the random initialization.
    pub random_frozen: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            random_frozen: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBackbone {
    pub config: EncoderConfig,
    pub convs: Vec<Vec<Conv2d<f32>>>,
    pub dense: Mlp<f32>,
}

struct EncodeTape {
    /// Indexed by sample, image, layer.
    convs: Vec<Vec<Vec<ConvTape<f32>>>>,
    dense: MlpTape<f32>,
    embedding: Array2<f32>,
    flat_sizes: Vec<usize>,
}

impl EncoderBackbone {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.image_shapes.is_empty() || config.conv_channels.is_empty() || config.embed_dim == 0 {
            return Err(Error::Config(
                "encoder needs at least one image, one conv layer and a positive embedding size".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = 0;
        let mut convs = Vec::new();
        for &[h, w, c] in &config.image_shapes {
            let mut stack = Vec::new();
            let (mut h, mut w, mut cin) = (h, w, c);
            for &cout in &config.conv_channels {
                let conv = Conv2d::new(cin, cout, 3, 2, &mut rng);
                (h, w) = conv.out_hw(h, w);
                cin = cout;
                stack.push(conv);
            }
            flat += h * w * cin;
            convs.push(stack);
        }
        let dense = Mlp::new(
            &[flat + config.proprio_dim, config.dense_hidden, config.embed_dim],
            &mut rng,
        );
        Ok(Self { config, convs, dense })
    }

    /// Random initialization, frozen as is.
    pub fn random_frozen(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::new(config, seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn proprio_dim(&self) -> usize {
        self.config.proprio_dim
    }

    /// SHA-256 over the little-endian bytes of every parameter, in
    /// manifest order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, _, data) in self.tensors() {
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check(&self, obs: &Observation) -> Result<()> {
        check_dim("observation images", self.config.image_shapes.len(), obs.images.len())?;
        for (img, shape) in obs.images.iter().zip(&self.config.image_shapes) {
            if img.shape() != *shape {
                return Err(Error::Dimension {
                    what: "image shape",
                    expected: shape.iter().product(),
                    got: img.data.len(),
                });
            }
        }
        check_dim("proprio", self.config.proprio_dim, obs.proprio.len())
    }

    fn features(&self, obs: &Observation, tapes: Option<&mut Vec<Vec<ConvTape<f32>>>>) -> Vec<f32> {
        let mut feat = Vec::new();
        let mut record = Vec::new();
        for (img, stack) in obs.images.iter().zip(&self.convs) {
            let (mut x, mut hw) = (img.data.clone(), (img.height, img.width));
            let mut stack_tapes = Vec::new();
            for conv in stack {
                if tapes.is_some() {
                    let (y, out_hw, tape) = conv.forward_tape(&x, hw.0, hw.1);
                    stack_tapes.push(tape);
                    (x, hw) = (y, out_hw);
                } else {
                    (x, hw) = conv.forward(&x, hw.0, hw.1);
                }
            }
            feat.extend_from_slice(&x);
            record.push(stack_tapes);
        }
        feat.extend(obs.proprio.iter().map(|v| *v as f32));
        if let Some(t) = tapes {
            t.extend(record);
        }
        feat
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f32>> {
        Ok(self.encode_batch(&[obs])?.row(0).to_vec())
    }

    /// One embedding row per observation.
    pub fn encode_batch(&self, obs: &[&Observation]) -> Result<Array2<f32>> {
        let mut rows = Vec::with_capacity(obs.len());
        for o in obs {
            self.check(o)?;
            rows.push(self.features(o, None));
        }
        let width = self.dense.input_dim();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let x = Array2::from_shape_vec((obs.len(), width), flat).expect("feature width");
        Ok(self.dense.forward(x.view()).mapv(f32::tanh))
    }

    fn encode_tape(&self, obs: &[&Observation]) -> EncodeTape {
        let mut convs = Vec::with_capacity(obs.len());
        let mut rows = Vec::with_capacity(obs.len());
        for o in obs {
            let mut t = Vec::new();
            rows.push(self.features(o, Some(&mut t)));
            convs.push(t);
        }
        let width = self.dense.input_dim();
        let x = Array2::from_shape_vec((obs.len(), width), rows.into_iter().flatten().collect())
            .expect("feature width");
        let (pre, dense) = self.dense.forward_tape(x);
        let flat_sizes = self
            .convs
            .iter()
            .zip(&self.config.image_shapes)
            .map(|(stack, &[h, w, _])| {
                let (mut h, mut w) = (h, w);
                for c in stack {
                    (h, w) = c.out_hw(h, w);
                }
                h * w * stack.last().map(Conv2d::out_channels).unwrap_or(0)
            })
            .collect();
        EncodeTape {
            convs,
            dense,
            embedding: pre.mapv(f32::tanh),
            flat_sizes,
        }
    }

    fn backward(&self, tape: &EncodeTape, grad_emb: &Array2<f32>, grads: &mut EncoderBackbone) {
        let mut g = grad_emb.clone();
        ndarray::Zip::from(&mut g)
            .and(&tape.embedding)
            .for_each(|gv, &e| *gv *= 1.0 - e * e);
        let gx = self.dense.backward(&tape.dense, g, Some(&mut grads.dense));
        for (i, sample) in tape.convs.iter().enumerate() {
            let row = gx.row(i);
            let mut at = 0;
            for (j, stack_tape) in sample.iter().enumerate() {
                let n = tape.flat_sizes[j];
                let mut gout = row.slice(s![at..at + n]).to_vec();
                at += n;
                for (k, conv) in self.convs[j].iter().enumerate().rev() {
                    let need_input = k > 0;
                    match conv.backward(&stack_tape[k], &gout, &mut grads.convs[j][k], need_input) {
                        Some(gin) => gout = gin,
                        None => break,
                    }
                }
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|s| s.iter().map(Conv2d::zeros_like).collect())
                .collect(),
            dense: self.dense.zeros_like(),
        }
    }
}

impl Parameters<f32> for EncoderBackbone {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (i, stack) in self.convs.iter().enumerate() {
            for (j, conv) in stack.iter().enumerate() {
                for (n, s, d) in conv.tensors() {
                    out.push((format!("img{i}.conv{j}.{n}"), s, d));
                }
            }
        }
        for (n, s, d) in self.dense.tensors() {
            out.push((format!("dense.{n}"), s, d));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for stack in &mut self.convs {
            for conv in stack {
                out.extend(conv.tensors_mut());
            }
        }
        out.extend(self.dense.tensors_mut());
        out
    }
}

/// One pretraining example: an observation and its expert action, padded
/// with zeros to a common width.
#[derive(Debug, Clone)]
pub struct PretrainSample<'a> {
    pub obs: &'a Observation,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Mean squared regression error of the throwaway head, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains backbone plus a throwaway action-regression head on expert
/// samples, then drops the head.
pub fn pretrain_backbone(
    samples: &[PretrainSample<'_>],
    encoder: EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(EncoderBackbone, PretrainReport)> {
    let mut backbone = EncoderBackbone::new(encoder, cfg.seed)?;
    if cfg.random_frozen {
        return Ok((backbone, PretrainReport { epoch_losses: Vec::new() }));
    }
    if samples.is_empty() {
        return Err(Error::Empty("pretraining demo set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretraining batch_size must be positive".into()));
    }
    let width = samples[0].action.len();
    for s in samples {
        check_dim("padded pretraining action", width, s.action.len())?;
        backbone.check(s.obs)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut head: Mlp<f32> = Mlp::new(&[backbone.embed_dim(), 64, width], &mut rng);
    let mut opt_b = Adam::new(cfg.lr).with_clip(10.0);
    let mut opt_h = Adam::new(cfg.lr).with_clip(10.0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| samples[i].obs).collect();
            let target = Array2::from_shape_fn((chunk.len(), width), |(r, c)| samples[chunk[r]].action[c] as f32);
            let tape = backbone.encode_tape(&obs);
            let (pred, htape) = head.forward_tape(tape.embedding.clone());
            let diff = &pred - &target;
            let n = (chunk.len() * width) as f32;
            total += diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>();
            count += chunk.len() * width;
            let mut gh = head.zeros_like();
            let gemb = head.backward(&htape, diff.mapv(|d| 2.0 * d / n), Some(&mut gh));
            let mut gb = backbone.zeros_like();
            backbone.backward(&tape, &gemb, &mut gb);
            opt_h.step(&mut head, &gh);
            opt_b.step(&mut backbone, &gb);
        }
        let loss = total / count as f64;
        log::debug!("encoder pretraining epoch loss {loss:.5}");
        epoch_losses.push(loss);
    }
    Ok((backbone, PretrainReport { epoch_losses }))
}

/// Proprioception rows of a batch of observations.
pub fn proprio_matrix(obs: &[&Observation]) -> Array2<f32> {
    let d = obs.first().map(|o| o.proprio.len()).unwrap_or(0);
    Array2::from_shape_fn((obs.len(), d), |(i, j)| obs[i].proprio[j] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, EnvKind, SimEnv};
    use rand::Rng;

    fn demo_obs(kind: EnvKind, n: usize) -> Vec<(Observation, Vec<f64>)> {
        let mut env = SimEnv::new(EnvConfig::new(kind)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::new();
        let mut seed = 0;
        while out.len() < n {
            let mut o = env.reset(seed);
            seed += 1;
            loop {
                let a = env.oracle_action(0.1, &mut rng);
                let mut padded = a.0.clone();
                padded.resize(3, 0.0);
                out.push((o, padded));
                let (next, done, _) = env.step(&a).unwrap();
                o = next;
                if done || out.len() >= n {
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn random_frozen_is_deterministic() {
        let a = EncoderBackbone::random_frozen(EncoderConfig::default(), 7).unwrap();
        let b = EncoderBackbone::random_frozen(EncoderConfig::default(), 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = EncoderBackbone::random_frozen(EncoderConfig::default(), 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn encode_is_deterministic_and_bounded() {
        let enc = EncoderBackbone::random_frozen(EncoderConfig::default(), 1).unwrap();
        let mut env = SimEnv::new(EnvConfig::new(EnvKind::Insert2d)).unwrap();
        let o = env.reset(3);
        let a = enc.encode(&o).unwrap();
        assert_eq!(a, enc.encode(&o).unwrap());
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        let batch = enc.encode_batch(&[&o, &o]).unwrap();
        assert_eq!(batch.row(1).to_vec(), a);
    }

    #[test]
    fn goal_location_changes_embedding() {
        let enc = EncoderBackbone::random_frozen(EncoderConfig::default(), 2).unwrap();
        let mut env = SimEnv::new(EnvConfig::new(EnvKind::Reach2d)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        env.reset(0);
        for _ in 0..100 {
            let mut s = env.state().clone();
            s.goal = [rng.random_range(0.3..0.9), rng.random_range(0.3..0.9)];
            env.set_state(s.clone());
            let a = enc.encode(&env.observe()).unwrap();
            s.goal[0] += rng.random_range(0.05..0.1);
            env.set_state(s);
            let b = enc.encode(&env.observe()).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let enc = EncoderBackbone::random_frozen(EncoderConfig::default(), 1).unwrap();
        let mut env = SimEnv::new(EnvConfig::new(EnvKind::Reach2d)).unwrap();
        let mut o = env.reset(0);
        o.proprio.pop();
        assert!(matches!(enc.encode(&o), Err(Error::Dimension { .. })));
        let mut o = env.reset(0);
        o.images.pop();
        assert!(enc.encode(&o).is_err());
    }

    #[test]
    fn empty_pretraining_set_is_rejected() {
        let r = pretrain_backbone(&[], EncoderConfig::default(), &PretrainConfig::default());
        assert!(matches!(r, Err(Error::Empty(_))));
        let cfg = PretrainConfig {
            random_frozen: true,
            ..PretrainConfig::default()
        };
        assert!(pretrain_backbone(&[], EncoderConfig::default(), &cfg).is_ok());
    }

    #[test]
    fn pretraining_reduces_loss_and_is_repeatable() {
        let data = demo_obs(EnvKind::Reach2d, 200);
        let samples: Vec<_> = data
            .iter()
            .map(|(o, a)| PretrainSample {
                obs: o,
                action: a.clone(),
            })
            .collect();
        let cfg = PretrainConfig {
            epochs: 4,
            ..PretrainConfig::default()
        };
        let (a, rep) = pretrain_backbone(&samples, EncoderConfig::default(), &cfg).unwrap();
        assert!(rep.epoch_losses.last().unwrap() < &rep.epoch_losses[0], "{:?}", rep.epoch_losses);
        let (b, _) = pretrain_backbone(&samples, EncoderConfig::default(), &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let init = EncoderBackbone::random_frozen(EncoderConfig::default(), 0).unwrap();
        assert_ne!(a.fingerprint(), init.fingerprint());
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        // tiny config in f32; loose tolerance reflects single precision
        let cfg = EncoderConfig {
            embed_dim: 3,
            conv_channels: vec![2, 2],
            dense_hidden: 4,
            image_shapes: vec![[6, 6, 3]],
            proprio_dim: 2,
        };
        let enc = EncoderBackbone::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut img = crate::types::Image::zeros(6, 6, 3);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let obs = Observation {
            images: vec![img],
            proprio: vec![0.3, -0.2],
        };
        let w = [0.7f32, -1.1, 0.4];
        let loss = |e: &EncoderBackbone| -> f64 {
            let emb = e.encode(&obs).unwrap();
            emb.iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let tape = enc.encode_tape(&[&obs]);
        let mut g = enc.zeros_like();
        let gw = Array2::from_shape_vec((1, 3), w.to_vec()).unwrap();
        enc.backward(&tape, &gw, &mut g);
        let theta = enc.flat();
        let analytic = g.flat();
        let h = 1e-2f32;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let mut up = enc.clone();
            up.set_flat(&p);
            p[i] -= 2.0 * h;
            let mut dn = enc.clone();
            dn.set_flat(&p);
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            assert!((fd - a).abs() <= 2e-3 + 2e-2 * a.abs(), "param {i}: {fd} vs {a}");
        }
    }
}
