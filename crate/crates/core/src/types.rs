//! Shared domain types: observations, actions, transitions, trajectories and
//! the training hyperparameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Reward for the step on which the task completes.
pub const REWARD_SUCCESS: f64 = 10.0;
/// Reward for every other step.
pub const REWARD_STEP: f64 = -0.05;

/// Row-major HWC float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let at = (y * self.width + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Vec<Image>,
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::InvalidArgument(
                "observation carries no image".into(),
            ));
        }
        for (i, img) in self.images.iter().enumerate() {
            check_dim(
                "image buffer",
                img.height * img.width * img.channels,
                img.data.len(),
            )?;
            if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "image {i} has pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Continuous action; an optional final gripper channel is read by sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub Vec<f64>);

impl ActionVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Gripper closed when the last channel is positive.
    pub fn gripper_closed(&self) -> bool {
        self.0.last().is_some_and(|g| *g > 0.0)
    }
}

impl From<Vec<f64>> for ActionVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Clamp every component to `[-1, 1]`.
pub fn clip_action(a: &ActionVector, dim: usize) -> Result<ActionVector> {
    check_dim("action", dim, a.dim())?;
    Ok(ActionVector(
        a.0.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Arc<Observation>,
    pub a: ActionVector,
    pub r: f64,
    pub s_next: Arc<Observation>,
    pub done: bool,
    pub intervened: bool,
    /// Discounted return-to-go from this step.
    pub mc_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub success: bool,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Checks that only the last transition is terminal and that the
    /// episode fits the horizon.
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.len() > horizon {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} steps, horizon is {horizon}",
                self.len()
            )));
        }
        let n = self.len();
        if let Some(i) = self.transitions[..n.saturating_sub(1)]
            .iter()
            .position(|t| t.done)
        {
            return Err(Error::InvalidArgument(format!(
                "transition {i} is terminal but not last"
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of both fine-tuning stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Conservative penalty weight of the offline critic loss.
    pub alpha: f64,
    pub beta_offline: f64,
    pub eta_offline: f64,
    pub beta_online: f64,
    pub eta_online: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub polyak_tau: f64,
    pub n_critics: usize,
    pub utd_ratio: usize,
    pub seed: u64,
    /// Policy samples per state for the calibrated conservative term.
    pub n_policy_actions: usize,
    pub grad_clip: f64,
    pub hidden: usize,
    /// Standardize the critic's hidden pre-activations, which keeps its
    /// values from running away on states and actions no data covers.
    pub critic_layer_norm: bool,
    pub offline_steps: usize,
    pub online_episodes: usize,
    pub replay_capacity: usize,
    /// Learner starts once the replay buffer holds this many transitions.
    pub learner_gate: usize,
    pub starvation_timeout_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta_offline: 1.0,
            eta_offline: 0.1,
            beta_online: 0.5,
            eta_online: 1.0,
            gamma: 0.99,
            lr: 3e-4,
            batch_size: 256,
            polyak_tau: 0.005,
            n_critics: 2,
            utd_ratio: 1,
            seed: 0,
            n_policy_actions: 4,
            grad_clip: 10.0,
            hidden: 256,
            critic_layer_norm: true,
            offline_steps: 20_000,
            online_episodes: 300,
            replay_capacity: 200_000,
            learner_gate: 100,
            starvation_timeout_secs: 60.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "batch_size must be positive and even, got {}",
                self.batch_size
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta_offline", self.beta_offline),
            ("eta_offline", self.eta_offline),
            ("beta_online", self.beta_online),
            ("eta_online", self.eta_online),
            ("lr", self.lr),
            ("polyak_tau", self.polyak_tau),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.polyak_tau > 1.0 {
            return bad(format!("polyak_tau must be <= 1, got {}", self.polyak_tau));
        }
        if self.n_critics < 2 {
            return bad(format!("n_critics must be at least 2, got {}", self.n_critics));
        }
        if self.n_policy_actions == 0 || self.utd_ratio == 0 || self.hidden == 0 {
            return bad("n_policy_actions, utd_ratio and hidden must be positive".into());
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive".into());
        }
        Ok(())
    }
}
