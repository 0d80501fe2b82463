//! Per-step override of the policy during online training.
//!
//! The interaction loop consults an [`Intervener`] before every step. While
//! it is active its action is executed instead of the policy's and the step
//! is stored as a demonstration.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{SimEnv, StepInfo};
use crate::error::{Error, Result};
use crate::types::{ActionVector, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionDecision {
    pub active: bool,
    pub action: Option<ActionVector>,
}

impl InterventionDecision {
    pub fn inactive() -> Self {
        Self {
            active: false,
            action: None,
        }
    }

    pub fn take(action: ActionVector) -> Self {
        Self {
            active: true,
            action: Some(action),
        }
    }
}

/// What the interaction loop publishes after every step, e.g. for a remote
/// operator console.
#[derive(Debug, Clone, Copy)]
pub struct StepReport<'a> {
    pub episode: usize,
    pub step: usize,
    pub image: &'a Image,
    pub proprio: &'a [f64],
    pub policy_action: &'a ActionVector,
    pub intervening: bool,
    pub success_rate_20: f64,
    pub intervention_rate_20: f64,
}

pub trait Intervener: Send {
    /// Called before the first step of every episode.
    fn start_episode(&mut self) {}

    /// Decision for the next step. `last` is the info of the previous step,
    /// `None` right after reset.
    fn decide(&mut self, env: &SimEnv, last: Option<&StepInfo>) -> InterventionDecision;

    /// Called after every environment step.
    fn report(&mut self, _report: &StepReport<'_>) {}
}

/// Never intervenes.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoIntervention;

impl Intervener for NoIntervention {
    fn decide(&mut self, _env: &SimEnv, _last: Option<&StepInfo>) -> InterventionDecision {
        InterventionDecision::inactive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedIntervenerConfig {
    pub trigger_unsafe: bool,
    pub stuck_window: usize,
    /// Minimum task-distance reduction expected over the window.
    pub stuck_epsilon: f64,
    pub takeover_horizon: usize,
}

impl Default for ScriptedIntervenerConfig {
    fn default() -> Self {
        Self {
            trigger_unsafe: true,
            stuck_window: 15,
            stuck_epsilon: 0.02,
            takeover_horizon: 10,
        }
    }
}

impl ScriptedIntervenerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stuck_window == 0 || self.takeover_horizon == 0 {
            return Err(Error::Config("stuck_window and takeover_horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Takes over with the clean expert when the agent makes unsafe contact or
/// stops making progress, then hands control back after a fixed number of
/// steps.
#[derive(Debug, Clone)]
pub struct ScriptedIntervener {
    config: ScriptedIntervenerConfig,
    distances: VecDeque<f64>,
    remaining: usize,
}

impl ScriptedIntervener {
    pub fn new(config: ScriptedIntervenerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            distances: VecDeque::new(),
            remaining: 0,
        })
    }

    pub fn config(&self) -> &ScriptedIntervenerConfig {
        &self.config
    }

    fn stuck(&self) -> bool {
        if self.distances.len() <= self.config.stuck_window {
            return false;
        }
        let first = self.distances[0];
        let best = self.distances.iter().skip(1).copied().fold(f64::INFINITY, f64::min);
        first - best < self.config.stuck_epsilon
    }

    fn expert(env: &SimEnv) -> ActionVector {
        // noise-free, so the generator is never drawn from
        env.oracle_action(0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

impl Intervener for ScriptedIntervener {
    fn start_episode(&mut self) {
        self.distances.clear();
        self.remaining = 0;
    }

    fn decide(&mut self, env: &SimEnv, last: Option<&StepInfo>) -> InterventionDecision {
        self.distances.push_back(env.task_distance());
        while self.distances.len() > self.config.stuck_window + 1 {
            self.distances.pop_front();
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            return InterventionDecision::take(Self::expert(env));
        }
        let unsafe_contact = self.config.trigger_unsafe && last.is_some_and(|i| i.unsafe_contact);
        if unsafe_contact || self.stuck() {
            self.remaining = self.config.takeover_horizon - 1;
            self.distances.clear();
            return InterventionDecision::take(Self::expert(env));
        }
        InterventionDecision::inactive()
    }
}
