//! Training stages, evaluation, checkpoints and metrics.
//!
//! The encoder is frozen, so every stored transition carries its two
//! embeddings computed once at insertion time; only the action head and the
//! critic ensemble train.

pub mod checkpoint;
mod eval;
pub mod metrics;
mod offline;
mod online;
mod sft;

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;

pub use checkpoint::{load_classifier, save_classifier, Checkpoint, Stage};
pub use eval::{evaluate, evaluate_policy, EvalResult};
pub use metrics::{EpisodeMetrics, MetricsWindow, WINDOW};
pub use offline::{train_offline, OfflineLog};
pub use online::{train_online, OnlineOptions, OnlineResult, RoutingCounters};
pub use sft::{train_sft, SftLog};

use crate::batch::Batch;
use crate::buffers::{Routed, Source};
use crate::consistency::{actor_loss_with, ActorLoss, ActorNoise, ConsistencyHead, DiffusionSchedule};
use crate::critic::{CriticEnsemble, CriticLoss, CriticNoise};
use crate::encoder::EncoderBackbone;
use crate::error::{Error, Result};
use crate::nn::{Adam, Real};
use crate::reward::SuccessClassifier;
use crate::types::{TrainConfig, Trajectory, Transition};

/// A transition plus the frozen embeddings of both its observations.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub t: Transition,
    pub emb: Arc<[f32]>,
    pub next_emb: Arc<[f32]>,
}

impl Routed for Encoded {
    fn transition(&self) -> &Transition {
        &self.t
    }
}

/// Embeds every observation of a trajectory once.
pub fn encode_trajectory(backbone: &EncoderBackbone, traj: &Trajectory) -> Result<Vec<Encoded>> {
    if traj.is_empty() {
        return Ok(Vec::new());
    }
    let mut obs: Vec<&crate::types::Observation> = traj.transitions.iter().map(|t| t.s.as_ref()).collect();
    obs.push(traj.transitions.last().expect("non-empty").s_next.as_ref());
    let emb = backbone.encode_batch(&obs)?;
    let rows: Vec<Arc<[f32]>> = emb.rows().into_iter().map(|r| Arc::from(r.to_vec())).collect();
    Ok(traj
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| {
            // boundary observations are shared between neighbours
            let next = if i + 1 < traj.len() && !Arc::ptr_eq(&t.s_next, &traj.transitions[i + 1].s) {
                Arc::from(backbone.encode(&t.s_next).expect("validated above"))
            } else {
                rows[i + 1].clone()
            };
            Encoded {
                t: t.clone(),
                emb: rows[i].clone(),
                next_emb: next,
            }
        })
        .collect())
}

/// Stacks sampled items into a training batch.
pub fn make_batch(items: &[(Source, &Encoded)]) -> Batch<f32> {
    let n = items.len();
    let first = &items[0].1;
    let (e, p, a) = (first.emb.len(), first.t.s.proprio.len(), first.t.a.dim());
    let f = |v: f64| v as f32;
    Batch {
        emb: Array2::from_shape_fn((n, e), |(i, j)| items[i].1.emb[j]),
        prop: Array2::from_shape_fn((n, p), |(i, j)| f(items[i].1.t.s.proprio[j])),
        action: Array2::from_shape_fn((n, a), |(i, j)| f(items[i].1.t.a.0[j])),
        reward: Array1::from_shape_fn(n, |i| f(items[i].1.t.r)),
        next_emb: Array2::from_shape_fn((n, e), |(i, j)| items[i].1.next_emb[j]),
        next_prop: Array2::from_shape_fn((n, p), |(i, j)| f(items[i].1.t.s_next.proprio[j])),
        done: Array1::from_shape_fn(n, |i| if items[i].1.t.done { 1.0 } else { 0.0 }),
        mc_return: if items.iter().all(|(_, x)| x.t.mc_return.is_some()) {
            Some(Array1::from_shape_fn(n, |i| f(items[i].1.t.mc_return.unwrap_or(0.0))))
        } else {
            None
        },
        sources: items.iter().map(|(s, _)| *s).collect(),
    }
}

/// Where step rewards come from during online training.
#[derive(Debug, Clone)]
pub enum RewardSource {
    Classifier(SuccessClassifier),
    /// Ground-truth success predicate of the environment.
    Oracle,
}

/// Trainable state shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub head: ConsistencyHead<f32>,
    pub critic: CriticEnsemble<f32>,
    pub schedule: DiffusionSchedule,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        embed_dim: usize,
        proprio_dim: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let schedule = DiffusionSchedule::standard();
        let head = ConsistencyHead::new(action_dim, embed_dim, cfg.hidden, &schedule, rng);
        let critic = CriticEnsemble::new(cfg.n_critics, embed_dim, proprio_dim, action_dim, &[cfg.hidden], rng)
            .with_layer_norm(cfg.critic_layer_norm);
        Self { head, critic, schedule }
    }
}

/// Offline and online actor objectives differ only in their weights.
pub fn offline_actor_objective<F: Real>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    critic: &CriticEnsemble<F>,
    batch: &Batch<F>,
    cfg: &TrainConfig,
    noise: &ActorNoise<F>,
) -> Result<ActorLoss<F>> {
    actor_loss_with(
        head,
        schedule,
        critic,
        batch.emb.view(),
        batch.prop.view(),
        batch.action.view(),
        cfg.eta_offline,
        cfg.beta_offline,
        noise,
    )
}

pub fn online_actor_objective<F: Real>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    critic: &CriticEnsemble<F>,
    batch: &Batch<F>,
    cfg: &TrainConfig,
    noise: &ActorNoise<F>,
) -> Result<ActorLoss<F>> {
    actor_loss_with(
        head,
        schedule,
        critic,
        batch.emb.view(),
        batch.prop.view(),
        batch.action.view(),
        cfg.eta_online,
        cfg.beta_online,
        noise,
    )
}

/// Losses of one learner step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub critic: f64,
    pub actor: f64,
    pub bc: f64,
    pub q: f64,
}

/// Agent plus optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub agent: Agent,
    head_opt: Adam<f32>,
    critic_opt: Adam<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl Learner {
    pub fn new(agent: Agent, cfg: &TrainConfig) -> Self {
        Self {
            agent,
            head_opt: Adam::new(cfg.lr).with_clip(cfg.grad_clip),
            critic_opt: Adam::new(cfg.lr).with_clip(cfg.grad_clip),
        }
    }

    /// Critic update, actor update, then target averaging.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch<f32>,
        cfg: &TrainConfig,
        phase: Phase,
        rng: &mut R,
    ) -> Result<StepLosses> {
        let n = batch.len();
        let a_dim = self.agent.head.action_dim;
        let Agent { head, critic, schedule } = &mut self.agent;
        let critic_noise = CriticNoise::draw(n, a_dim, cfg.n_policy_actions, rng);
        let CriticLoss { total, grads, .. } = match phase {
            Phase::Offline => critic.calql_loss(batch, head, cfg.alpha, cfg.gamma, &critic_noise)?,
            Phase::Online => critic.online_loss(batch, head, cfg.gamma, critic_noise.next_z.view())?,
        };
        if !total.is_finite() {
            return Err(Error::InvalidArgument(format!("critic loss diverged to {total}")));
        }
        self.critic_opt.step(&mut critic.members, &grads);

        let actor_noise = ActorNoise::draw(n, a_dim, schedule, rng);
        let actor = match phase {
            Phase::Offline => offline_actor_objective(head, schedule, critic, batch, cfg, &actor_noise)?,
            Phase::Online => online_actor_objective(head, schedule, critic, batch, cfg, &actor_noise)?,
        };
        self.head_opt.step(&mut head.net, &actor.grads);
        critic.polyak_update(cfg.polyak_tau);
        Ok(StepLosses {
            critic: total as f64,
            actor: actor.total as f64,
            bc: actor.bc as f64,
            q: actor.q_mean as f64,
        })
    }

    /// Behavior cloning only: the consistency term with unit weight.
    pub fn bc_step<R: Rng + ?Sized>(&mut self, batch: &Batch<f32>, rng: &mut R) -> Result<f64> {
        let head = &mut self.agent.head;
        let noise = crate::consistency::BcNoise::draw(batch.len(), head.action_dim, &self.agent.schedule, rng);
        let mut grads = head.net.zeros_like();
        let bc = crate::consistency::bc_consistency_term_with(
            head,
            &self.agent.schedule,
            batch.emb.view(),
            batch.action.view(),
            &noise,
            Some((&mut grads, 1.0)),
        )?;
        self.head_opt.step(&mut head.net, &grads);
        Ok(bc as f64)
    }
}

/// Annotates (if needed) and embeds demonstrations for the demo buffer.
pub(crate) fn prepare_demos(
    demos: &[Trajectory],
    backbone: &EncoderBackbone,
    require_returns: bool,
) -> Result<Vec<Encoded>> {
    if demos.iter().all(|t| t.is_empty()) {
        return Err(Error::Empty("demonstration set"));
    }
    let mut out = Vec::new();
    for (k, t) in demos.iter().enumerate() {
        if require_returns {
            if let Some(i) = t.transitions.iter().position(|x| x.mc_return.is_none()) {
                return Err(Error::InvalidArgument(format!(
                    "demonstration {k} step {i} has no return annotation"
                )));
            }
        }
        out.extend(encode_trajectory(backbone, t)?);
    }
    Ok(out)
}
