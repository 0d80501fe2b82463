//! Online fine-tuning with an interaction loop and a learner loop.
//!
//! The interaction loop runs on the calling thread and the learner on a
//! scoped worker. They advance in lock-step: every environment step taken
//! while the replay buffer holds at least `learner_gate` transitions grants
//! the learner `utd_ratio` updates, and the next environment step waits
//! until those updates are published. All buffer appends for a step happen
//! before the grant, so a run is a pure function of its seeds.

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffers::{symmetric_sample, DemoBuffer, ReplayBuffer, SharedBuffers, Source};
use crate::consistency::ConsistencyHead;
use crate::envs::{EnvConfig, SimEnv};
use crate::error::{Error, Result};
use crate::intervention::{Intervener, StepReport};
use crate::types::{TrainConfig, Trajectory, Transition, REWARD_STEP, REWARD_SUCCESS};

use super::metrics::{MetricsLog, MetricsWindow};
use super::{make_batch, prepare_demos, Checkpoint, Encoded, EpisodeMetrics, Learner, Phase, RewardSource, Stage, StepLosses};

#[derive(Debug, Clone)]
pub struct OnlineOptions {
    pub env: EnvConfig,
    pub reward: RewardSource,
    /// Episode `i` resets with seed `seed_base + i`.
    pub seed_base: u64,
    pub metrics_path: Option<PathBuf>,
}

/// Instrumentation of buffer routing and learner gating.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingCounters {
    pub env_steps: u64,
    pub intervention_steps: u64,
    pub demo_appends: u64,
    pub replay_appends: u64,
    pub learner_steps: u64,
    /// Replay size seen by the learner at its first update.
    pub replay_len_at_first_update: Option<usize>,
    /// Smallest replay size seen by any learner update.
    pub min_replay_len_at_update: Option<usize>,
    pub demo_rows_sampled: u64,
    pub replay_rows_sampled: u64,
    /// Batches whose demo half and replay half differ in size.
    pub unbalanced_batches: u64,
    /// Replay items flagged as intervened, counted at the end of the run.
    pub intervened_in_replay: u64,
    /// Demo items added during the run that are not flagged as intervened.
    pub autonomous_in_demo: u64,
    /// Distinct step rewards emitted.
    pub rewards_seen: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub checkpoint: Checkpoint,
    pub episodes: Vec<EpisodeMetrics>,
    pub counters: RoutingCounters,
    pub losses: Vec<StepLosses>,
    pub demo_len: usize,
    pub replay_len: usize,
}

#[derive(Default)]
struct Control {
    granted: u64,
    completed: u64,
    finished: bool,
    failure: Option<String>,
}

struct Shared {
    ctl: Mutex<Control>,
    cv: Condvar,
    head: Mutex<Arc<ConsistencyHead<f32>>>,
}

struct LearnerOut {
    learner: Learner,
    losses: Vec<StepLosses>,
    counters: RoutingCounters,
}

fn learner_loop(
    mut learner: Learner,
    buffers: &SharedBuffers<Encoded>,
    shared: &Shared,
    cfg: &TrainConfig,
) -> Result<LearnerOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1ea2);
    let timeout = Duration::from_secs_f64(cfg.starvation_timeout_secs);
    let mut losses = Vec::new();
    let mut c = RoutingCounters::default();
    loop {
        {
            let mut ctl = shared.ctl.lock().expect("control lock");
            let since = Instant::now();
            while ctl.completed == ctl.granted && !ctl.finished && ctl.failure.is_none() {
                let left = timeout.saturating_sub(since.elapsed());
                if left.is_zero() {
                    return Err(Error::Starvation(format!(
                        "no new environment steps for {:.1} s after {} updates",
                        cfg.starvation_timeout_secs, ctl.completed
                    )));
                }
                ctl = shared.cv.wait_timeout(ctl, left).expect("control lock").0;
            }
            if ctl.failure.is_some() || ctl.completed == ctl.granted {
                break;
            }
        }
        let step = {
            let (demo, replay) = buffers.read();
            let rows = symmetric_sample(&demo, &replay, cfg.batch_size, &mut rng)?;
            let n_demo = rows.iter().filter(|(s, _)| *s == Source::Demo).count() as u64;
            let n_replay = rows.len() as u64 - n_demo;
            c.demo_rows_sampled += n_demo;
            c.replay_rows_sampled += n_replay;
            c.unbalanced_batches += (n_demo != n_replay) as u64;
            c.replay_len_at_first_update.get_or_insert(replay.len());
            c.min_replay_len_at_update = Some(c.min_replay_len_at_update.map_or(replay.len(), |m| m.min(replay.len())));
            let batch = make_batch(&rows);
            drop((demo, replay));
            learner.step(&batch, cfg, Phase::Online, &mut rng)?
        };
        losses.push(step);
        c.learner_steps += 1;
        *shared.head.lock().expect("snapshot lock") = Arc::new(learner.agent.head.clone());
        let mut ctl = shared.ctl.lock().expect("control lock");
        ctl.completed += 1;
        shared.cv.notify_all();
    }
    Ok(LearnerOut {
        learner,
        losses,
        counters: c,
    })
}

fn fail(shared: &Shared, e: &Error) {
    let mut ctl = shared.ctl.lock().expect("control lock");
    ctl.failure.get_or_insert_with(|| e.to_string());
    shared.cv.notify_all();
}

/// Fine-tunes `start` online. `demos` seed the demo buffer (they must carry
/// returns); intervention steps are appended to it at the end of each
/// episode, annotated with their discounted return-to-go.
pub fn train_online(
    start: &Checkpoint,
    demos: &[Trajectory],
    cfg: &TrainConfig,
    opts: &OnlineOptions,
    intervener: &mut dyn Intervener,
) -> Result<OnlineResult> {
    cfg.validate()?;
    opts.env.validate()?;
    if opts.env.name != start.env {
        return Err(Error::Config(format!(
            "checkpoint was trained on {}, online environment is {}",
            start.env, opts.env.name
        )));
    }
    let backbone = &start.backbone;
    let mut demo = DemoBuffer::new();
    for it in prepare_demos(demos, backbone, true)? {
        demo.append(it)?;
    }
    let seeded = demo.len();
    let buffers = SharedBuffers::new(demo, ReplayBuffer::new(cfg.replay_capacity));
    let shared = Shared {
        ctl: Mutex::new(Control::default()),
        cv: Condvar::new(),
        head: Mutex::new(Arc::new(start.agent.head.clone())),
    };
    let learner = Learner::new(start.agent.clone(), cfg);
    let mut log = opts.metrics_path.as_deref().map(MetricsLog::create).transpose()?;

    let (interaction, learned) = std::thread::scope(|scope| {
        let worker = scope.spawn(|| {
            let out = learner_loop(learner, &buffers, &shared, cfg);
            if let Err(e) = &out {
                fail(&shared, e);
            }
            out
        });
        let result = interaction_loop(start, cfg, opts, intervener, &buffers, &shared, log.as_mut());
        {
            let mut ctl = shared.ctl.lock().expect("control lock");
            ctl.finished = true;
            if let Err(e) = &result {
                ctl.failure.get_or_insert_with(|| e.to_string());
            }
            shared.cv.notify_all();
        }
        let learned = worker.join().unwrap_or_else(|_| Err(Error::InvalidArgument("learner thread panicked".into())));
        (result, learned)
    });
    let (episodes, mut counters) = interaction?;
    let learned = learned?;
    counters.learner_steps = learned.counters.learner_steps;
    counters.replay_len_at_first_update = learned.counters.replay_len_at_first_update;
    counters.min_replay_len_at_update = learned.counters.min_replay_len_at_update;
    counters.demo_rows_sampled = learned.counters.demo_rows_sampled;
    counters.replay_rows_sampled = learned.counters.replay_rows_sampled;
    counters.unbalanced_batches = learned.counters.unbalanced_batches;
    let (demo, replay) = buffers.into_inner();
    counters.intervened_in_replay = replay.iter().filter(|x| x.t.intervened).count() as u64;
    counters.autonomous_in_demo = demo.iter().skip(seeded).filter(|x| !x.t.intervened).count() as u64;
    Ok(OnlineResult {
        checkpoint: Checkpoint {
            env: start.env,
            stage: Stage::Online,
            config: cfg.clone(),
            backbone: backbone.clone(),
            agent: learned.learner.agent,
        },
        episodes,
        counters,
        losses: learned.losses,
        demo_len: demo.len(),
        replay_len: replay.len(),
    })
}

fn interaction_loop(
    start: &Checkpoint,
    cfg: &TrainConfig,
    opts: &OnlineOptions,
    intervener: &mut dyn Intervener,
    buffers: &SharedBuffers<Encoded>,
    shared: &Shared,
    mut log: Option<&mut MetricsLog>,
) -> Result<(Vec<EpisodeMetrics>, RoutingCounters)> {
    let backbone = &start.backbone;
    let mut env = SimEnv::new(opts.env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xac7_0a11);
    let timeout = Duration::from_secs_f64(cfg.starvation_timeout_secs);
    let mut window = MetricsWindow::default();
    let mut episodes = Vec::with_capacity(cfg.online_episodes);
    let mut c = RoutingCounters::default();

    for ep in 0..cfg.online_episodes {
        let began = Instant::now();
        let seed = opts.seed_base + ep as u64;
        let mut obs = Arc::new(env.reset(seed));
        let mut emb: Arc<[f32]> = Arc::from(backbone.encode(&obs)?);
        intervener.start_episode();
        let mut last_info = None;
        let mut rewards = Vec::new();
        let mut pending: Vec<(usize, Encoded)> = Vec::new();
        let mut iv_steps = 0;
        loop {
            // wait for the learner to publish every update it is owed
            {
                let mut ctl = shared.ctl.lock().expect("control lock");
                let since = Instant::now();
                while ctl.completed < ctl.granted && ctl.failure.is_none() {
                    let left = timeout.saturating_sub(since.elapsed());
                    if left.is_zero() {
                        return Err(Error::Starvation(format!(
                            "learner made no progress for {:.1} s",
                            cfg.starvation_timeout_secs
                        )));
                    }
                    ctl = shared.cv.wait_timeout(ctl, left).expect("control lock").0;
                }
                if let Some(f) = &ctl.failure {
                    return Err(Error::InvalidArgument(format!("learner failed: {f}")));
                }
            }
            let head = shared.head.lock().expect("snapshot lock").clone();
            let policy_action = head.act(&emb, &mut rng)?;
            let decision = intervener.decide(&env, last_info.as_ref());
            let action = match (decision.active, decision.action) {
                (true, Some(a)) => a,
                _ => policy_action.clone(),
            };
            let intervened = decision.active;
            let (next, done, info) = env.step(&action)?;
            let next = Arc::new(next);
            let next_emb: Arc<[f32]> = Arc::from(backbone.encode(&next)?);
            let (r, judged) = match &opts.reward {
                RewardSource::Classifier(cls) => cls.step_reward_embedded(&next_emb)?,
                RewardSource::Oracle if info.success => (REWARD_SUCCESS, true),
                RewardSource::Oracle => (REWARD_STEP, false),
            };
            // Only a rewarded success is terminal for learning. Lingering on a
            // false positive would otherwise pay more than finishing, and an
            // episode the simulator ends without a rewarded success (time
            // limit, or a success the classifier missed) is a truncation the
            // agent cannot observe, so its value is bootstrapped.
            let terminal = judged;
            if !c.rewards_seen.contains(&r) {
                c.rewards_seen.push(r);
            }
            rewards.push((r, terminal));
            let item = Encoded {
                t: Transition {
                    s: obs,
                    a: action,
                    r,
                    s_next: next.clone(),
                    done: terminal,
                    intervened,
                    mc_return: None,
                },
                emb,
                next_emb: next_emb.clone(),
            };
            c.env_steps += 1;
            if intervened {
                iv_steps += 1;
                c.intervention_steps += 1;
                pending.push((rewards.len() - 1, item));
            } else {
                buffers.append_replay(item)?;
                c.replay_appends += 1;
            }
            let rates = window.rates();
            intervener.report(&StepReport {
                episode: ep,
                step: info.steps,
                image: &next.images[0],
                proprio: &next.proprio,
                policy_action: &policy_action,
                intervening: intervened,
                success_rate_20: rates.success_rate,
                intervention_rate_20: rates.intervention_rate,
            });
            obs = next;
            emb = next_emb;
            last_info = Some(info);

            if done {
                let mut g = vec![0.0; rewards.len() + 1];
                for t in (0..rewards.len()).rev() {
                    let (r, terminal) = rewards[t];
                    g[t] = r + if terminal { 0.0 } else { cfg.gamma * g[t + 1] };
                }
                for (t, mut item) in pending.drain(..) {
                    item.t.mc_return = Some(g[t]);
                    buffers.append_demo(item)?;
                    c.demo_appends += 1;
                }
            }
            if buffers.replay_len() >= cfg.learner_gate {
                let mut ctl = shared.ctl.lock().expect("control lock");
                ctl.granted += cfg.utd_ratio as u64;
                shared.cv.notify_all();
            }
            if done {
                break;
            }
        }
        let m = EpisodeMetrics {
            episode: ep,
            seed,
            success: last_info.as_ref().is_some_and(|i| i.success),
            length: rewards.len(),
            intervention_steps: iv_steps,
            episode_return: rewards.iter().map(|(r, _)| r).sum(),
            wall_seconds: began.elapsed().as_secs_f64(),
        };
        window.push(m.clone());
        let rates = window.rates();
        if let Some(log) = log.as_deref_mut() {
            if let Err(e) = log.write(&m, rates) {
                warn!("could not write metrics: {e}");
            }
        }
        if (ep + 1) % 10 == 0 {
            info!(
                "episode {}: success {:.2} autonomous {:.2} intervention {:.3} length {:.1}",
                ep + 1,
                rates.success_rate,
                rates.autonomous_success_rate,
                rates.intervention_rate,
                rates.mean_length
            );
        }
        episodes.push(m);
    }
    Ok((episodes, c))
}
