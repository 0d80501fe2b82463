use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffers::{DemoBuffer, Source};
use crate::encoder::EncoderBackbone;
use crate::envs::EnvKind;
use crate::error::{check_dim, Result};
use crate::types::{TrainConfig, Trajectory};

use super::{make_batch, prepare_demos, Agent, Checkpoint, Learner, Phase, Stage, StepLosses};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OfflineLog {
    pub steps: Vec<StepLosses>,
}

/// Calibrated conservative critic plus consistency actor, trained on
/// return-annotated demonstrations only.
pub fn train_offline(
    env: EnvKind,
    demos: &[Trajectory],
    backbone: &EncoderBackbone,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, OfflineLog)> {
    cfg.validate()?;
    let items = prepare_demos(demos, backbone, true)?;
    check_dim("demonstration action", env.action_dim(), items[0].t.a.dim())?;
    let mut demo = DemoBuffer::new();
    for it in items {
        demo.append(it)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let agent = Agent::new(env.action_dim(), backbone.embed_dim(), backbone.proprio_dim(), cfg, &mut rng);
    let mut learner = Learner::new(agent, cfg);
    let mut log = OfflineLog::default();
    for step in 0..cfg.offline_steps {
        let rows: Vec<_> = demo.sample(cfg.batch_size, &mut rng)?.into_iter().map(|t| (Source::Demo, t)).collect();
        let batch = make_batch(&rows);
        let l = learner.step(&batch, cfg, Phase::Offline, &mut rng)?;
        if (step + 1) % 1000 == 0 {
            info!(
                "offline step {}: critic {:.4} actor {:.4} bc {:.4} q {:.3}",
                step + 1,
                l.critic,
                l.actor,
                l.bc,
                l.q
            );
        }
        log.steps.push(l);
    }
    Ok((
        Checkpoint {
            env,
            stage: Stage::Offline,
            config: cfg.clone(),
            backbone: backbone.clone(),
            agent: learner.agent,
        },
        log,
    ))
}
