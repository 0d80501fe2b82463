use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffers::{DemoBuffer, Source};
use crate::encoder::EncoderBackbone;
use crate::envs::EnvKind;
use crate::error::{check_dim, Result};
use crate::types::{TrainConfig, Trajectory};

use super::{make_batch, prepare_demos, Agent, Checkpoint, Learner, Stage};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftLog {
    pub bc: Vec<f64>,
}

/// Supervised baseline: the consistency term alone, no critic, for
/// `offline_steps` steps.
pub fn train_sft(
    env: EnvKind,
    demos: &[Trajectory],
    backbone: &EncoderBackbone,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, SftLog)> {
    cfg.validate()?;
    let items = prepare_demos(demos, backbone, false)?;
    check_dim("demonstration action", env.action_dim(), items[0].t.a.dim())?;
    let mut demo = DemoBuffer::new();
    for mut it in items {
        // returns are irrelevant here
        it.t.mc_return.get_or_insert(0.0);
        demo.append(it)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let agent = Agent::new(env.action_dim(), backbone.embed_dim(), backbone.proprio_dim(), cfg, &mut rng);
    let mut learner = Learner::new(agent, cfg);
    let mut log = SftLog::default();
    for step in 0..cfg.offline_steps {
        let rows: Vec<_> = demo.sample(cfg.batch_size, &mut rng)?.into_iter().map(|t| (Source::Demo, t)).collect();
        let bc = learner.bc_step(&make_batch(&rows), &mut rng)?;
        if (step + 1) % 1000 == 0 {
            info!("sft step {}: bc {bc:.4}", step + 1);
        }
        log.bc.push(bc);
    }
    Ok((
        Checkpoint {
            env,
            stage: Stage::Sft,
            config: cfg.clone(),
            backbone: backbone.clone(),
            agent: learner.agent,
        },
        log,
    ))
}
