use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, SimEnv};
use crate::error::{Error, Result};
use crate::types::{ActionVector, Observation};

use super::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Failed episodes count at the horizon.
    pub mean_length: f64,
    pub lengths: Vec<usize>,
}

/// Runs `episodes` episodes with reset seeds `seed, seed + 1, ...`.
pub fn evaluate_policy<P>(env: &EnvConfig, episodes: usize, seed: u64, mut policy: P) -> Result<EvalResult>
where
    P: FnMut(&SimEnv, &Observation) -> Result<ActionVector>,
{
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut sim = SimEnv::new(env.clone())?;
    let mut successes = 0;
    let mut lengths = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut obs = sim.reset(seed + i as u64);
        loop {
            let a = policy(&sim, &obs)?;
            let (next, done, info) = sim.step(&a)?;
            obs = next;
            if done {
                successes += info.success as usize;
                lengths.push(info.steps);
                break;
            }
        }
    }
    Ok(EvalResult {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        mean_length: lengths.iter().sum::<usize>() as f64 / episodes as f64,
        lengths,
    })
}

/// Evaluates the one-step consistency policy of a checkpoint. Action noise
/// is drawn from a generator seeded with `seed`.
pub fn evaluate(ck: &Checkpoint, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    if env.name != ck.env {
        return Err(Error::Config(format!(
            "checkpoint was trained on {}, cannot evaluate on {}",
            ck.env, env.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evaluate_policy(env, episodes, seed, |_, obs| {
        let emb = ck.backbone.encode(obs)?;
        ck.agent.head.act(&emb, &mut rng)
    })
}
