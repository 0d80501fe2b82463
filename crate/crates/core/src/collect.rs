//! Scripted data collection: demonstrations, encoder pretraining samples and
//! labeled success/failure examples.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{EnvConfig, EnvKind, SimEnv, MAX_ACTION_DIM};
use crate::error::{Error, Result};
use crate::types::{Observation, Trajectory, Transition, REWARD_STEP, REWARD_SUCCESS};

/// Runs the scripted expert for one episode. Rewards come from the
/// ground-truth success predicate.
pub fn oracle_episode(env: &mut SimEnv, seed: u64, noise: f64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut obs = Arc::new(env.reset(seed));
    let mut transitions = Vec::new();
    loop {
        let a = env.oracle_action(noise, &mut rng);
        let (next, done, info) = env.step(&a)?;
        let next = Arc::new(next);
        transitions.push(Transition {
            s: obs,
            a,
            r: if info.success { REWARD_SUCCESS } else { REWARD_STEP },
            s_next: next.clone(),
            done,
            intervened: false,
            mc_return: None,
        });
        obs = next;
        if done {
            return Ok(Trajectory {
                transitions,
                success: info.success,
                seed,
            });
        }
    }
}

/// `n` expert episodes on consecutive seeds from `base_seed`. With
/// `successful_only`, failed episodes are skipped until `n` successes are
/// gathered.
pub fn collect_demos(
    cfg: &EnvConfig,
    n: usize,
    noise: f64,
    base_seed: u64,
    successful_only: bool,
) -> Result<Vec<Trajectory>> {
    let mut env = SimEnv::new(cfg.clone())?;
    let mut out = Vec::with_capacity(n);
    let mut seed = base_seed;
    let limit = base_seed + 100 * n as u64 + 100;
    while out.len() < n {
        if seed >= limit {
            return Err(Error::InvalidArgument(format!(
                "expert with noise {noise} failed too often on {} to gather {n} successes",
                cfg.name
            )));
        }
        let t = oracle_episode(&mut env, seed, noise)?;
        seed += 1;
        if t.success || !successful_only {
            out.push(t);
        }
    }
    Ok(out)
}

/// Observations visited by the noisy expert across several tasks, each
/// labeled with the chunk of the next `chunk` clean expert actions along the
/// visited path. Actions are zero-padded to the widest action space and the
/// chunk is zero-padded past the end of the episode, so the label also tells
/// how soon the expert slows down and stops.
pub fn pretraining_pairs(
    kinds: &[EnvKind],
    episodes_per_env: usize,
    noise: f64,
    base_seed: u64,
    chunk: usize,
) -> Result<Vec<(Observation, Vec<f64>)>> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("action chunk must hold at least one action".into()));
    }
    let mut out = Vec::new();
    for &kind in kinds {
        let mut env = SimEnv::new(EnvConfig::new(kind))?;
        for seed in base_seed..base_seed + episodes_per_env as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut obs = env.reset(seed);
            let mut visited = Vec::new();
            let mut clean = Vec::new();
            loop {
                let mut label = env.oracle_action(0.0, &mut rng).0;
                label.resize(MAX_ACTION_DIM, 0.0);
                clean.push(label);
                let a = env.oracle_action(noise, &mut rng);
                let (next, done, _) = env.step(&a)?;
                visited.push(std::mem::replace(&mut obs, next));
                if done {
                    break;
                }
            }
            for (t, o) in visited.into_iter().enumerate() {
                let mut label = Vec::with_capacity(chunk * MAX_ACTION_DIM);
                for k in t..t + chunk {
                    match clean.get(k) {
                        Some(a) => label.extend_from_slice(a),
                        None => label.resize(label.len() + MAX_ACTION_DIM, 0.0),
                    }
                }
                out.push((o, label));
            }
        }
    }
    Ok(out)
}

/// Labeled examples for the success classifier.
#[derive(Debug, Clone, Default)]
pub struct LabeledExamples {
    pub positives: Vec<Observation>,
    pub negatives: Vec<Observation>,
}

/// Expert whose motion is scaled by `speed` before noise and clipping, so
/// the visited states cover a range of velocities.
fn paced_episode(env: &mut SimEnv, seed: u64, noise: f64, speed: f64) -> Result<Vec<(Observation, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab_1e5e_ed00_0000);
    let mut obs = env.reset(seed);
    let mut out = Vec::new();
    loop {
        let mut a = env.oracle_action(0.0, &mut rng);
        for v in a.0.iter_mut().take(2) {
            *v = (speed * *v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)).clamp(-1.0, 1.0);
        }
        let (next, done, info) = env.step(&a)?;
        out.push((std::mem::replace(&mut obs, next), info.success));
        if done {
            out.push((obs, info.success));
            return Ok(out);
        }
    }
}

/// Curated example sets, gathered from `episodes` successful expert
/// episodes whose pace varies between one and two times the demonstration
/// speed. Each contributes its terminal observation as a positive, and the
/// observation just before success plus two earlier ones as negatives.
pub fn success_examples(cfg: &EnvConfig, episodes: usize, noise: f64, base_seed: u64) -> Result<LabeledExamples> {
    let mut env = SimEnv::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let mut ex = LabeledExamples::default();
    let mut seed = base_seed;
    let limit = base_seed + 100 * episodes as u64 + 100;
    while ex.positives.len() < episodes {
        if seed >= limit {
            return Err(Error::InvalidArgument(format!(
                "expert failed too often on {} to gather {episodes} successes",
                cfg.name
            )));
        }
        let speed = rng.random_range(1.0..2.0);
        let mut states = paced_episode(&mut env, seed, noise, speed)?;
        seed += 1;
        if !states.last().is_some_and(|(_, s)| *s) || states.len() < 2 {
            continue;
        }
        let (terminal, _) = states.pop().expect("checked");
        ex.positives.push(terminal);
        let n = states.len();
        ex.negatives.push(states[n - 1].0.clone());
        for _ in 0..2 {
            if n > 1 {
                let i = rng.random_range(0..n - 1);
                ex.negatives.push(states[i].0.clone());
            }
        }
    }
    Ok(ex)
}
