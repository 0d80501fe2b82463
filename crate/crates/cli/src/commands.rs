use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use conrft_core::buffers::annotate_returns;
use conrft_core::collect::{collect_demos, pretraining_pairs, success_examples};
use conrft_core::encoder::{pretrain_backbone, EncoderBackbone, EncoderConfig, PretrainSample};
use conrft_core::envs::{EnvConfig, EnvKind, SimEnv};
use conrft_core::intervention::{Intervener, NoIntervention, ScriptedIntervener, StepReport};
use conrft_core::recipe;
use conrft_core::record::{read_trajectories_file, write_trajectories_file};
use conrft_core::reward::train_classifier;
use conrft_core::trainer::checkpoint::{load_backbone, save_backbone};
use conrft_core::trainer::{
    evaluate, load_classifier, save_classifier, train_offline, train_online, train_sft, Checkpoint,
    EpisodeMetrics, MetricsWindow, OnlineOptions, RewardSource, StepLosses,
};
use conrft_core::types::{ActionVector, Trajectory};
use conrft_gateway::Gateway;

use crate::config::{ConfigError, RunConfig};
use crate::{
    ClassifierArgs, CollectArgs, EvalArgs, IntervenerKind, OnlineArgs, PretrainArgs, ServeArgs, TrainArgs,
};

/// Run directory: `out` when given, else a fresh timestamped directory
/// under `$CONRFT_RUN_DIR` (default `runs`).
fn run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => {
            let root = std::env::var_os("CONRFT_RUN_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            let mut dir = root.join(format!("{command}-{stamp}"));
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{command}-{stamp}-{n}"));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    argv: Vec<String>,
    config: &'a RunConfig,
}

fn write_snapshot(path: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let snap = Snapshot {
        command,
        argv: std::env::args().collect(),
        config: cfg,
    };
    std::fs::write(path, serde_json::to_string_pretty(&snap)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Prints one JSON summary line on stdout.
fn report(v: serde_json::Value) {
    println!("{v}");
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn loss_rows(steps: &[StepLosses]) -> impl Iterator<Item = serde_json::Value> + '_ {
    steps.iter().enumerate().map(|(i, s)| {
        json!({"step": i, "critic": s.critic, "actor": s.actor, "bc": s.bc, "q": s.q})
    })
}

fn env_arg(kind: Option<EnvKind>, fallback: EnvKind, what: &str) -> Result<EnvKind> {
    match kind {
        Some(k) if k != fallback => Err(ConfigError(format!("--env {k} does not match the {fallback} {what}")).into()),
        _ => Ok(fallback),
    }
}

/// Demonstrations of a single environment.
fn read_demos(path: &Path) -> Result<(EnvKind, Vec<Trajectory>)> {
    let records = read_trajectories_file(path).with_context(|| format!("cannot read demonstrations {}", path.display()))?;
    let Some(first) = records.first() else {
        bail!("{} holds no trajectories", path.display());
    };
    let kind: EnvKind = first.header.env.parse()?;
    if let Some(r) = records.iter().find(|r| r.header.env != first.header.env) {
        bail!("{} mixes environments {} and {}", path.display(), first.header.env, r.header.env);
    }
    Ok((kind, records.into_iter().map(|r| r.trajectory).collect()))
}

fn pretrain(cfg: &RunConfig) -> Result<(EncoderBackbone, Vec<f64>)> {
    let d = &cfg.pretrain_data;
    info!("pretraining the encoder on {} expert episodes per task", d.episodes_per_env);
    let pairs = pretraining_pairs(&EnvKind::ALL, d.episodes_per_env, d.noise, d.seed, d.chunk)?;
    let samples: Vec<PretrainSample<'_>> = pairs
        .iter()
        .map(|(obs, action)| PretrainSample {
            obs,
            action: action.clone(),
        })
        .collect();
    let (backbone, rep) = pretrain_backbone(&samples, EncoderConfig::default(), &cfg.pretrain)?;
    Ok((backbone, rep.epoch_losses))
}

/// The given encoder, or a freshly pretrained one saved into the run.
fn encoder_for(arg: Option<&Path>, cfg: &RunConfig, dir: &Path) -> Result<EncoderBackbone> {
    match arg {
        Some(p) => load_backbone(p).with_context(|| format!("cannot load encoder {}", p.display())),
        None => {
            let (b, _) = pretrain(cfg)?;
            save_backbone(&b, &dir.join("encoder"))?;
            Ok(b)
        }
    }
}

pub fn collect(a: &CollectArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let n = a.n.unwrap_or(a.env.default_demos());
    let noise = a.noise.unwrap_or(a.env.default_demo_noise());
    if n == 0 {
        return Err(ConfigError("--n must be positive".into()).into());
    }
    let (path, snapshot) = match &a.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let mut side = p.clone().into_os_string();
            side.push(".config.json");
            (p.clone(), PathBuf::from(side))
        }
        None => {
            let dir = run_dir(None, "collect")?;
            (dir.join("demos.jsonl"), dir.join("config.json"))
        }
    };
    let mut demos = collect_demos(&EnvConfig::new(a.env), n, noise, a.seed, !a.keep_failures)?;
    for d in &mut demos {
        annotate_returns(d, cfg.train.gamma)?;
    }
    write_trajectories_file(&path, a.env.name(), &demos, None)?;
    write_snapshot(&snapshot, "collect", &cfg)?;
    let successes = demos.iter().filter(|d| d.success).count();
    report(json!({"written": demos.len(), "successes": successes, "path": path}));
    Ok(())
}

pub fn pretrain_encoder(a: &PretrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let dir = run_dir(a.out.as_deref(), "pretrain-encoder")?;
    write_snapshot(&dir.join("config.json"), "pretrain-encoder", &cfg)?;
    let (backbone, losses) = pretrain(&cfg)?;
    save_backbone(&backbone, &dir)?;
    write_jsonl(
        &dir.join("losses.jsonl"),
        losses.iter().enumerate().map(|(i, l)| json!({"epoch": i, "loss": l})),
    )?;
    report(json!({"dir": dir, "fingerprint": backbone.fingerprint(), "final_loss": losses.last()}));
    Ok(())
}

pub fn classifier_train(a: &ClassifierArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let dir = run_dir(a.out.as_deref(), "classifier-train")?;
    write_snapshot(&dir.join("config.json"), "classifier-train", &cfg)?;
    let backbone = load_backbone(&a.encoder).with_context(|| format!("cannot load encoder {}", a.encoder.display()))?;
    let e = &cfg.examples;
    let ex = success_examples(&EnvConfig::new(a.env), e.episodes, e.noise, e.seed)?;
    let (cls, rep) = train_classifier(&ex.positives, &ex.negatives, &backbone, &cfg.classifier)?;
    save_classifier(&cls, &backbone, &dir)?;
    let summary = json!({
        "dir": dir,
        "env": a.env,
        "positives": ex.positives.len(),
        "negatives": ex.negatives.len(),
        "train_accuracy": rep.train_accuracy,
        "heldout_accuracy": rep.heldout_accuracy,
        "heldout_size": rep.heldout_size,
    });
    std::fs::write(dir.join("report.json"), summary.to_string() + "\n")?;
    report(summary);
    Ok(())
}

pub fn train_offline_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let (demo_env, demos) = read_demos(&a.demos)?;
    let kind = env_arg(a.env, demo_env, "demonstrations")?;
    let dir = run_dir(a.out.as_deref(), "train-offline")?;
    write_snapshot(&dir.join("config.json"), "train-offline", &cfg)?;
    let backbone = encoder_for(a.encoder.as_deref(), &cfg, &dir)?;
    info!("offline training on {} demonstrations for {} steps", demos.len(), cfg.train.offline_steps);
    let (ck, log) = train_offline(kind, &demos, &backbone, &cfg.train)?;
    ck.save(&dir)?;
    write_jsonl(&dir.join("losses.jsonl"), loss_rows(&log.steps))?;
    report(json!({"dir": dir, "env": kind, "stage": ck.stage, "steps": log.steps.len()}));
    Ok(())
}

pub fn train_sft_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let (demo_env, demos) = read_demos(&a.demos)?;
    let kind = env_arg(a.env, demo_env, "demonstrations")?;
    let dir = run_dir(a.out.as_deref(), "train-sft")?;
    write_snapshot(&dir.join("config.json"), "train-sft", &cfg)?;
    let backbone = encoder_for(a.encoder.as_deref(), &cfg, &dir)?;
    let (ck, log) = train_sft(kind, &demos, &backbone, &cfg.train)?;
    ck.save(&dir)?;
    write_jsonl(
        &dir.join("losses.jsonl"),
        log.bc.iter().enumerate().map(|(i, l)| json!({"step": i, "bc": l})),
    )?;
    report(json!({"dir": dir, "env": kind, "stage": ck.stage, "steps": log.bc.len()}));
    Ok(())
}

pub fn train_online_cmd(a: &OnlineArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(Some(p))?,
        None => RunConfig {
            train: ck.config.clone(),
            ..RunConfig::default()
        },
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.episodes {
        cfg.train.online_episodes = n;
    }
    cfg.validate()?;
    let (demo_env, demos) = read_demos(&a.demos)?;
    env_arg(Some(demo_env), ck.env, "checkpoint")?;
    let dir = run_dir(a.out.as_deref(), "train-online")?;
    write_snapshot(&dir.join("config.json"), "train-online", &cfg)?;
    let reward = match &a.classifier {
        Some(p) => RewardSource::Classifier(
            load_classifier(p, &ck.backbone).with_context(|| format!("cannot load classifier {}", p.display()))?,
        ),
        None => RewardSource::Oracle,
    };
    let opts = OnlineOptions {
        env: EnvConfig::new(ck.env),
        reward,
        seed_base: recipe::online_seed_base(cfg.train.seed),
        metrics_path: Some(dir.join("metrics.jsonl")),
    };
    let gateway;
    let mut intervener: Box<dyn Intervener> = match a.intervener {
        IntervenerKind::Scripted => Box::new(ScriptedIntervener::new(cfg.intervener.clone())?),
        IntervenerKind::None => Box::new(NoIntervention),
        IntervenerKind::Remote => {
            gateway = Gateway::serve((a.bind.as_str(), a.port))?;
            info!("operator console can connect to ws://{}", gateway.local_addr());
            Box::new(gateway.intervener())
        }
    };
    let res = train_online(&ck, &demos, &cfg.train, &opts, intervener.as_mut())?;
    res.checkpoint.save(&dir)?;
    write_jsonl(&dir.join("losses.jsonl"), loss_rows(&res.losses))?;
    let c = &res.counters;
    let counters = json!({
        "env_steps": c.env_steps,
        "intervention_steps": c.intervention_steps,
        "demo_appends": c.demo_appends,
        "replay_appends": c.replay_appends,
        "learner_steps": c.learner_steps,
        "min_replay_len_at_update": c.min_replay_len_at_update,
        "unbalanced_batches": c.unbalanced_batches,
        "intervened_in_replay": c.intervened_in_replay,
        "autonomous_in_demo": c.autonomous_in_demo,
        "rewards_seen": c.rewards_seen,
    });
    std::fs::write(dir.join("counters.json"), serde_json::to_string_pretty(&counters)? + "\n")?;
    let mut window = MetricsWindow::default();
    for m in &res.episodes {
        window.push(m.clone());
    }
    report(json!({"dir": dir, "episodes": res.episodes.len(), "final_window": window.rates()}));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("cannot load checkpoint {}", a.ckpt.display()))?;
    let kind = env_arg(a.env, ck.env, "checkpoint")?;
    if a.episodes == 0 {
        return Err(ConfigError("--episodes must be positive".into()).into());
    }
    let r = evaluate(&ck, &EnvConfig::new(kind), a.episodes, a.seed)?;
    report(json!({
        "env": kind,
        "stage": ck.stage,
        "episodes": r.episodes,
        "successes": r.successes,
        "success_rate": r.success_rate,
        "mean_length": r.mean_length,
    }));
    Ok(())
}

/// Runs a policy (or stands still) at a fixed rate and streams it to the
/// console, which may take over at any step. Nothing is learned.
pub fn serve(a: &ServeArgs) -> Result<()> {
    let ck = match &a.ckpt {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()))?),
        None => None,
    };
    let kind = match &ck {
        Some(c) => env_arg(a.env, c.env, "checkpoint")?,
        None => a.env.unwrap_or(EnvKind::Reach2d),
    };
    if !(a.hz > 0.0 && a.hz.is_finite()) {
        return Err(ConfigError("--hz must be positive".into()).into());
    }
    let gateway = Gateway::serve((a.bind.as_str(), a.port))?;
    info!("serving {kind} on ws://{}", gateway.local_addr());
    let mut iv = gateway.intervener();
    let mut env = SimEnv::new(EnvConfig::new(kind))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut window = MetricsWindow::default();
    let period = Duration::from_secs_f64(1.0 / a.hz);
    let mut episode = 0;
    while a.episodes.is_none_or(|n| episode < n) {
        let mut obs = env.reset(a.seed + episode as u64);
        iv.start_episode();
        let (mut last, mut taken) = (None, 0);
        loop {
            let policy = match &ck {
                Some(c) => c.agent.head.act(&c.backbone.encode(&obs)?, &mut rng)?,
                None => ActionVector(vec![0.0; kind.action_dim()]),
            };
            let d = iv.decide(&env, last.as_ref());
            taken += d.active as usize;
            let action = d.action.unwrap_or_else(|| policy.clone());
            let (next, done, info) = env.step(&action)?;
            let rates = window.rates();
            iv.report(&StepReport {
                episode,
                step: info.steps,
                image: &next.images[0],
                proprio: &next.proprio,
                policy_action: &policy,
                intervening: d.active,
                success_rate_20: rates.success_rate,
                intervention_rate_20: rates.intervention_rate,
            });
            obs = next;
            std::thread::sleep(period);
            if done {
                let m = EpisodeMetrics {
                    episode,
                    seed: a.seed + episode as u64,
                    success: info.success,
                    length: info.steps,
                    intervention_steps: taken,
                    episode_return: 0.0,
                    wall_seconds: 0.0,
                };
                report(json!({"episode": episode, "success": m.success, "length": m.length, "intervention_steps": taken}));
                window.push(m);
                break;
            }
            last = Some(info);
        }
        episode += 1;
    }
    gateway.shutdown();
    Ok(())
}
