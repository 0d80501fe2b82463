//! Acceptance suite. Runs every headline criterion at its stated tolerance
//! and prints one PASS or FAIL line per criterion; exits non-zero if any
//! criterion fails.
//!
//! The end-to-end criteria train real networks and take several minutes
//! on one core.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use conrft_core::batch::Batch;
use conrft_core::buffers::{symmetric_sample, DemoBuffer, ReplayBuffer, Source};
use conrft_core::consistency::{actor_loss_with, standard_normal, ActorNoise, ConsistencyHead, DiffusionSchedule};
use conrft_core::critic::{CriticEnsemble, CriticNoise};
use conrft_core::encoder::EncoderBackbone;
use conrft_core::envs::{EnvConfig, EnvKind, SimEnv};
use conrft_core::intervention::{ScriptedIntervener, ScriptedIntervenerConfig};
use conrft_core::nn::Parameters;
use conrft_core::recipe;
use conrft_core::reward::SuccessClassifier;
use conrft_core::trainer::{
    evaluate, offline_actor_objective, online_actor_objective, train_offline, train_online, train_sft, OnlineOptions,
    RewardSource, WINDOW,
};
use conrft_core::types::{ActionVector, TrainConfig, Transition, REWARD_STEP, REWARD_SUCCESS};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck;

const EVAL_EPISODES: usize = 50;
const EVAL_SEED: u64 = 500_000;
const REACH_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(name: &str, failures: &mut Vec<String>, f: impl FnOnce() -> Outcome) {
    let began = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        outcome(false, format!("panicked: {msg}"))
    });
    let tag = if result.pass { "PASS" } else { "FAIL" };
    println!("{tag} {name} ({:.1} s): {}", began.elapsed().as_secs_f64(), result.detail);
    std::io::stdout().flush().ok();
    if !result.pass {
        failures.push(name.to_string());
    }
}

fn schedule_exactness() -> Outcome {
    let began = Instant::now();
    let s = DiffusionSchedule::new(0.002, 80.0, 40, 7.0).expect("valid schedule");
    let mut worst: f64 = 0.0;
    for i in 1..=40 {
        let (lo, hi) = (0.002f64.powf(1.0 / 7.0), 80.0f64.powf(1.0 / 7.0));
        let want = (lo + (i as f64 - 1.0) / 39.0 * (hi - lo)).powf(7.0);
        worst = worst.max(((s.k(i) - want) / want).abs());
    }
    let ends = s.k(1) == 0.002 && s.k(40) == 80.0;
    let secs = began.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && ends && secs < 1.0,
        format!("worst relative error {worst:.2e}, endpoints exact: {ends}, {secs:.4} s"),
    )
}

fn boundary_identity() -> Outcome {
    let began = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sched = DiffusionSchedule::standard();
    let head: ConsistencyHead<f32> = ConsistencyHead::new(3, 64, 256, &sched, &mut rng);
    let a: Array2<f32> = standard_normal::<f32, _>(1000, 3, &mut rng);
    let e: Array2<f32> = standard_normal::<f32, _>(1000, 64, &mut rng);
    let out = head
        .consistency_function(a.view(), &vec![sched.eps; 1000], e.view())
        .expect("valid inputs");
    let worst = (&out - &a).iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let secs = began.elapsed().as_secs_f64();
    outcome(
        worst == 0.0 && secs < 5.0,
        format!("max deviation {worst} over 1000 draws, {secs:.3} s"),
    )
}

fn gradient_suite() -> Outcome {
    let began = Instant::now();
    let parts = [
        ("bc", gradcheck::over_configs(0, gradcheck::consistency_bc)),
        ("actor", gradcheck::over_configs(100, gradcheck::actor)),
        ("calibrated critic", gradcheck::over_configs(200, |s| gradcheck::critic(s, false))),
        ("online critic", gradcheck::over_configs(300, |s| gradcheck::critic(s, true))),
    ];
    let secs = began.elapsed().as_secs_f64();
    let pass = parts.iter().all(|(_, e)| *e <= 1e-3) && secs < 120.0;
    let detail = parts
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("worst relative errors over {} configurations: {detail}", gradcheck::CONFIGS))
}

/// Conservative loss without calibration, coded directly from the member
/// values.
fn uncalibrated_reference(
    critic: &CriticEnsemble<f64>,
    head: &ConsistencyHead<f64>,
    b: &Batch<f64>,
    alpha: f64,
    gamma: f64,
    noise: &CriticNoise<f64>,
) -> f64 {
    let n = b.len() as f64;
    let y = critic.backup_target(b, head, gamma, noise.next_z.view()).unwrap();
    let q_data = critic.q_values(b.emb.view(), b.prop.view(), b.action.view()).unwrap();
    let mut total = 0.0;
    for j in 0..critic.len() {
        let mut pi_sum = 0.0;
        for z in &noise.policy_z {
            let a = head.sample_with_noise(b.emb.view(), z.view()).unwrap();
            pi_sum += critic.q_values(b.emb.view(), b.prop.view(), a.view()).unwrap().column(j).sum();
        }
        let pi_mean = pi_sum / (n * noise.policy_z.len() as f64);
        let data_mean = q_data.column(j).sum() / n;
        let td: f64 = q_data.column(j).iter().zip(&y).map(|(q, t)| (q - t).powi(2)).sum::<f64>() / n;
        total += alpha * (pi_mean - data_mean) + 0.5 * td;
    }
    total
}

fn loss_identities() -> Outcome {
    let mut worst_linear: f64 = 0.0;
    let mut worst_calibration: f64 = 0.0;
    let mut exact_continuity = true;
    for seed in 0..10 {
        let (head, critic, sched, mut rng) = gradcheck::setup(500 + seed);
        let mut b = gradcheck::batch(8, &mut rng);

        // linearity in the two weights under fixed noise
        let noise = ActorNoise::draw(8, 2, &sched, &mut rng);
        let (eta, beta) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let loss = |eta, beta| {
            actor_loss_with(&head, &sched, &critic, b.emb.view(), b.prop.view(), b.action.view(), eta, beta, &noise)
                .unwrap()
        };
        let (both, q_only, bc_only) = (loss(eta, beta), loss(1.0, 0.0), loss(0.0, 1.0));
        worst_linear = worst_linear.max((both.total - (eta * q_only.total + beta * bc_only.total)).abs());
        let combined: Vec<f64> = q_only
            .grads
            .flat()
            .iter()
            .zip(bc_only.grads.flat())
            .map(|(q, c)| eta * q + beta * c)
            .collect();
        for (g, c) in both.grads.flat().iter().zip(&combined) {
            worst_linear = worst_linear.max((g - c).abs());
        }

        // a hopeless reference value disables the calibration floor
        b.mc_return = Some(Array1::from_elem(8, -1e9));
        let cn = CriticNoise::draw(8, 2, 4, &mut rng);
        let alpha = rng.random_range(0.001..0.1);
        let calibrated = critic.calql_loss(&b, &head, alpha, 0.99, &cn).unwrap().total;
        let reference = uncalibrated_reference(&critic, &head, &b, alpha, 0.99, &cn);
        worst_calibration = worst_calibration.max((calibrated - reference).abs());

        // online objective on a demo-only batch with the offline weights
        let cfg = TrainConfig {
            eta_offline: eta,
            beta_offline: beta,
            eta_online: eta,
            beta_online: beta,
            ..TrainConfig::default()
        };
        b.sources = vec![Source::Demo; 8];
        let off = offline_actor_objective(&head, &sched, &critic, &b, &cfg, &noise).unwrap();
        let on = online_actor_objective(&head, &sched, &critic, &b, &cfg, &noise).unwrap();
        exact_continuity &= off.total == on.total && off.grads == on.grads;
    }
    outcome(
        worst_linear <= 1e-9 && worst_calibration <= 1e-6 && exact_continuity,
        format!(
            "(a) linearity error {worst_linear:.1e}, (b) calibration-off error {worst_calibration:.1e}, \
             (c) demo-only online equals offline exactly: {exact_continuity}"
        ),
    )
}

fn symmetric_sampling() -> Outcome {
    let mut env = SimEnv::new(EnvConfig::new(EnvKind::Reach2d)).unwrap();
    let obs = Arc::new(env.reset(0));
    let item = |tag: f64, intervened: bool, ret: Option<f64>| Transition {
        s: obs.clone(),
        a: ActionVector(vec![tag, 0.0]),
        r: REWARD_STEP,
        s_next: obs.clone(),
        done: false,
        intervened,
        mc_return: ret,
    };
    let (nd, nr) = (9usize, 23usize);
    let mut demo = DemoBuffer::new();
    let mut replay = ReplayBuffer::new(100);
    for i in 0..nd {
        demo.append(item(i as f64, true, Some(0.0))).unwrap();
    }
    for i in 0..nr {
        replay.append(item(1000.0 + i as f64, false, None)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (draws, batch) = (10_000, 256);
    let mut counts: HashMap<i64, f64> = HashMap::new();
    let mut unbalanced = 0;
    for _ in 0..draws {
        let rows = symmetric_sample(&demo, &replay, batch, &mut rng).unwrap();
        let from_demo = rows.iter().filter(|(s, _)| *s == Source::Demo).count();
        unbalanced += (from_demo != batch / 2) as usize;
        for (_, t) in rows {
            *counts.entry(t.a.0[0] as i64).or_default() += 1.0;
        }
    }
    let n = (draws * batch / 2) as f64;
    let mut worst_z: f64 = 0.0;
    for (pool, offset) in [(nd, 0i64), (nr, 1000)] {
        let p = 1.0 / pool as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for i in 0..pool as i64 {
            let c = counts.get(&(offset + i)).copied().unwrap_or(0.0);
            worst_z = worst_z.max((c - n * p).abs() / sigma);
        }
    }
    outcome(
        unbalanced == 0 && worst_z <= 5.0,
        format!("{unbalanced} unbalanced batches of {draws}; worst per-element deviation {worst_z:.2} sigma"),
    )
}

fn classifier_criterion(backbone: &EncoderBackbone, classifiers: &mut HashMap<EnvKind, SuccessClassifier>) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in EnvKind::ALL {
        let (cls, report) = recipe::reference_classifier(kind, backbone).expect("classifier trains");
        pass &= report.heldout_accuracy >= 0.95;
        parts.push(format!("{kind} {:.3} on {}", report.heldout_accuracy, report.heldout_size));
        classifiers.insert(kind, cls);
    }
    outcome(
        pass,
        format!(
            "held-out accuracy with {} positives per set: {}",
            recipe::EXAMPLE_EPISODES,
            parts.join(", ")
        ),
    )
}

/// Everything one reach2d seed produces that the criteria look at.
struct ReachRun {
    seed: u64,
    offline_success: f64,
    offline_length: f64,
    final_autonomous: f64,
    final_intervention: f64,
    online_length: f64,
    online_success: f64,
    intervened_in_replay: u64,
    autonomous_in_demo: u64,
    demo_appends: u64,
    intervention_steps: u64,
    min_replay_at_update: Option<usize>,
    learner_steps: u64,
    unbalanced_batches: u64,
    rewards_seen: Vec<f64>,
    fingerprints: [String; 3],
}

fn reach_run(seed: u64, backbone: &EncoderBackbone, cls: &SuccessClassifier) -> ReachRun {
    let kind = EnvKind::Reach2d;
    let env = EnvConfig::new(kind);
    let demos = recipe::reference_demos(kind, seed).unwrap();
    let cfg = recipe::desk_config(seed);
    let (offline, _) = train_offline(kind, &demos, backbone, &cfg).unwrap();
    let off_eval = evaluate(&offline, &env, EVAL_EPISODES, EVAL_SEED).unwrap();
    let opts = OnlineOptions {
        env: env.clone(),
        reward: RewardSource::Classifier(cls.clone()),
        seed_base: recipe::online_seed_base(seed),
        metrics_path: None,
    };
    let mut iv = ScriptedIntervener::new(ScriptedIntervenerConfig::default()).unwrap();
    let res = train_online(&offline, &demos, &cfg, &opts, &mut iv).unwrap();
    let tail = &res.episodes[res.episodes.len().saturating_sub(WINDOW)..];
    let k = tail.len() as f64;
    let on_eval = evaluate(&res.checkpoint, &env, EVAL_EPISODES, EVAL_SEED).unwrap();
    let c = &res.counters;
    ReachRun {
        seed,
        offline_success: off_eval.success_rate,
        offline_length: off_eval.mean_length,
        final_autonomous: tail.iter().filter(|m| m.autonomous_success()).count() as f64 / k,
        final_intervention: tail.iter().map(|m| m.intervention_rate()).sum::<f64>() / k,
        online_length: on_eval.mean_length,
        online_success: on_eval.success_rate,
        intervened_in_replay: c.intervened_in_replay,
        autonomous_in_demo: c.autonomous_in_demo,
        demo_appends: c.demo_appends,
        intervention_steps: c.intervention_steps,
        min_replay_at_update: c.min_replay_len_at_update,
        learner_steps: c.learner_steps,
        unbalanced_batches: c.unbalanced_batches,
        rewards_seen: c.rewards_seen.clone(),
        fingerprints: [
            backbone.fingerprint(),
            offline.backbone.fingerprint(),
            res.checkpoint.backbone.fingerprint(),
        ],
    }
}

fn main() {
    let mut failures = Vec::new();
    println!("acceptance suite");
    run("schedule exactness", &mut failures, schedule_exactness);
    run("boundary identity", &mut failures, boundary_identity);
    run("gradient suite", &mut failures, gradient_suite);
    run("loss identities", &mut failures, loss_identities);
    run("symmetric sampling", &mut failures, symmetric_sampling);

    let began = Instant::now();
    let backbone = recipe::pretrain_reference_encoder().expect("encoder pretraining").0;
    let pretrain_time = began.elapsed();
    let mut classifiers = HashMap::new();
    run("reward classifier accuracy", &mut failures, || {
        classifier_criterion(&backbone, &mut classifiers)
    });

    let mut runs = Vec::new();
    let mut reach_time = pretrain_time;
    if let Some(cls) = classifiers.get(&EnvKind::Reach2d) {
        for seed in REACH_SEEDS {
            let t = Instant::now();
            match catch_unwind(AssertUnwindSafe(|| reach_run(seed, &backbone, cls))) {
                Ok(r) => {
                    println!(
                        "  reach2d seed {seed}: offline success {:.2} length {:.1}; online window autonomous {:.2} \
                         intervention {:.3}; online eval success {:.2} length {:.1}",
                        r.offline_success,
                        r.offline_length,
                        r.final_autonomous,
                        r.final_intervention,
                        r.online_success,
                        r.online_length
                    );
                    runs.push(r);
                }
                Err(_) => println!("  reach2d seed {seed}: run panicked"),
            }
            reach_time += t.elapsed();
        }
    }
    let all_ran = runs.len() == REACH_SEEDS.len();

    run("routing and gate invariants", &mut failures, || {
        let ok = all_ran
            && runs.iter().all(|r| {
                r.intervened_in_replay == 0
                    && r.autonomous_in_demo == 0
                    && r.demo_appends == r.intervention_steps
                    && r.min_replay_at_update.is_none_or(|m| m >= 100)
                    && r.learner_steps > 0
                    && r.unbalanced_batches == 0
            });
        let d = runs
            .iter()
            .map(|r| {
                format!(
                    "seed {}: {} intervened in R, {} autonomous in D, {} interventions routed to D, \
                     smallest R at an update {:?}, {} unbalanced of {} batches",
                    r.seed,
                    r.intervened_in_replay,
                    r.autonomous_in_demo,
                    r.demo_appends,
                    r.min_replay_at_update,
                    r.unbalanced_batches,
                    r.learner_steps
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        outcome(ok, d)
    });

    run("frozen encoder", &mut failures, || {
        let ok = all_ran && runs.iter().all(|r| r.fingerprints.iter().all(|f| *f == r.fingerprints[0]));
        outcome(ok, format!("fingerprint {} at init, post-offline and post-online", &backbone.fingerprint()[..16]))
    });

    run("reward values", &mut failures, || {
        let ok = all_ran
            && runs
                .iter()
                .all(|r| !r.rewards_seen.is_empty() && r.rewards_seen.iter().all(|v| *v == REWARD_STEP || *v == REWARD_SUCCESS));
        let seen: Vec<_> = runs.iter().map(|r| format!("{:?}", r.rewards_seen)).collect();
        outcome(ok, format!("emitted reward sets per seed: {}", seen.join(", ")))
    });

    run("desk-scale end-to-end (reach2d)", &mut failures, || {
        let mut ok = all_ran && reach_time <= Duration::from_secs(45 * 60);
        let mut parts = Vec::new();
        for r in &runs {
            let seed_ok = r.offline_success >= 0.4
                && r.final_autonomous >= 0.9
                && r.final_intervention <= 0.1
                && r.online_length <= 0.7 * r.offline_length;
            ok &= seed_ok;
            parts.push(format!(
                "seed {} {}: offline success {:.2}, autonomous {:.2}, intervention {:.3}, length {:.1} vs limit {:.1}",
                r.seed,
                if seed_ok { "ok" } else { "short" },
                r.offline_success,
                r.final_autonomous,
                r.final_intervention,
                r.online_length,
                0.7 * r.offline_length
            ));
        }
        parts.push(format!("total {:.1} min", reach_time.as_secs_f64() / 60.0));
        outcome(ok, parts.join("; "))
    });

    run("method ordering (insert2d)", &mut failures, || {
        let kind = EnvKind::Insert2d;
        let env = EnvConfig::new(kind);
        let demos = recipe::reference_demos(kind, 0).unwrap();
        let cfg = recipe::desk_config(0);
        let (sft, _) = train_sft(kind, &demos, &backbone, &cfg).unwrap();
        let sft_eval = evaluate(&sft, &env, EVAL_EPISODES, EVAL_SEED).unwrap();
        let (offline, _) = train_offline(kind, &demos, &backbone, &cfg).unwrap();
        let opts = OnlineOptions {
            env: env.clone(),
            reward: RewardSource::Classifier(classifiers[&kind].clone()),
            seed_base: recipe::online_seed_base(0),
            metrics_path: None,
        };
        let mut iv = ScriptedIntervener::new(ScriptedIntervenerConfig::default()).unwrap();
        let online = train_online(&offline, &demos, &cfg, &opts, &mut iv).unwrap();
        let eval = evaluate(&online.checkpoint, &env, EVAL_EPISODES, EVAL_SEED).unwrap();
        let gap = eval.success_rate - sft_eval.success_rate;
        outcome(
            gap >= 0.2 - 1e-12,
            format!(
                "{} demos: SFT success {:.2}, ConRFT success {:.2}, gap {:+.0} points",
                demos.len(),
                sft_eval.success_rate,
                eval.success_rate,
                100.0 * gap
            ),
        )
    });

    println!(
        "{} of the criteria failed{}",
        failures.len(),
        if failures.is_empty() { String::new() } else { format!(": {}", failures.join(", ")) }
    );
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
