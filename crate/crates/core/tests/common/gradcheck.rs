//! Central finite-difference checks of the analytic loss gradients on
//! small f64 networks. Each check returns the worst relative error it saw.

use conrft_core::batch::Batch;
use conrft_core::buffers::Source;
use conrft_core::consistency::{
    actor_loss_with, bc_consistency_term_with, standard_normal, ActorNoise, BcNoise, ConsistencyHead,
    DiffusionSchedule,
};
use conrft_core::critic::{CriticEnsemble, CriticNoise};
use conrft_core::nn::{Mlp, Parameters};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const E: usize = 3;
const P: usize = 2;
const A: usize = 2;
pub const CONFIGS: u64 = 20;
const H: f64 = 1e-6;

pub fn batch(n: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    Batch {
        emb: standard_normal(n, E, rng),
        prop: standard_normal(n, P, rng),
        action: standard_normal::<f64, _>(n, A, rng).mapv(|v| (0.5 * v).clamp(-1.0, 1.0)),
        reward: Array1::from_shape_fn(n, |_| if rng.random_bool(0.3) { 10.0 } else { -0.05 }),
        next_emb: standard_normal(n, E, rng),
        next_prop: standard_normal(n, P, rng),
        done: Array1::from_shape_fn(n, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }),
        mc_return: Some(Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0))),
        sources: vec![Source::Demo; n],
    }
}

pub fn setup(seed: u64) -> (ConsistencyHead<f64>, CriticEnsemble<f64>, DiffusionSchedule, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = DiffusionSchedule::standard();
    let head = ConsistencyHead::new(A, E, 6, &sched, &mut rng);
    // odd configurations exercise the normalized hidden layer
    let critic = CriticEnsemble::new(2, E, P, A, &[5], &mut rng).with_layer_norm(seed % 2 == 1);
    assert!(head.net.num_params() <= 100);
    assert!(critic.members.iter().map(|m| m.num_params()).sum::<usize>() <= 100);
    (head, critic, sched, rng)
}

/// Relative error against a magnitude floored at 0.01, so gradients that
/// vanish on both sides are compared in absolute terms.
fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (0.01 + a.abs().max(n.abs())))
        .fold(0.0, f64::max)
}

fn numeric_grad(net: &Mlp<f64>, mut f: impl FnMut(&Mlp<f64>) -> f64) -> Vec<f64> {
    let base = net.flat();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + H;
        probe.set_flat(&v);
        let up = f(&probe);
        v[i] = base[i] - H;
        probe.set_flat(&v);
        let down = f(&probe);
        out.push((up - down) / (2.0 * H));
    }
    out
}

pub fn consistency_bc(seed: u64) -> f64 {
    let (head, _, sched, mut rng) = setup(seed);
    let b = batch(5, &mut rng);
    let noise = BcNoise::draw(5, A, &sched, &mut rng);
    let mut g = head.net.zeros_like();
    bc_consistency_term_with(&head, &sched, b.emb.view(), b.action.view(), &noise, Some((&mut g, 1.0))).unwrap();
    let num = numeric_grad(&head.net, |net| {
        let mut h = head.clone();
        h.net = net.clone();
        bc_consistency_term_with(&h, &sched, b.emb.view(), b.action.view(), &noise, None).unwrap()
    });
    worst_relative(&g.flat(), &num)
}

pub fn actor(seed: u64) -> f64 {
    let (head, critic, sched, mut rng) = setup(seed);
    let b = batch(5, &mut rng);
    let noise = ActorNoise::draw(5, A, &sched, &mut rng);
    let (eta, beta) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
    let loss = |h: &ConsistencyHead<f64>| {
        actor_loss_with(h, &sched, &critic, b.emb.view(), b.prop.view(), b.action.view(), eta, beta, &noise).unwrap()
    };
    let analytic = loss(&head).grads;
    let num = numeric_grad(&head.net, |net| {
        let mut h = head.clone();
        h.net = net.clone();
        loss(&h).total
    });
    worst_relative(&analytic.flat(), &num)
}

/// Calibrated offline loss, or the online loss with `online`.
pub fn critic(seed: u64, online: bool) -> f64 {
    let (head, critic, _, mut rng) = setup(seed);
    let b = batch(6, &mut rng);
    let noise = CriticNoise::draw(6, A, 4, &mut rng);
    let alpha = rng.random_range(0.0..1.0);
    let loss = |c: &CriticEnsemble<f64>| {
        if online {
            c.online_loss(&b, &head, 0.99, noise.next_z.view()).unwrap()
        } else {
            c.calql_loss(&b, &head, alpha, 0.99, &noise).unwrap()
        }
    };
    let analytic = loss(&critic).grads;
    let mut worst: f64 = 0.0;
    for (j, member_grads) in analytic.iter().enumerate() {
        let num = numeric_grad(&critic.members[j], |net| {
            let mut c = critic.clone();
            c.members[j] = net.clone();
            loss(&c).total
        });
        worst = worst.max(worst_relative(&member_grads.flat(), &num));
    }
    worst
}

/// Worst error of `check` over the standard set of configurations.
pub fn over_configs(offset: u64, check: impl Fn(u64) -> f64) -> f64 {
    (0..CONFIGS).map(|s| check(offset + s)).fold(0.0, f64::max)
}
