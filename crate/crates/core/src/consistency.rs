//! Consistency-policy action head.
//!
//! The head maps a noised action `a^k`, its noise level `k` and a frozen
//! state embedding to a clean action in a single network evaluation:
//!
//! ```text
//! f(a, k | e) = c_skip(k) * a + c_out(k) * net([c_in(k) * a, log-k features, e])
//! ```
//!
//! `c_skip(eps) = 1` and `c_out(eps) = 0`, so `f(a, eps | e) = a` holds
//! exactly regardless of the network weights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::CriticEnsemble;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Mlp, MlpTape, Parameters, Real};
use crate::types::ActionVector;

pub const DEFAULT_EPS: f64 = 0.002;
pub const DEFAULT_K_MAX: f64 = 80.0;
pub const DEFAULT_BOUNDARIES: usize = 40;
pub const DEFAULT_SCHEDULE_RHO: f64 = 7.0;
pub const SIGMA_DATA: f64 = 0.5;

/// Discretized noise levels `k_1 = eps < ... < k_M = k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub eps: f64,
    pub k_max: f64,
    /// Number of boundaries.
    pub m: usize,
    pub schedule_rho: f64,
    #[serde(skip)]
    boundaries: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(eps: f64, k_max: f64, m: usize, schedule_rho: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 boundaries, got {m}"
            )));
        }
        if !(eps > 0.0 && eps < k_max) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < eps < k_max, got eps={eps}, k_max={k_max}"
            )));
        }
        if schedule_rho.is_nan() || schedule_rho <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "schedule exponent must be positive, got {schedule_rho}"
            )));
        }
        let lo = eps.powf(1.0 / schedule_rho);
        let hi = k_max.powf(1.0 / schedule_rho);
        let mut boundaries: Vec<f64> = (0..m)
            .map(|i| (lo + i as f64 / (m - 1) as f64 * (hi - lo)).powf(schedule_rho))
            .collect();
        // pin the endpoints; the closed form is only exact up to rounding there
        boundaries[0] = eps;
        boundaries[m - 1] = k_max;
        Ok(Self {
            eps,
            k_max,
            m,
            schedule_rho,
            boundaries,
        })
    }

    pub fn standard() -> Self {
        Self::new(DEFAULT_EPS, DEFAULT_K_MAX, DEFAULT_BOUNDARIES, DEFAULT_SCHEDULE_RHO)
            .expect("standard schedule is valid")
    }

    /// Rebuilds the boundary table after deserialization.
    pub fn rebuilt(&self) -> Result<Self> {
        Self::new(self.eps, self.k_max, self.m, self.schedule_rho)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// One-based boundary `k_i`.
    pub fn k(&self, i: usize) -> f64 {
        self.boundaries[i - 1]
    }
}

pub fn c_skip(k: f64, eps: f64) -> f64 {
    let s2 = SIGMA_DATA * SIGMA_DATA;
    s2 / ((k - eps) * (k - eps) + s2)
}

pub fn c_out(k: f64, eps: f64) -> f64 {
    SIGMA_DATA * (k - eps) / (k * k + SIGMA_DATA * SIGMA_DATA).sqrt()
}

pub fn c_in(k: f64) -> f64 {
    1.0 / (k * k + SIGMA_DATA * SIGMA_DATA).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyHead<F: Real> {
    pub net: Mlp<F>,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub eps: f64,
    pub k_max: f64,
}

#[derive(Debug, Clone)]
pub struct HeadTape<F: Real> {
    net: MlpTape<F>,
    c_out: Vec<F>,
}

/// Recorded one-step sample for backpropagating through the action.
#[derive(Debug, Clone)]
pub struct SampleTape<F: Real> {
    head: HeadTape<F>,
    raw: Array2<F>,
}

impl<F: Real> ConsistencyHead<F> {
    /// Two linear layers with one Mish hidden layer of width `hidden`.
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        embed_dim: usize,
        hidden: usize,
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Self {
        Self::with_dims(action_dim, embed_dim, &[hidden], schedule, rng)
    }

    pub fn with_dims<R: Rng + ?Sized>(
        action_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![action_dim + 2 + embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        Self {
            net: Mlp::new(&dims, rng),
            action_dim,
            embed_dim,
            eps: schedule.eps,
            k_max: schedule.k_max,
        }
    }

    fn check(&self, a: &ArrayView2<F>, emb: &ArrayView2<F>) -> Result<()> {
        check_dim("noisy action width", self.action_dim, a.ncols())?;
        check_dim("embedding width", self.embed_dim, emb.ncols())?;
        check_dim("batch rows", a.nrows(), emb.nrows())
    }

    fn net_input(&self, a: ArrayView2<F>, ks: &[f64], emb: ArrayView2<F>) -> Array2<F> {
        let n = a.nrows();
        let (da, de) = (self.action_dim, self.embed_dim);
        let mut x = Array2::zeros((n, da + 2 + de));
        for i in 0..n {
            let k = ks[i];
            let cin = F::of(c_in(k));
            let mut row = x.row_mut(i);
            for j in 0..da {
                row[j] = cin * a[[i, j]];
            }
            row[da] = F::of(0.25 * k.ln());
            row[da + 1] = F::of(k / self.k_max);
            row.slice_mut(s![da + 2..]).assign(&emb.row(i));
        }
        x
    }

    fn combine(&self, a: ArrayView2<F>, ks: &[f64], net_out: &Array2<F>) -> (Array2<F>, Vec<F>) {
        let mut out = net_out.clone();
        let mut couts = Vec::with_capacity(ks.len());
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (skip, co) = (F::of(c_skip(ks[i], self.eps)), F::of(c_out(ks[i], self.eps)));
            couts.push(co);
            for j in 0..self.action_dim {
                row[j] = skip * a[[i, j]] + co * row[j];
            }
        }
        (out, couts)
    }

    /// Evaluates `f(a, k | e)` row-wise with one noise level per row.
    pub fn consistency_function(
        &self,
        a_noisy: ArrayView2<F>,
        ks: &[f64],
        emb: ArrayView2<F>,
    ) -> Result<Array2<F>> {
        self.check(&a_noisy, &emb)?;
        check_dim("noise levels", a_noisy.nrows(), ks.len())?;
        if let Some(k) = ks.iter().find(|k| !(**k >= self.eps && **k <= self.k_max)) {
            return Err(Error::InvalidArgument(format!(
                "noise level {k} outside [{}, {}]",
                self.eps, self.k_max
            )));
        }
        let net_out = self.net.forward(self.net_input(a_noisy, ks, emb.view()).view());
        Ok(self.combine(a_noisy, ks, &net_out).0)
    }

    pub fn forward_tape(
        &self,
        a_noisy: ArrayView2<F>,
        ks: &[f64],
        emb: ArrayView2<F>,
    ) -> (Array2<F>, HeadTape<F>) {
        let x = self.net_input(a_noisy, ks, emb);
        let (net_out, net) = self.net.forward_tape(x);
        let (out, c_out) = self.combine(a_noisy, ks, &net_out);
        (out, HeadTape { net, c_out })
    }

    /// Accumulates parameter gradients for `grad_out = dL/df`.
    pub fn backward(&self, tape: &HeadTape<F>, grad_out: &Array2<F>, grads: &mut Mlp<F>) {
        let mut g = grad_out.clone();
        for (mut row, co) in g.axis_iter_mut(Axis(0)).zip(&tape.c_out) {
            row.mapv_inplace(|v| v * *co);
        }
        self.net.backward(&tape.net, g, Some(grads));
    }

    /// One-step generation from standard-normal draws `z`: returns
    /// `clip(f(k_max * z, k_max | e))`.
    pub fn sample_with_noise(&self, emb: ArrayView2<F>, z: ArrayView2<F>) -> Result<Array2<F>> {
        self.check(&z, &emb)?;
        Ok(self.sample_tape(emb, z).0)
    }

    pub fn sample_tape(&self, emb: ArrayView2<F>, z: ArrayView2<F>) -> (Array2<F>, SampleTape<F>) {
        let a_k = z.mapv(|v| v * F::of(self.k_max));
        let ks = vec![self.k_max; z.nrows()];
        let (raw, head) = self.forward_tape(a_k.view(), &ks, emb);
        let clipped = raw.mapv(|v| v.max(-F::one()).min(F::one()));
        (clipped, SampleTape { head, raw })
    }

    /// Backpropagates through the clip and the head; gradients vanish where
    /// the raw action was clipped.
    pub fn sample_backward(&self, tape: &SampleTape<F>, grad_action: &Array2<F>, grads: &mut Mlp<F>) {
        let mut g = grad_action.clone();
        ndarray::Zip::from(&mut g).and(&tape.raw).for_each(|gv, &r| {
            if r.abs() > F::one() {
                *gv = F::zero();
            }
        });
        self.backward(&tape.head, &g, grads);
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, emb: ArrayView2<F>, rng: &mut R) -> Result<Array2<F>> {
        let z = standard_normal::<F, R>(emb.nrows(), self.action_dim, rng);
        self.sample_with_noise(emb, z.view())
    }

    /// Single-state convenience wrapper.
    pub fn act<R: Rng + ?Sized>(&self, emb: &[F], rng: &mut R) -> Result<ActionVector> {
        let e = ArrayView2::from_shape((1, emb.len()), emb)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let a = self.sample_action(e, rng)?;
        Ok(ActionVector(a.row(0).iter().map(|v| v.as_f64()).collect()))
    }

    pub fn cast<G: Real>(&self) -> ConsistencyHead<G> {
        ConsistencyHead {
            net: self.net.cast(),
            action_dim: self.action_dim,
            embed_dim: self.embed_dim,
            eps: self.eps,
            k_max: self.k_max,
        }
    }
}

impl<F: Real> Parameters<F> for ConsistencyHead<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.net.tensors_mut()
    }
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = rng.sample(StandardNormal);
        F::of(v)
    })
}

/// Per-element noise of the consistency BC term: boundary index `m` drawn
/// uniformly from `1..=M-1` and a standard-normal direction `z`.
#[derive(Debug, Clone)]
pub struct BcNoise<F: Real> {
    pub m: Vec<usize>,
    pub z: Array2<F>,
}

impl<F: Real> BcNoise<F> {
    pub fn draw<R: Rng + ?Sized>(n: usize, action_dim: usize, schedule: &DiffusionSchedule, rng: &mut R) -> Self {
        let m = (0..n).map(|_| rng.random_range(1..schedule.m)).collect();
        Self {
            m,
            z: standard_normal(n, action_dim, rng),
        }
    }
}

/// Noise consumed by one actor objective evaluation.
#[derive(Debug, Clone)]
pub struct ActorNoise<F: Real> {
    pub sample_z: Array2<F>,
    pub bc: BcNoise<F>,
}

impl<F: Real> ActorNoise<F> {
    pub fn draw<R: Rng + ?Sized>(n: usize, action_dim: usize, schedule: &DiffusionSchedule, rng: &mut R) -> Self {
        Self {
            sample_z: standard_normal(n, action_dim, rng),
            bc: BcNoise::draw(n, action_dim, schedule, rng),
        }
    }
}

/// Mean Euclidean distance between the denoised perturbed action and the
/// clean action. With `grads`, accumulates `weight * dterm/dpsi`.
pub fn bc_consistency_term_with<F: Real>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    emb: ArrayView2<F>,
    actions: ArrayView2<F>,
    noise: &BcNoise<F>,
    grads: Option<(&mut Mlp<F>, F)>,
) -> Result<F> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::Empty("consistency BC batch"));
    }
    head.check(&actions, &emb)?;
    check_dim("BC noise rows", n, noise.m.len())?;
    let ks: Vec<f64> = noise.m.iter().map(|&m| schedule.k(m)).collect();
    let mut noisy = actions.to_owned();
    for (i, mut row) in noisy.axis_iter_mut(Axis(0)).enumerate() {
        let k = F::of(ks[i]);
        for j in 0..row.len() {
            row[j] += k * noise.z[[i, j]];
        }
    }
    let (out, tape) = head.forward_tape(noisy.view(), &ks, emb);
    let diff = &out - &actions;
    let dist: Array1<F> = diff.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let inv_n = F::one() / F::of(n as f64);
    let loss = dist.sum() * inv_n;
    if let Some((g, weight)) = grads {
        let mut gout = diff;
        for (mut row, d) in gout.axis_iter_mut(Axis(0)).zip(dist.iter()) {
            let scale = if *d > F::zero() { weight * inv_n / *d } else { F::zero() };
            row.mapv_inplace(|v| v * scale);
        }
        head.backward(&tape, &gout, g);
    }
    Ok(loss)
}

pub fn bc_consistency_term<F: Real, R: Rng + ?Sized>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    emb: ArrayView2<F>,
    actions: ArrayView2<F>,
    rng: &mut R,
) -> Result<F> {
    let noise = BcNoise::draw(actions.nrows(), head.action_dim, schedule, rng);
    bc_consistency_term_with(head, schedule, emb, actions, &noise, None)
}

#[derive(Debug, Clone)]
pub struct ActorLoss<F: Real> {
    pub total: F,
    /// Mean of the actor-facing (minimum) Q over sampled actions.
    pub q_mean: F,
    pub bc: F,
    pub grads: Mlp<F>,
}

/// `-eta * mean Q(s, a_pi) + beta * BC` with gradients for the head.
///
/// `a_pi` is a reparameterized one-step sample, so Q-guidance reaches the
/// head parameters through the sampled action.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_with<F: Real>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    critic: &CriticEnsemble<F>,
    emb: ArrayView2<F>,
    prop: ArrayView2<F>,
    actions: ArrayView2<F>,
    eta: f64,
    beta: f64,
    noise: &ActorNoise<F>,
) -> Result<ActorLoss<F>> {
    if eta < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "actor weights must be non-negative, got eta={eta}, beta={beta}"
        )));
    }
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::Empty("actor batch"));
    }
    let mut grads = head.net.zeros_like();

    let (a_pi, tape) = head.sample_tape(emb, noise.sample_z.view());
    let (q, dq_da) = critic.min_q_with_action_grad(emb, prop, a_pi.view())?;
    let q_mean = q.sum() / F::of(n as f64);
    if eta > 0.0 {
        let g = dq_da.mapv(|v| v * F::of(-eta / n as f64));
        head.sample_backward(&tape, &g, &mut grads);
    }

    let bc = bc_consistency_term_with(
        head,
        schedule,
        emb,
        actions,
        &noise.bc,
        Some((&mut grads, F::of(beta))),
    )?;
    let total = F::of(-eta) * q_mean + F::of(beta) * bc;
    Ok(ActorLoss {
        total,
        q_mean,
        bc,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn actor_loss<F: Real, R: Rng + ?Sized>(
    head: &ConsistencyHead<F>,
    schedule: &DiffusionSchedule,
    critic: &CriticEnsemble<F>,
    emb: ArrayView2<F>,
    prop: ArrayView2<F>,
    actions: ArrayView2<F>,
    eta: f64,
    beta: f64,
    rng: &mut R,
) -> Result<ActorLoss<F>> {
    let noise = ActorNoise::draw(actions.nrows(), head.action_dim, schedule, rng);
    actor_loss_with(head, schedule, critic, emb, prop, actions, eta, beta, &noise)
}
