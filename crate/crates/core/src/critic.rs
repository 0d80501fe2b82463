//! Q-function ensemble with delayed targets.
//!
//! Each member maps `embedding ++ proprio ++ action` to a scalar value in
//! reward units. Backups and actor guidance both use the minimum over
//! members.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::batch::Batch;
use crate::consistency::{standard_normal, ConsistencyHead};
use crate::error::{check_dim, Error, Result};
use crate::nn::{hcat, Mlp, Parameters, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble<F: Real> {
    pub members: Vec<Mlp<F>>,
    pub targets: Vec<Mlp<F>>,
    pub embed_dim: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
}

/// Noise consumed by one critic objective evaluation.
#[derive(Debug, Clone)]
pub struct CriticNoise<F: Real> {
    /// Draws for the next-state policy action of the backup.
    pub next_z: Array2<F>,
    /// One draw matrix per policy action sampled for the calibrated term.
    pub policy_z: Vec<Array2<F>>,
}

impl<F: Real> CriticNoise<F> {
    pub fn draw<R: Rng + ?Sized>(n: usize, action_dim: usize, n_policy_actions: usize, rng: &mut R) -> Self {
        Self {
            next_z: standard_normal(n, action_dim, rng),
            policy_z: (0..n_policy_actions)
                .map(|_| standard_normal(n, action_dim, rng))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticLoss<F: Real> {
    pub total: F,
    /// TD part, summed over members (with the ½ factor where it applies).
    pub td: F,
    /// Conservative part including `alpha`, summed over members.
    pub conservative: F,
    pub grads: Vec<Mlp<F>>,
}

impl<F: Real> CriticEnsemble<F> {
    pub fn new<R: Rng + ?Sized>(
        n_members: usize,
        embed_dim: usize,
        proprio_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![embed_dim + proprio_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let members: Vec<Mlp<F>> = (0..n_members).map(|_| Mlp::new(&dims, rng)).collect();
        Self {
            targets: members.clone(),
            members,
            embed_dim,
            proprio_dim,
            action_dim,
        }
    }

    /// Turns row standardization of the hidden layers on or off for every
    /// member and target.
    pub fn with_layer_norm(mut self, on: bool) -> Self {
        for net in self.members.iter_mut().chain(self.targets.iter_mut()) {
            net.layer_norm = on;
        }
        self
    }

    pub fn layer_norm(&self) -> bool {
        self.members.first().is_some_and(|m| m.layer_norm)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn input(&self, emb: ArrayView2<F>, prop: ArrayView2<F>, act: ArrayView2<F>) -> Result<Array2<F>> {
        check_dim("critic embedding width", self.embed_dim, emb.ncols())?;
        check_dim("critic proprio width", self.proprio_dim, prop.ncols())?;
        check_dim("critic action width", self.action_dim, act.ncols())?;
        check_dim("critic batch rows", emb.nrows(), prop.nrows())?;
        check_dim("critic batch rows", emb.nrows(), act.nrows())?;
        Ok(hcat(&[emb, prop, act]))
    }

    fn eval(nets: &[Mlp<F>], x: &Array2<F>) -> Array2<F> {
        let mut out = Array2::zeros((x.nrows(), nets.len()));
        for (j, net) in nets.iter().enumerate() {
            out.column_mut(j).assign(&net.forward(x.view()).column(0));
        }
        out
    }

    /// `B x N` matrix of member values.
    pub fn q_values(&self, emb: ArrayView2<F>, prop: ArrayView2<F>, act: ArrayView2<F>) -> Result<Array2<F>> {
        let x = self.input(emb, prop, act)?;
        Ok(Self::eval(&self.members, &x))
    }

    pub fn target_q_values(&self, emb: ArrayView2<F>, prop: ArrayView2<F>, act: ArrayView2<F>) -> Result<Array2<F>> {
        let x = self.input(emb, prop, act)?;
        Ok(Self::eval(&self.targets, &x))
    }

    /// Minimum over members and its gradient with respect to the action.
    pub fn min_q_with_action_grad(
        &self,
        emb: ArrayView2<F>,
        prop: ArrayView2<F>,
        act: ArrayView2<F>,
    ) -> Result<(Array1<F>, Array2<F>)> {
        let x = self.input(emb, prop, act)?;
        let n = x.nrows();
        let runs: Vec<_> = self.members.iter().map(|m| m.forward_tape(x.clone())).collect();
        let mut argmin = vec![0usize; n];
        let mut qmin = Array1::from_elem(n, F::infinity());
        for (j, (out, _)) in runs.iter().enumerate() {
            for i in 0..n {
                if out[[i, 0]] < qmin[i] {
                    qmin[i] = out[[i, 0]];
                    argmin[i] = j;
                }
            }
        }
        let a0 = self.embed_dim + self.proprio_dim;
        let mut grad = Array2::zeros((n, self.action_dim));
        for (j, (member, (_, tape))) in self.members.iter().zip(&runs).enumerate() {
            let g = Array2::from_shape_fn((n, 1), |(i, _)| if argmin[i] == j { F::one() } else { F::zero() });
            if !g.iter().any(|v| *v != F::zero()) {
                continue;
            }
            let gx = member.backward(tape, g, None);
            grad += &gx.slice(s![.., a0..]);
        }
        Ok((qmin, grad))
    }

    /// `r + gamma * (1 - done) * min_j Qbar_j(s', a')` with one policy draw
    /// of `a'` per element. Nothing here is differentiated.
    pub fn backup_target(
        &self,
        batch: &Batch<F>,
        head: &ConsistencyHead<F>,
        gamma: f64,
        next_z: ArrayView2<F>,
    ) -> Result<Array1<F>> {
        let a_next = head.sample_with_noise(batch.next_emb.view(), next_z)?;
        let tq = self.target_q_values(batch.next_emb.view(), batch.next_prop.view(), a_next.view())?;
        let min = tq.map_axis(Axis(1), |r| r.iter().copied().fold(F::infinity(), F::min));
        let g = F::of(gamma);
        let mut y = batch.reward.clone();
        for i in 0..y.len() {
            y[i] += g * (F::one() - batch.done[i]) * min[i];
        }
        Ok(y)
    }

    /// Calibrated conservative loss, summed over members:
    ///
    /// `alpha * (mean max(Q(s, a_pi), V(s)) - mean Q(s, a)) + 1/2 mean (Q(s, a) - y)^2`
    ///
    /// where `V(s)` is the stored Monte-Carlo return and the first mean runs
    /// over states and all sampled policy actions.
    pub fn calql_loss(
        &self,
        batch: &Batch<F>,
        head: &ConsistencyHead<F>,
        alpha: f64,
        gamma: f64,
        noise: &CriticNoise<F>,
    ) -> Result<CriticLoss<F>> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Empty("critic batch"));
        }
        let v = batch
            .mc_return
            .as_ref()
            .ok_or(Error::MissingReturn { index: 0 })?;
        if let Some(i) = v.iter().position(|x| x.is_nan()) {
            return Err(Error::MissingReturn { index: i });
        }
        if noise.policy_z.is_empty() {
            return Err(Error::InvalidArgument("need at least one policy action per state".into()));
        }
        let y = self.backup_target(batch, head, gamma, noise.next_z.view())?;
        let x_data = self.input(batch.emb.view(), batch.prop.view(), batch.action.view())?;

        // all sampled policy actions stacked into one (n_pi * B) batch
        let n_pi = noise.policy_z.len();
        let mut x_pi_parts = Vec::with_capacity(n_pi);
        for z in &noise.policy_z {
            let a = head.sample_with_noise(batch.emb.view(), z.view())?;
            x_pi_parts.push(self.input(batch.emb.view(), batch.prop.view(), a.view())?);
        }
        let views: Vec<_> = x_pi_parts.iter().map(|a| a.view()).collect();
        let x_pi = ndarray::concatenate(Axis(0), &views).expect("same widths");

        let (alpha_f, inv_n) = (F::of(alpha), F::one() / F::of(n as f64));
        let inv_pi = F::one() / F::of((n * n_pi) as f64);
        let half = F::of(0.5);
        let mut td_total = F::zero();
        let mut cons_total = F::zero();
        let mut grads = Vec::with_capacity(self.len());
        for member in &self.members {
            let mut g = member.zeros_like();

            let (q, tape) = member.forward_tape(x_data.clone());
            let q = q.column(0).to_owned();
            let diff = &q - &y;
            td_total += half * diff.dot(&diff) * inv_n;
            cons_total -= alpha_f * q.sum() * inv_n;
            let gq = Array2::from_shape_fn((n, 1), |(i, _)| diff[i] * inv_n - alpha_f * inv_n);
            member.backward(&tape, gq, Some(&mut g));

            let (qp, tape_pi) = member.forward_tape(x_pi.clone());
            let mut gp = Array2::zeros((n * n_pi, 1));
            for r in 0..n * n_pi {
                let (qv, vv) = (qp[[r, 0]], v[r % n]);
                if qv > vv {
                    cons_total += alpha_f * qv * inv_pi;
                    gp[[r, 0]] = alpha_f * inv_pi;
                } else {
                    cons_total += alpha_f * vv * inv_pi;
                }
            }
            if alpha > 0.0 {
                member.backward(&tape_pi, gp, Some(&mut g));
            }
            grads.push(g);
        }
        Ok(CriticLoss {
            total: td_total + cons_total,
            td: td_total,
            conservative: cons_total,
            grads,
        })
    }

    /// Plain squared TD error over a mixed batch, summed over members.
    pub fn online_loss(
        &self,
        batch: &Batch<F>,
        head: &ConsistencyHead<F>,
        gamma: f64,
        next_z: ArrayView2<F>,
    ) -> Result<CriticLoss<F>> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Empty("critic batch"));
        }
        let y = self.backup_target(batch, head, gamma, next_z)?;
        let x = self.input(batch.emb.view(), batch.prop.view(), batch.action.view())?;
        let inv_n = F::one() / F::of(n as f64);
        let two = F::of(2.0);
        let mut total = F::zero();
        let mut grads = Vec::with_capacity(self.len());
        for member in &self.members {
            let mut g = member.zeros_like();
            let (q, tape) = member.forward_tape(x.clone());
            let diff = &q.column(0) - &y;
            total += diff.dot(&diff) * inv_n;
            let gq = Array2::from_shape_fn((n, 1), |(i, _)| two * diff[i] * inv_n);
            member.backward(&tape, gq, Some(&mut g));
            grads.push(g);
        }
        Ok(CriticLoss {
            total,
            td: total,
            conservative: F::zero(),
            grads,
        })
    }

    pub fn polyak_update(&mut self, tau: f64) {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            polyak_update(t, m, tau);
        }
    }

    pub fn cast<G: Real>(&self) -> CriticEnsemble<G> {
        CriticEnsemble {
            members: self.members.iter().map(Mlp::cast).collect(),
            targets: self.targets.iter().map(Mlp::cast).collect(),
            embed_dim: self.embed_dim,
            proprio_dim: self.proprio_dim,
            action_dim: self.action_dim,
        }
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn polyak_update<F: Real, P: Parameters<F>>(target: &mut P, online: &P, tau: f64) {
    let src: Vec<&[F]> = online.tensors().into_iter().map(|(_, _, d)| d).collect();
    let (keep, take) = (F::of(1.0 - tau), F::of(tau));
    for (dst, s) in target.tensors_mut().into_iter().zip(src) {
        for (d, o) in dst.iter_mut().zip(s) {
            *d = keep * *d + take * *o;
        }
    }
}
