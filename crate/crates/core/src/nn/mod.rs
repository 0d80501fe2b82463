//! Minimal dense-network toolkit with hand-written reverse-mode gradients.
//!
//! Everything trainable in the crate (action head, critics, classifier, the
//! encoder during pretraining) is built from [`Linear`] layers and the Mish
//! nonlinearity. Networks are generic over [`Real`] so the same code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::{Conv2d, ConvTape};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Anything that owns named parameter tensors.
///
/// The visiting order is stable and defines the layout used by the
/// optimizer state, Polyak averaging and checkpoint manifests.
pub trait Parameters<F: Real> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    fn flat(&self) -> Vec<F> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, _, d)| d.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, values: &[F]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        assert_eq!(at, values.len(), "flat parameter length");
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }
}

impl<F: Real, P: Parameters<F>> Parameters<F> for Vec<P> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| {
                p.tensors()
                    .into_iter()
                    .map(move |(n, s, d)| (format!("{i}.{n}"), s, d))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Elementwise `x <- x + scale * g` over two parameter sets of the same shape.
pub fn axpy<F: Real, P: Parameters<F>>(target: &mut P, scale: F, source: &P) {
    let src: Vec<&[F]> = source.tensors().into_iter().map(|(_, _, d)| d).collect();
    for (dst, s) in target.tensors_mut().into_iter().zip(src) {
        for (d, v) in dst.iter_mut().zip(s) {
            *d += scale * *v;
        }
    }
}

pub fn mish<F: Real>(x: F) -> F {
    if x > F::of(20.0) {
        return x;
    }
    let n = x.exp();
    let t = n * (n + F::of(2.0));
    x * t / (t + F::of(2.0))
}

/// d/dx of Mish.
pub fn mish_grad<F: Real>(x: F) -> F {
    if x > F::of(20.0) {
        return F::one();
    }
    let n = x.exp();
    let t = n * (n + F::of(2.0));
    let tanh_sp = t / (t + F::of(2.0));
    // sech^2(softplus) * sigmoid
    let sech2 = F::one() - tanh_sp * tanh_sp;
    let sig = n / (F::one() + n);
    tanh_sp + x * sech2 * sig
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F: Real> {
    /// `in x out`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            F::of(rng.random_range(-bound..bound))
        });
        let b = Array1::from_shape_fn(fan_out, |_| F::of(rng.random_range(-bound..bound)));
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut z = x.dot(&self.w);
        z += &self.b;
        z
    }
}

impl<F: Real> Parameters<F> for Linear<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        vec![
            (
                "w".into(),
                self.w.shape().to_vec(),
                self.w.as_slice().expect("standard layout"),
            ),
            (
                "b".into(),
                self.b.shape().to_vec(),
                self.b.as_slice().expect("standard layout"),
            ),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Stack of linear layers with Mish between them (no activation on the output).
///
/// With `layer_norm`, every hidden pre-activation is standardized per row
/// (no learned gain or bias) before the Mish.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F: Real> {
    pub layers: Vec<Linear<F>>,
    pub layer_norm: bool,
}

/// Activations recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<F: Real> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
    /// Per-row inverse standard deviations, one entry per normalized layer.
    inv_std: Vec<Array1<F>>,
}

const LN_EPS: f64 = 1e-5;

/// Row-wise standardization; returns the inverse standard deviations.
fn normalize_rows<F: Real>(z: &mut Array2<F>) -> Array1<F> {
    let d = F::of(z.ncols() as f64);
    let mut inv = Array1::zeros(z.nrows());
    for (mut row, s) in z.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / d;
        *s = F::one() / (var + F::of(LN_EPS)).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    inv
}

/// Gradient through [`normalize_rows`], given its output `y`.
fn normalize_rows_backward<F: Real>(g: &mut Array2<F>, y: &Array2<F>, inv: &Array1<F>) {
    let d = F::of(g.ncols() as f64);
    for ((mut gr, yr), s) in g.rows_mut().into_iter().zip(y.rows()).zip(inv.iter()) {
        let mg = gr.sum() / d;
        let mgy = gr.iter().zip(yr.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b) / d;
        ndarray::Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| *gv = *s * (*gv - mg - yv * mgy));
    }
}

impl<F: Real> Mlp<F> {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            layer_norm: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            layer_norm: self.layer_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::fan_out).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::fan_out));
        d
    }

    /// Scale the output layer, e.g. to start a head close to zero.
    pub fn scale_output(&mut self, s: F) {
        if let Some(last) = self.layers.last_mut() {
            last.w.mapv_inplace(|v| v * s);
            last.b.mapv_inplace(|v| v * s);
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            if self.layer_norm {
                normalize_rows(&mut h);
            }
            h.mapv_inplace(mish);
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_tape(&self, x: Array2<F>) -> (Array2<F>, MlpTape<F>) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n.saturating_sub(1));
        let mut inv_std = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(h.view());
            inputs.push(h);
            if i + 1 < n {
                if self.layer_norm {
                    inv_std.push(normalize_rows(&mut z));
                }
                h = z.mapv(mish);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpTape { inputs, pre, inv_std })
    }

    /// Backpropagate `grad_out` through the recorded forward pass.
    ///
    /// Parameter gradients are accumulated into `grads` when given. The
    /// returned array is the gradient with respect to the network input.
    pub fn backward(
        &self,
        tape: &MlpTape<F>,
        grad_out: Array2<F>,
        mut grads: Option<&mut Mlp<F>>,
    ) -> Array2<F> {
        let mut g = grad_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if let Some(acc) = grads.as_deref_mut() {
                let gl = &mut acc.layers[i];
                ndarray::linalg::general_mat_mul(
                    F::one(),
                    &tape.inputs[i].t(),
                    &g,
                    F::one(),
                    &mut gl.w,
                );
                gl.b += &g.sum_axis(Axis(0));
            }
            let mut gx = g.dot(&layer.w.t());
            if i > 0 {
                ndarray::Zip::from(&mut gx)
                    .and(&tape.pre[i - 1])
                    .for_each(|gv, &z| *gv *= mish_grad(z));
                if self.layer_norm {
                    normalize_rows_backward(&mut gx, &tape.pre[i - 1], &tape.inv_std[i - 1]);
                }
            }
            g = gx;
        }
        g
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    w: l.w.mapv(|v| G::of(v.as_f64())),
                    b: l.b.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
            layer_norm: self.layer_norm,
        }
    }
}

impl<F: Real> Parameters<F> for Mlp<F> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors()
                    .into_iter()
                    .map(move |(n, s, d)| (format!("l{i}.{n}"), s, d))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Horizontal concatenation of row-aligned matrices.
pub fn hcat<F: Real>(parts: &[ArrayView2<F>]) -> Array2<F> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}
