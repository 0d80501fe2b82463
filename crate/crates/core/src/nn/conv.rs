use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{mish, mish_grad, Parameters, Real};

/// Square strided 2-D convolution over HWC images, lowered to a matrix
/// product through an im2col buffer. Output is followed by Mish.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F: Real> {
    /// `(kernel*kernel*in_channels) x out_channels`, rows ordered (ky, kx, c).
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConvTape<F: Real> {
    cols: Array2<F>,
    pre: Array2<F>,
    in_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_in, out_channels), |_| {
                F::of(rng.random_range(-bound..bound))
            }),
            b: Array1::zeros(out_channels),
            kernel,
            stride,
            pad: kernel / 2,
            in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[F], h: usize, w: usize) -> Array2<F> {
        let (oh, ow) = self.out_hw(h, w);
        let (k, c) = (self.kernel, self.in_channels);
        let mut cols = Array2::zeros((oh * ow, k * k * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                let row = row.as_slice_mut().expect("contiguous row");
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    /// `x` is an HWC image flattened row-major. Returns the activated
    /// output, flattened HWC, and its spatial size.
    pub fn forward(&self, x: &[F], h: usize, w: usize) -> (Vec<F>, (usize, usize)) {
        let cols = self.im2col(x, h, w);
        let mut z = cols.dot(&self.w);
        z += &self.b;
        z.mapv_inplace(mish);
        (z.into_raw_vec_and_offset().0, self.out_hw(h, w))
    }

    pub fn forward_tape(&self, x: &[F], h: usize, w: usize) -> (Vec<F>, (usize, usize), ConvTape<F>) {
        let cols = self.im2col(x, h, w);
        let mut pre = cols.dot(&self.w);
        pre += &self.b;
        let out = pre.mapv(mish);
        let hw = self.out_hw(h, w);
        (
            out.into_raw_vec_and_offset().0,
            hw,
            ConvTape {
                cols,
                pre,
                in_hw: (h, w),
            },
        )
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        tape: &ConvTape<F>,
        grad_out: &[F],
        grads: &mut Conv2d<F>,
        need_input: bool,
    ) -> Option<Vec<F>> {
        let mut g = Array2::from_shape_vec(tape.pre.raw_dim(), grad_out.to_vec())
            .expect("gradient matches output shape");
        ndarray::Zip::from(&mut g)
            .and(&tape.pre)
            .for_each(|gv, &z| *gv *= mish_grad(z));
        ndarray::linalg::general_mat_mul(F::one(), &tape.cols.t(), &g, F::one(), &mut grads.w);
        grads.b += &g.sum_axis(Axis(0));
        if !need_input {
            return None;
        }
        let gcols = g.dot(&self.w.t());
        let (h, w) = tape.in_hw;
        let (oh, ow) = self.out_hw(h, w);
        let (k, c) = (self.kernel, self.in_channels);
        let mut gx = vec![F::zero(); h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = gcols.row(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let src = (ky * k + kx) * c;
                        for ch in 0..c {
                            gx[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
        Some(gx)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            ..*self
        }
    }
}

impl<F: Real> Parameters<F> for Conv2d<F> {
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
