use super::{Parameters, Real};

/// Adaptive moment estimation with optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step<P: Parameters<F>>(&mut self, params: &mut P, grads: &P) -> f64 {
        let g: Vec<&[F]> = grads.tensors().into_iter().map(|(_, _, d)| d).collect();
        let norm = g
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![F::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = F::of(self.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (ob1, ob2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let eps = F::of(self.eps * bc2.sqrt());
        let scale = F::of(scale);

        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, gk) = (&mut self.m[k], &mut self.v[k], g[k]);
            for i in 0..p.len() {
                let gi = gk[i] * scale;
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
        norm
    }
}
