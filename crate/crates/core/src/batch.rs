use ndarray::{Array1, Array2};

use crate::buffers::Source;
use crate::nn::Real;

/// Row-aligned training batch over cached state features.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub emb: Array2<F>,
    pub prop: Array2<F>,
    pub action: Array2<F>,
    pub reward: Array1<F>,
    pub next_emb: Array2<F>,
    pub next_prop: Array2<F>,
    /// 1 for terminal transitions, else 0.
    pub done: Array1<F>,
    pub mc_return: Option<Array1<F>>,
    pub sources: Vec<Source>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.action.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of every field.
    pub fn select(&self, idx: &[usize]) -> Self {
        use ndarray::Axis;
        Self {
            emb: self.emb.select(Axis(0), idx),
            prop: self.prop.select(Axis(0), idx),
            action: self.action.select(Axis(0), idx),
            reward: self.reward.select(Axis(0), idx),
            next_emb: self.next_emb.select(Axis(0), idx),
            next_prop: self.next_prop.select(Axis(0), idx),
            done: self.done.select(Axis(0), idx),
            mc_return: self.mc_return.as_ref().map(|m| m.select(Axis(0), idx)),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::of(v.as_f64()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::of(v.as_f64()));
        Batch {
            emb: c2(&self.emb),
            prop: c2(&self.prop),
            action: c2(&self.action),
            reward: c1(&self.reward),
            next_emb: c2(&self.next_emb),
            next_prop: c2(&self.next_prop),
            done: c1(&self.done),
            mc_return: self.mc_return.as_ref().map(c1),
            sources: self.sources.clone(),
        }
    }
}
