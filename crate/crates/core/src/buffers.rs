//! Demo buffer, replay buffer, return annotation and symmetric sampling.
//!
//! The demo buffer holds pre-collected demonstrations and, during online
//! training, every intervention step. The replay buffer holds autonomous
//! online steps only and evicts oldest-first once full.

use std::collections::VecDeque;
use std::sync::{RwLock, RwLockReadGuard};

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{Trajectory, Transition};

/// Stored items expose the transition that decides their routing.
pub trait Routed {
    fn transition(&self) -> &Transition;
}

impl Routed for Transition {
    fn transition(&self) -> &Transition {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Demo,
    Replay,
}

#[derive(Debug, Clone)]
pub struct DemoBuffer<T> {
    items: Vec<T>,
}

impl<T> Default for DemoBuffer<T> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<T: Routed> DemoBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, item: T) -> Result<()> {
        if item.transition().mc_return.is_none() {
            return Err(Error::MissingReturn {
                index: self.items.len(),
            });
        }
        self.items.push(item);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::Empty("demo buffer"));
        }
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

pub const DEFAULT_REPLAY_CAPACITY: usize = 200_000;

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
    appended: u64,
}

impl<T: Routed> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            appended: 0,
        }
    }

    pub fn append(&mut self, item: T) -> Result<()> {
        if item.transition().intervened {
            return Err(Error::Routing(
                "intervention transitions belong in the demo buffer".into(),
            ));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        self.appended += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total appends over the buffer's lifetime, including evicted items.
    pub fn appended(&self) -> u64 {
        self.appended
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay buffer"));
        }
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

/// Sets the discounted return-to-go on every transition. A truncated tail
/// bootstraps with zero.
pub fn annotate_returns(traj: &mut Trajectory, gamma: f64) -> Result<()> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut g = 0.0;
    for t in traj.transitions.iter_mut().rev() {
        g = t.r + gamma * g;
        t.mc_return = Some(g);
    }
    Ok(())
}

/// Half the batch from each buffer, demo half first.
pub fn symmetric_sample<'a, T: Routed, R: Rng + ?Sized>(
    demo: &'a DemoBuffer<T>,
    replay: &'a ReplayBuffer<T>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(Source, &'a T)>> {
    if !batch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "symmetric sampling needs an even batch size, got {batch_size}"
        )));
    }
    if replay.is_empty() {
        return Err(Error::Empty(
            "replay buffer; wait for the learner gate before sampling online batches",
        ));
    }
    if demo.is_empty() {
        return Err(Error::Empty("demo buffer"));
    }
    let half = batch_size / 2;
    let mut out = Vec::with_capacity(batch_size);
    out.extend(demo.sample(half, rng)?.into_iter().map(|t| (Source::Demo, t)));
    out.extend(replay.sample(half, rng)?.into_iter().map(|t| (Source::Replay, t)));
    Ok(out)
}

/// Both buffers behind locks so the interaction loop can append while the
/// learner samples. Locks are always taken demo-first.
#[derive(Debug)]
pub struct SharedBuffers<T> {
    demo: RwLock<DemoBuffer<T>>,
    replay: RwLock<ReplayBuffer<T>>,
}

impl<T: Routed> SharedBuffers<T> {
    pub fn new(demo: DemoBuffer<T>, replay: ReplayBuffer<T>) -> Self {
        Self {
            demo: RwLock::new(demo),
            replay: RwLock::new(replay),
        }
    }

    pub fn append_demo(&self, item: T) -> Result<()> {
        self.demo.write().expect("demo lock").append(item)
    }

    pub fn append_replay(&self, item: T) -> Result<()> {
        self.replay.write().expect("replay lock").append(item)
    }

    pub fn demo_len(&self) -> usize {
        self.demo.read().expect("demo lock").len()
    }

    pub fn replay_len(&self) -> usize {
        self.replay.read().expect("replay lock").len()
    }

    /// Read access to both buffers at one consistent point.
    pub fn read(&self) -> (RwLockReadGuard<'_, DemoBuffer<T>>, RwLockReadGuard<'_, ReplayBuffer<T>>) {
        let d = self.demo.read().expect("demo lock");
        let r = self.replay.read().expect("replay lock");
        (d, r)
    }

    pub fn into_inner(self) -> (DemoBuffer<T>, ReplayBuffer<T>) {
        (
            self.demo.into_inner().expect("demo lock"),
            self.replay.into_inner().expect("replay lock"),
        )
    }
}
