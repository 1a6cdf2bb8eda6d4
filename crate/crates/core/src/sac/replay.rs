//! FIFO replay buffer with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// One transition. Contexts are the raw encoder inputs, so the instruction
/// embedding travels inside them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTransition {
    pub context: Vec<f64>,
    pub next_context: Vec<f64>,
    pub residual: Vec<f64>,
    pub base_action: Vec<f64>,
    pub next_base_action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ReplayTransition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayTransition> {
        self.items.get(i)
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: ReplayTransition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn is_ready(&self, batch_size: usize) -> bool {
        self.items.len() >= batch_size
    }

    /// Uniform with replacement; `None` while fewer than `batch_size` items are held.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Option<Vec<ReplayTransition>> {
        self.sample_indices(batch_size, rng)
            .map(|idx| idx.into_iter().map(|i| self.items[i].clone()).collect())
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
        if batch_size == 0 || !self.is_ready(batch_size) {
            return None;
        }
        Some((0..batch_size).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}
