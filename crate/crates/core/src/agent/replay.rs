//! Fixed-capacity experience replay.

use rand::seq::index;
use rand::Rng;

use super::{Action, AgentError, Observation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_state: Observation,
    pub done: bool,
}

/// Ring buffer; once full, each push overwrites the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), head: 0 }
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.head };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>, AgentError> {
        if n > self.items.len() {
            return Err(AgentError::InsufficientExperience { available: self.items.len(), requested: n });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|i| self.items[i]).collect())
    }
}
