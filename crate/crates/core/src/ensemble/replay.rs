//! Fixed-capacity ring replay buffer with uniform sampling.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::dp::Transition;

/// Ring buffer: once full, each push evicts the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: Vec<Transition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { buf: Vec::with_capacity(capacity.min(1 << 20)), capacity, head: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn push(&mut self, tr: Transition) {
        if self.buf.len() < self.capacity {
            self.buf.push(tr);
        } else {
            self.buf[self.head] = tr;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Uniform sample of `k` transitions (with replacement).
    pub fn sample(&self, rng: &mut ChaCha20Rng, k: usize) -> Vec<Transition> {
        assert!(!self.is_empty(), "cannot sample from an empty buffer");
        (0..k).map(|_| self.buf[rng.gen_range(0..self.buf.len())].clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }
}
