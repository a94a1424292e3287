use rand::Rng;

use super::NnError;
use crate::SimRng;

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory<T> {
    capacity: usize,
    items: Vec<T>,
    cursor: usize,
}

impl<T> ReplayMemory<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
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

    /// Overwrites the oldest transition once full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &T> {
        self.items[self.cursor..].iter().chain(&self.items[..self.cursor])
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, batch: usize, rng: &mut SimRng) -> Result<Vec<&T>, NnError> {
        if self.items.is_empty() {
            return Err(NnError::EmptyReplay);
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}
