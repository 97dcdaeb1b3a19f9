use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// Bounded FIFO store sampled uniformly.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: VecDeque<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn store(&mut self, entry: T) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<T> {
        if self.entries.is_empty() {
            return Err(Error::EmptyReplay);
        }
        Ok(self.entries[rng.gen_range(0..self.entries.len())].clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(1);
        b.store(1);
        b.store(2);
        assert_eq!(b.len(), 1);
        assert_eq!(b.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 2);
    }

    #[test]
    fn occupancy_and_empty() {
        let mut b: ReplayBuffer<u8> = ReplayBuffer::new(5);
        assert!(matches!(b.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyReplay)));
        for i in 0..3 {
            b.store(i);
        }
        assert_eq!(b.len(), 3);
    }
}
