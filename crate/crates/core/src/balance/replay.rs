use std::collections::VecDeque;

use rand::Rng;

/// One stored interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO pool with uniform sampling without replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
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

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Positions of a uniform sample of `batch` distinct entries, drawn by a
    /// partial Fisher–Yates shuffle of `0..len`. Empty until the buffer holds
    /// at least `warmup` entries, or when `batch` exceeds the size.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, warmup: usize, rng: &mut R) -> Vec<usize> {
        let n = self.items.len();
        if n < warmup || batch > n || batch == 0 {
            return Vec::new();
        }
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..batch {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(batch);
        idx
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, warmup: usize, rng: &mut R) -> Vec<Transition> {
        self.sample_indices(batch, warmup, rng).into_iter().map(|i| self.items[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        Transition { state: vec![i as f64], action: 0, reward: 0.0, next_state: vec![], done: false }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..4 {
            b.push(t(i));
        }
        let kept: Vec<f64> = b.iter().map(|x| x.state[0]).collect();
        assert_eq!(kept, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn distinct_indices_and_warmup_signal() {
        let mut b = ReplayBuffer::new(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..499 {
            b.push(t(i));
        }
        assert!(b.sample(64, 500, &mut rng).is_empty());
        b.push(t(499));
        let mut idx = b.sample_indices(64, 500, &mut rng);
        assert_eq!(idx.len(), 64);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 64);
    }
}
