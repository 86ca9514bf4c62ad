use std::collections::VecDeque;

use rand::Rng;

/// Fixed-capacity FIFO ring with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
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

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` items drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overflow_evicts_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..4 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        assert!(!b.iter().any(|x| *x == 0));
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_sample_is_empty() {
        let b: ReplayBuffer<u8> = ReplayBuffer::new(2);
        assert!(b.sample(4, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    proptest::proptest! {
        #[test]
        fn ring_keeps_last_capacity_items(cap in 1usize..20, n in 0usize..60) {
            let mut b = ReplayBuffer::new(cap);
            for i in 0..n {
                b.push(i);
            }
            let kept: Vec<usize> = b.iter().copied().collect();
            let expected: Vec<usize> = (n.saturating_sub(cap)..n).collect();
            proptest::prop_assert_eq!(kept, expected);
        }
    }
}
