use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment step, conditioned on the episode's skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub skill: Vec<f64>,
    pub intrinsic_reward: f64,
    /// True only for genuine terminations. Episodes cut by a time limit keep
    /// this false so the critic still bootstraps.
    pub done: bool,
}

/// Fixed-capacity FIFO store of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Contract("replay buffer capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
        })
    }

    /// Rebuilds a buffer from its oldest-first contents and lifetime
    /// insertion count.
    pub fn restore(capacity: usize, oldest_first: Vec<Transition>, inserted: u64) -> Result<Self> {
        let mut buf = Self::new(capacity)?;
        if oldest_first.len() > capacity || (oldest_first.len() as u64) > inserted {
            return Err(Error::Contract("replay contents exceed capacity or insertion count".into()));
        }
        if oldest_first.len() < capacity && inserted != oldest_first.len() as u64 {
            return Err(Error::Contract("a partly filled replay buffer cannot have evicted items".into()));
        }
        let mut items = oldest_first;
        if items.len() == capacity {
            items.rotate_right((inserted % capacity as u64) as usize);
        }
        buf.items = items;
        buf.inserted = inserted;
        Ok(buf)
    }

    pub fn push(&mut self, t: Transition) {
        let slot = (self.inserted % self.capacity as u64) as usize;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.inserted += 1;
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

    pub fn insertion_count(&self) -> u64 {
        self.inserted
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.is_empty() {
            return Err(Error::Contract("sampling an empty replay buffer".into()));
        }
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }

    /// Oldest-first view of the stored transitions.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Transition> {
        let start = if self.items.len() < self.capacity {
            0
        } else {
            (self.inserted % self.capacity as u64) as usize
        };
        self.items[start..].iter().chain(self.items[..start].iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: f64) -> Transition {
        Transition {
            state: vec![0.0],
            action: vec![0.0],
            next_state: vec![0.0],
            skill: vec![0.0],
            intrinsic_reward: r,
            done: false,
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(t(i as f64));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.insertion_count(), 5);
        let order: Vec<f64> = buf.iter_fifo().map(|x| x.intrinsic_reward).collect();
        assert_eq!(order, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn restore_matches_original_ring() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..7 {
            buf.push(t(i as f64));
        }
        let fifo: Vec<_> = buf.iter_fifo().cloned().collect();
        let mut back = ReplayBuffer::restore(3, fifo, 7).unwrap();
        back.push(t(7.0));
        buf.push(t(7.0));
        assert_eq!(back.items, buf.items);
        assert!(ReplayBuffer::restore(3, vec![t(0.0)], 5).is_err());
    }

    #[test]
    fn empty_sample_errors() {
        let buf = ReplayBuffer::new(2).unwrap();
        let mut rng = rand::rng();
        assert!(buf.sample(1, &mut rng).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }
}
