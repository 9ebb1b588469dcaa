use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless shuffled batches over an index pool. The pool is reshuffled each
/// time it is exhausted; a batch may straddle two passes, so every batch has
/// exactly `batch_size` indices.
#[derive(Debug, Clone)]
pub struct CyclingLoader {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl CyclingLoader {
    pub fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("loader index pool".into()));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(Self {
            order: Vec::new(),
            pool,
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        self.drawn += out.len();
        out
    }

    /// Total indices handed out so far.
    pub fn drawn(&self) -> usize {
        self.drawn
    }
}
