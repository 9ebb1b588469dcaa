use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random partition of `0..n` into `k` parts whose sizes differ by at most 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub k: usize,
    /// `assignment[i]` is the part of sample `i`.
    pub assignment: Vec<usize>,
}

impl StreamPlan {
    /// Sample indices of each part, ascending.
    pub fn parts(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.k];
        for (i, &p) in self.assignment.iter().enumerate() {
            parts[p].push(i);
        }
        parts
    }

    /// Part trained on during epoch `epoch` (0-based); wraps after `k` epochs.
    pub fn part_for_epoch(&self, epoch: usize) -> Vec<usize> {
        let p = epoch % self.k;
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == p)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn split_stream(n: usize, k: usize, seed: u64) -> Result<StreamPlan> {
    if k == 0 {
        return Err(Error::config("stream_parts", "must be >= 1"));
    }
    if k > n {
        return Err(Error::InsufficientSamples { needed: k, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(StreamPlan { k, assignment })
}
