use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Epoch-wise shuffled index stream over one domain.
///
/// The permutation of epoch `e` is a pure function of `(seed, e)`, so the
/// whole state is `(epoch, cursor)` and checkpoints can restore it exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSampler {
    pub seed: u64,
    pub len: usize,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

/// Equality ignores the cached permutation, which is derived state.
impl PartialEq for DomainSampler {
    fn eq(&self, other: &Self) -> bool {
        (self.seed, self.len, self.epoch, self.cursor) == (other.seed, other.len, other.epoch, other.cursor)
    }
}

impl Eq for DomainSampler {}

impl DomainSampler {
    pub fn new(seed: u64, len: usize) -> Self {
        DomainSampler {
            seed,
            len,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        }
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Next `k` indices, rolling into a freshly shuffled epoch as needed.
    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && self.len > 0 {
            if self.order.len() != self.len {
                self.order = self.permutation(self.epoch);
            }
            if self.cursor == self.len {
                self.epoch += 1;
                self.cursor = 0;
                self.order = self.permutation(self.epoch);
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
