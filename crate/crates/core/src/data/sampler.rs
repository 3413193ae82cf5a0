use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Index sets for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPair {
    pub step: u64,
    /// Buffer indices of the `B` labeled samples.
    pub labeled: Vec<usize>,
    /// Positions into the unlabeled pool of the `mu * B` unlabeled samples.
    pub unlabeled: Vec<usize>,
}

/// Endless reshuffled passes over `0..len`; pass `e` uses a permutation
/// drawn from `(seed, stream, e)`.
#[derive(Debug, Clone)]
struct Cycler {
    len: usize,
    seed: u64,
    stream: Stream,
    cached: Option<(u64, Vec<usize>)>,
}

impl Cycler {
    fn new(len: usize, seed: u64, stream: Stream) -> Self {
        Self {
            len,
            seed,
            stream,
            cached: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut stream_rng(self.seed, self.stream, epoch, 0));
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// Items at flat positions `start..start + count` of the endless sequence.
    fn take(&mut self, start: u64, count: usize) -> Vec<usize> {
        let len = self.len as u64;
        (start..start + count as u64)
            .map(|pos| self.permutation(pos / len)[(pos % len) as usize])
            .collect()
    }
}

/// Deterministic sampler: batch `s` depends only on `(seed, s)`, so a run
/// can resume at any step without stored sampler state.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled: Cycler,
    unlabeled: Cycler,
    batch_size: usize,
    mu: usize,
}

impl BatchSampler {
    pub fn new(num_labeled: usize, num_unlabeled: usize, batch_size: usize, mu: usize, seed: u64) -> Result<Self> {
        if num_labeled == 0 || num_unlabeled == 0 {
            return Err(Error::config("labeled and unlabeled sets must be nonempty"));
        }
        if batch_size == 0 || mu == 0 {
            return Err(Error::config("batch size and mu must be at least 1"));
        }
        Ok(Self {
            labeled: Cycler::new(num_labeled, seed, Stream::LabeledOrder),
            unlabeled: Cycler::new(num_unlabeled, seed, Stream::UnlabeledOrder),
            batch_size,
            mu,
        })
    }

    pub fn batch(&mut self, step: u64) -> BatchPair {
        let b = self.batch_size as u64;
        let ub = (self.mu * self.batch_size) as u64;
        BatchPair {
            step,
            labeled: self.labeled.take(step * b, self.batch_size),
            unlabeled: self.unlabeled.take(step * ub, ub as usize),
        }
    }

    /// Batches for steps `start..start + steps`.
    pub fn stream(self, start: u64, steps: u64) -> BatchStream {
        BatchStream {
            sampler: self,
            next: start,
            end: start + steps,
        }
    }
}

pub struct BatchStream {
    sampler: BatchSampler,
    next: u64,
    end: u64,
}

impl Iterator for BatchStream {
    type Item = BatchPair;

    fn next(&mut self) -> Option<BatchPair> {
        if self.next >= self.end {
            return None;
        }
        let batch = self.sampler.batch(self.next);
        self.next += 1;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.end - self.next) as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchStream {}

/// `steps` batch pairs starting at step 0.
pub fn sample_batches(
    num_labeled: usize,
    num_unlabeled: usize,
    batch_size: usize,
    mu: usize,
    seed: u64,
    steps: u64,
) -> Result<BatchStream> {
    Ok(BatchSampler::new(num_labeled, num_unlabeled, batch_size, mu, seed)?.stream(0, steps))
}
