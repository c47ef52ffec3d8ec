//! FIFO queue of teacher embedding maps used by the inter-image losses.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};
use crate::tensor::{EmbeddingMap, LabelMask};

pub const DEFAULT_CAPACITY: usize = 32;
pub const DEFAULT_SAMPLE: usize = 12;

/// A teacher prediction together with the mask of the image it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub embedding: EmbeddingMap,
    pub mask: LabelMask,
    pub iteration: u64,
}

impl BankEntry {
    pub fn new(embedding: EmbeddingMap, mask: LabelMask, iteration: u64) -> Result<Self> {
        if embedding.height() != mask.height() || embedding.width() != mask.width() {
            return contract_err("bank entry embedding and mask differ in size");
        }
        Ok(Self { embedding, mask, iteration })
    }

    pub fn as_pair(&self) -> (&EmbeddingMap, &LabelMask) {
        (&self.embedding, &self.mask)
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    rng: ChaCha8Rng,
}

impl MemoryBank {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return contract_err("memory bank capacity must be positive");
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
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

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn get(&self, index: usize) -> Option<&BankEntry> {
        self.entries.get(index)
    }

    /// Appends `batch` in order, evicting the oldest entries beyond capacity.
    /// Rejects the whole batch if any entry's shape differs from the bank's.
    pub fn enqueue(&mut self, batch: Vec<BankEntry>) -> Result<()> {
        if batch.is_empty() {
            return contract_err("enqueue of an empty batch");
        }
        let reference = self
            .entries
            .front()
            .or(batch.first())
            .map(|e| e.embedding.dims())
            .unwrap();
        if batch.iter().any(|e| e.embedding.dims() != reference) {
            return contract_err("bank entry shape differs from existing entries");
        }
        for entry in batch {
            self.entries.push_back(entry);
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Draws `min(count, len)` distinct positions uniformly without
    /// replacement, in draw order. Empty bank gives an empty list.
    pub fn sample_indices(&mut self, count: usize) -> Vec<usize> {
        let amount = count.min(self.entries.len());
        if amount == 0 {
            return Vec::new();
        }
        rand::seq::index::sample(&mut self.rng, self.entries.len(), amount).into_vec()
    }

    pub fn sample(&mut self, count: usize) -> Vec<&BankEntry> {
        let picks = self.sample_indices(count);
        picks.into_iter().map(|i| &self.entries[i]).collect()
    }
}
