//! Reference queue model for the memory bank.

use std::collections::{BTreeSet, VecDeque};

use grd::memory_bank::{BankEntry, MemoryBank};
use grd::{EmbeddingMap, LabelMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn entry(tag: u64) -> BankEntry {
    let map = EmbeddingMap::constant(&[tag as f64, 1.0], 2, 2).unwrap();
    BankEntry::new(map, LabelMask::new(2, 2, vec![1; 4]).unwrap(), tag).unwrap()
}

/// Runs `steps` random enqueue/sample steps against a plain queue model and
/// returns the trace of sampled tags.
pub fn simulate(steps: usize, capacity: usize, seed: u64) -> Result<Vec<Vec<u64>>, String> {
    let mut bank = MemoryBank::new(capacity, seed).unwrap();
    let mut model: VecDeque<u64> = VecDeque::new();
    let mut driver = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let mut next = 0u64;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = driver.random_range(1..=3);
        let tags: Vec<u64> = (next..next + batch).collect();
        next += batch;
        bank.enqueue(tags.iter().map(|&t| entry(t)).collect()).map_err(|e| e.to_string())?;
        for t in tags {
            model.push_back(t);
            if model.len() > capacity {
                model.pop_front();
            }
        }
        let held: Vec<u64> = bank.entries().map(|e| e.iteration).collect();
        if held != model.iter().copied().collect::<Vec<_>>() {
            return Err(format!("step {step}: bank {held:?} vs queue {model:?}"));
        }
        if bank.len() > capacity {
            return Err(format!("step {step}: {} entries over capacity {capacity}", bank.len()));
        }
        let want = driver.random_range(0..=capacity + 2);
        let drawn: Vec<u64> = bank.sample(want).into_iter().map(|e| e.iteration).collect();
        let distinct: BTreeSet<u64> = drawn.iter().copied().collect();
        if drawn.len() != want.min(model.len()) || distinct.len() != drawn.len() {
            return Err(format!("step {step}: bad sample {drawn:?} for L={want}"));
        }
        if !drawn.iter().all(|t| model.contains(t)) {
            return Err(format!("step {step}: sampled an evicted entry"));
        }
        trace.push(drawn);
    }
    Ok(trace)
}
