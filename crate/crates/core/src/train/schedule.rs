//! Deterministic epoch batching: labeled and unlabeled samples shuffled
//! together uniformly, with a per-batch mask marking the labeled rows.

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SHUFFLE};
use rand::seq::SliceRandom;

/// A fixed batching plan over one dataset.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    labeled: Vec<bool>,
    batch_size: usize,
    seed: u64,
}

/// Row indices into the dataset plus the labeled flag per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
}

impl BatchSchedule {
    /// `labeled[i]` marks whether sample `i` carries a usable label.
    pub fn new(labeled: Vec<bool>, batch_size: usize, seed: u64) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::invalid("cannot schedule batches over an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(BatchSchedule {
            labeled,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        false // rejected at construction
    }
}

/// The ordered batch list for one epoch: a fresh uniform shuffle per
/// epoch (derived from seed and epoch number), cut into consecutive
/// batches; the final batch may be short. Every sample appears exactly
/// once per epoch.
pub fn make_batches(schedule: &BatchSchedule, epoch: u64) -> Vec<Batch> {
    let n = schedule.labeled.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(schedule.seed, epoch), STREAM_SHUFFLE);
    order.shuffle(&mut r);
    order
        .chunks(schedule.batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            mask: chunk.iter().map(|&i| schedule.labeled[i]).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_labeled_gives_all_true_masks() {
        let s = BatchSchedule::new(vec![true; 10], 4, 1).unwrap();
        let batches = make_batches(&s, 0);
        assert_eq!(batches.len(), 3); // 4 + 4 + 2
        assert!(batches.iter().all(|b| b.mask.iter().all(|&m| m)));
        assert_eq!(batches[2].indices.len(), 2);
    }

    #[test]
    fn zero_labeled_gives_all_false_masks() {
        let s = BatchSchedule::new(vec![false; 10], 5, 1).unwrap();
        let batches = make_batches(&s, 3);
        assert!(batches.iter().all(|b| b.mask.iter().all(|&m| !m)));
    }

    #[test]
    fn every_sample_appears_exactly_once() {
        let mut labeled = vec![false; 1000];
        for flag in labeled.iter_mut().take(100) {
            *flag = true;
        }
        let s = BatchSchedule::new(labeled, 50, 7).unwrap();
        let batches = make_batches(&s, 2);
        assert_eq!(batches.len(), 20);
        let mut seen = vec![0usize; 1000];
        let mut labeled_count = 0;
        for b in &batches {
            assert_eq!(b.indices.len(), 50);
            for (&i, &m) in b.indices.iter().zip(&b.mask) {
                seen[i] += 1;
                assert_eq!(m, i < 100);
                labeled_count += m as usize;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(labeled_count, 100);
    }

    #[test]
    fn labeled_rows_spread_across_batches() {
        // 100 labeled in 1000 shuffled uniformly: expect ~5 per batch of
        // 50; seeing every labeled row inside three batches would mean the
        // shuffle is broken
        let mut labeled = vec![false; 1000];
        for flag in labeled.iter_mut().take(100) {
            *flag = true;
        }
        let s = BatchSchedule::new(labeled, 50, 11).unwrap();
        let batches = make_batches(&s, 0);
        let occupied = batches
            .iter()
            .filter(|b| b.mask.iter().any(|&m| m))
            .count();
        assert!(occupied >= 15, "labeled rows packed into {occupied} batches");
    }

    #[test]
    fn same_epoch_same_batches_different_epoch_different() {
        let s = BatchSchedule::new(vec![true; 64], 8, 5).unwrap();
        assert_eq!(make_batches(&s, 4), make_batches(&s, 4));
        assert_ne!(make_batches(&s, 4), make_batches(&s, 5));
    }

    #[test]
    fn empty_dataset_or_zero_batch_rejected() {
        assert!(BatchSchedule::new(vec![], 4, 0).is_err());
        assert!(BatchSchedule::new(vec![true], 0, 0).is_err());
    }
}
