//! Synthetic sequence-to-sequence tasks.
//!
//! Tokens `0..4` are reserved (pad, bos, eos, unk) and never generated;
//! content tokens are `4..V`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const RESERVED_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    /// Position-wise substitution through a fixed seeded permutation.
    Cipher,
    /// Remove adjacent duplicates; targets are shorter than sources.
    Dedup,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Cipher => "cipher",
            Task::Dedup => "dedup",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "cipher" => Ok(Task::Cipher),
            "dedup" => Ok(Task::Dedup),
            other => Err(Error::config(format!("unknown task `{other}` (expected copy, reverse, cipher or dedup)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// A permutation of `0..V` fixing the reserved tokens.
pub fn cipher_permutation(vocab: usize, seed: u64) -> Vec<usize> {
    let mut content: Vec<usize> = (RESERVED_TOKENS..vocab).collect();
    content.shuffle(&mut rng::stream(seed, Purpose::Cipher, &[vocab as u64]));
    (0..RESERVED_TOKENS.min(vocab)).chain(content).collect()
}

/// The target of `source` under `task`.
pub fn apply_task(task: Task, source: &[usize], permutation: &[usize]) -> Vec<usize> {
    match task {
        Task::Copy => source.to_vec(),
        Task::Reverse => source.iter().rev().copied().collect(),
        Task::Cipher => source.iter().map(|&t| permutation[t]).collect(),
        Task::Dedup => {
            let mut out: Vec<usize> = Vec::with_capacity(source.len());
            for &t in source {
                if out.last() != Some(&t) {
                    out.push(t);
                }
            }
            out
        }
    }
}

/// Draws source/target pairs for one task.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    pub task: Task,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    permutation: Vec<usize>,
}

impl TaskSampler {
    pub fn new(task: Task, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if vocab < 8 {
            return Err(Error::config(format!("tasks need V ≥ 8 (4 reserved tokens), got {vocab}")));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::config(format!("invalid length range [{min_len}, {max_len}]")));
        }
        Ok(TaskSampler { task, vocab, min_len, max_len, permutation: cipher_permutation(vocab, seed) })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn target(&self, source: &[usize]) -> Vec<usize> {
        apply_task(self.task, source, &self.permutation)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Pair {
        let n = rng.random_range(self.min_len..=self.max_len);
        let content = RESERVED_TOKENS..self.vocab;
        let mut source = Vec::with_capacity(n);
        for i in 0..n {
            // dedup sources repeat the previous token half of the time
            let tok = if self.task == Task::Dedup && i > 0 && rng.random_bool(0.5) {
                source[i - 1]
            } else {
                rng.random_range(content.clone())
            };
            source.push(tok);
        }
        let target = self.target(&source);
        Pair { source, target }
    }

    /// Batch number `index` of the stream keyed by `seed`.
    pub fn batch(&self, size: usize, seed: u64, index: u64) -> Vec<Pair> {
        let mut rng = rng::stream(seed, Purpose::Batch, &[index]);
        (0..size).map(|_| self.sample(&mut rng)).collect()
    }

    /// A held-out set drawn from a stream disjoint from training batches.
    pub fn validation(&self, size: usize, seed: u64) -> Vec<Pair> {
        let mut rng = rng::stream(seed, Purpose::Validation, &[size as u64]);
        (0..size).map(|_| self.sample(&mut rng)).collect()
    }
}

/// One batch of `size` pairs with source lengths in `lengths`.
pub fn make_batch(task: Task, vocab: usize, lengths: (usize, usize), size: usize, seed: u64) -> Result<Vec<Pair>> {
    Ok(TaskSampler::new(task, vocab, lengths.0, lengths.1, seed)?.batch(size, seed, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_rules() {
        let id: Vec<usize> = (0..16).collect();
        assert_eq!(apply_task(Task::Copy, &[5, 9, 3], &id), vec![5, 9, 3]);
        assert_eq!(apply_task(Task::Reverse, &[5, 9, 3], &id), vec![3, 9, 5]);
        assert_eq!(apply_task(Task::Dedup, &[4, 4, 7, 7, 7, 2], &id), vec![4, 7, 2]);
        assert_eq!(apply_task(Task::Cipher, &[5, 9, 3], &id), apply_task(Task::Copy, &[5, 9, 3], &id));
    }

    #[test]
    fn permutation_fixes_specials() {
        let p = cipher_permutation(64, 3);
        assert_eq!(&p[..4], &[0, 1, 2, 3]);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        assert_ne!(p, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_deterministic_and_in_range() {
        for task in [Task::Copy, Task::Reverse, Task::Cipher, Task::Dedup] {
            let a = make_batch(task, 32, (4, 16), 50, 9).unwrap();
            assert_eq!(a, make_batch(task, 32, (4, 16), 50, 9).unwrap());
            for pair in &a {
                assert!((4..=16).contains(&pair.source.len()));
                assert!(pair.source.iter().all(|&t| (4..32).contains(&t)));
                assert!(!pair.target.is_empty() && pair.target.len() <= pair.source.len());
            }
        }
        let dedup = make_batch(Task::Dedup, 32, (4, 16), 50, 9).unwrap();
        assert!(dedup.iter().any(|p| p.target.len() < p.source.len()));
        assert!(make_batch(Task::Copy, 7, (4, 16), 1, 0).is_err());
    }
}
