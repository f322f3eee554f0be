//! Synthetic sequence-classification tasks with closed-form labels.
//!
//! * parity: label = (number of occurrences of token 1) mod 2
//! * majority: each token belongs to class `token mod num_classes`; the label is
//!   the most frequent class (sequences with a tied maximum are never emitted)
//! * pattern-match: label = 1 iff the motif `1 2 3` occurs contiguously
//!
//! Labels are drawn first (cycling through the classes) and token sequences are
//! rejection-sampled until they carry that label, so every split is balanced to
//! within one sample per class. No sequence appears twice across train and eval.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_rng, SeededRng};

pub const MOTIF: [u32; 3] = [1, 2, 3];

/// Rejection-sampling budget per requested sample.
const MAX_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Parity,
    Majority,
    PatternMatch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Parity, TaskKind::Majority, TaskKind::PatternMatch];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::Majority => "majority",
            TaskKind::PatternMatch => "pattern-match",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Parity,
            vocab_size: 32,
            seq_len: 32,
            num_classes: 2,
            train_size: 2048,
            eval_size: 1024,
            seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.eval_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "train_size, eval_size and seq_len must be at least 1".into(),
            ));
        }
        let need_binary = |what: &str| {
            if self.num_classes != 2 {
                Err(Error::Config(format!(
                    "{what} is a two-class task, num_classes is {}",
                    self.num_classes
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            TaskKind::Parity => {
                need_binary("parity")?;
                if self.vocab_size < 2 {
                    return Err(Error::Config("parity needs a vocabulary of at least 2 tokens".into()));
                }
            }
            TaskKind::Majority => {
                if self.num_classes < 2 || self.vocab_size < self.num_classes {
                    return Err(Error::Config(format!(
                        "majority needs 2 <= num_classes <= vocab_size, got {} classes over {} tokens",
                        self.num_classes, self.vocab_size
                    )));
                }
            }
            TaskKind::PatternMatch => {
                need_binary("pattern-match")?;
                if self.vocab_size < 4 || self.seq_len < MOTIF.len() {
                    return Err(Error::Config(
                        "pattern-match needs vocab_size >= 4 and seq_len >= 3".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The closed-form labelling rule; `None` for sequences the task never emits
/// (majority ties).
pub fn label_of(kind: TaskKind, tokens: &[u32], num_classes: usize) -> Option<usize> {
    match kind {
        TaskKind::Parity => Some(tokens.iter().filter(|&&t| t == 1).count() % 2),
        TaskKind::Majority => {
            let mut counts = vec![0usize; num_classes];
            for &t in tokens {
                counts[t as usize % num_classes] += 1;
            }
            let max = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
            let (label, _) = winners.next()?;
            winners.next().is_none().then_some(label)
        }
        TaskKind::PatternMatch => Some(usize::from(contains_motif(tokens))),
    }
}

fn contains_motif(tokens: &[u32]) -> bool {
    tokens.windows(MOTIF.len()).any(|w| w == MOTIF)
}

/// Row-major token sequences with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// The samples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
        }
        Batch {
            tokens,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            seq_len: self.seq_len,
        }
    }

    /// One line per sample: the label, a tab, then space-separated token ids.
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        for i in 0..self.len() {
            let toks: Vec<String> = self.sequence(i).iter().map(u32::to_string).collect();
            writeln!(w, "{}\t{}", self.labels[i], toks.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Train and eval splits for `spec`; identical specs give identical datasets.
pub fn generate(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = seeded_rng(derive_seed(spec.seed, 0xDA7A));
    let mut seen = HashSet::new();
    let train = draw_split(spec, spec.train_size, &mut rng, &mut seen)?;
    let eval = draw_split(spec, spec.eval_size, &mut rng, &mut seen)?;
    Ok((train, eval))
}

fn draw_split(spec: &TaskSpec, n: usize, rng: &mut SeededRng, seen: &mut HashSet<Vec<u32>>) -> Result<Dataset> {
    let mut tokens = Vec::with_capacity(n * spec.seq_len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let target = i % spec.num_classes;
        let seq = draw_with_label(spec, target, rng, seen)?;
        tokens.extend_from_slice(&seq);
        labels.push(target);
        seen.insert(seq);
    }
    Ok(Dataset {
        tokens,
        labels,
        seq_len: spec.seq_len,
        num_classes: spec.num_classes,
    })
}

fn draw_with_label(spec: &TaskSpec, target: usize, rng: &mut SeededRng, seen: &HashSet<Vec<u32>>) -> Result<Vec<u32>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut seq: Vec<u32> = (0..spec.seq_len)
            .map(|_| rng.gen_range(0..spec.vocab_size as u32))
            .collect();
        if spec.kind == TaskKind::PatternMatch && target == 1 {
            let at = rng.gen_range(0..=spec.seq_len - MOTIF.len());
            seq[at..at + MOTIF.len()].copy_from_slice(&MOTIF);
        }
        if label_of(spec.kind, &seq, spec.num_classes) == Some(target) && !seen.contains(&seq) {
            return Ok(seq);
        }
    }
    Err(Error::Data(format!(
        "could not draw a fresh {} sequence with label {target}; the sequence space is too small",
        spec.kind
    )))
}

/// Shuffled fixed-size batches, reshuffled every epoch; the trailing partial batch is dropped.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || data.len() < batch_size {
            return Err(Error::Data(format!(
                "dataset of {} samples cannot fill a batch of {batch_size}",
                data.len()
            )));
        }
        let mut s = BatchStream {
            data,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch_size
    }

    fn reshuffle(&mut self) {
        self.order = epoch_order(self.data.len(), self.seed, self.epoch);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        self.data.batch(idx)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, epoch)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_by_hand() {
        assert_eq!(label_of(TaskKind::Parity, &[1, 1, 0, 1], 2), Some(1));
        assert_eq!(label_of(TaskKind::Majority, &[0, 0, 1], 2), Some(0));
        assert_eq!(label_of(TaskKind::Majority, &[0, 1], 2), None);
        assert_eq!(label_of(TaskKind::PatternMatch, &[0, 1, 2, 3, 0], 2), Some(1));
        assert_eq!(label_of(TaskKind::PatternMatch, &[1, 2, 0, 3], 2), Some(0));
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let spec = TaskSpec {
            kind: TaskKind::PatternMatch,
            vocab_size: 3,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn exhausted_space_is_a_data_error() {
        let spec = TaskSpec {
            vocab_size: 2,
            seq_len: 2,
            train_size: 10,
            eval_size: 1,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Data(_))));
    }

    #[test]
    fn three_batches_from_a_hundred() {
        let spec = TaskSpec {
            train_size: 100,
            eval_size: 10,
            ..TaskSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        assert_eq!(BatchStream::new(&train, 32, 1).unwrap().batches_per_epoch(), 3);
        assert!(BatchStream::new(&train, 101, 1).is_err());
    }
}
