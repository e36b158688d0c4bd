use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, RelationId, Sample, Split, Task, TaskSequence};
use crate::error::{Error, Result};

/// Per-relation train/valid/test fractions for corpora without split labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
        }
    }
}

impl SplitRatio {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.train)
            && (0.0..=1.0).contains(&self.valid)
            && self.train + self.valid <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid split ratio {self:?}")))
        }
    }

    /// Sizes of (train, valid) for `n` items; test takes the remainder.
    pub(crate) fn sizes(&self, n: usize) -> (usize, usize) {
        let train = ((n as f64) * self.train).round() as usize;
        let valid = (((n as f64) * self.valid).round() as usize).min(n - train.min(n));
        (train.min(n), valid)
    }
}

/// Randomly partitions relations into `num_tasks` groups, reproducibly by `seed`.
pub fn build_task_sequence(
    corpus: &Corpus,
    num_tasks: usize,
    seed: u64,
    ratio: SplitRatio,
) -> Result<TaskSequence> {
    let n_rel = corpus.vocab.len();
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be positive".into()));
    }
    if num_tasks > n_rel {
        return Err(Error::Config(format!(
            "cannot split {n_rel} relations into {num_tasks} tasks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<RelationId> = corpus.vocab.ids().collect();
    order.shuffle(&mut rng);

    let base = n_rel / num_tasks;
    let extra = n_rel % num_tasks;
    let mut groups = Vec::with_capacity(num_tasks);
    let mut offset = 0;
    for k in 0..num_tasks {
        let size = base + usize::from(k < extra);
        let mut group = order[offset..offset + size].to_vec();
        group.sort();
        groups.push(group);
        offset += size;
    }
    assemble(corpus, groups, &mut rng, ratio)
}

/// Builds a sequence from an explicit division (task index -> relation names).
pub fn build_task_sequence_from_division(
    corpus: &Corpus,
    division: &[Vec<String>],
    seed: u64,
    ratio: SplitRatio,
) -> Result<TaskSequence> {
    let mut groups = Vec::with_capacity(division.len());
    for (k, names) in division.iter().enumerate() {
        let group = names
            .iter()
            .map(|n| {
                corpus
                    .vocab
                    .get(n)
                    .ok_or_else(|| Error::Data(format!("task {k}: unknown relation `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    let covered: usize = groups.iter().map(Vec::len).sum();
    if covered != corpus.vocab.len() {
        return Err(Error::Data(format!(
            "task division covers {covered} relations, corpus has {}",
            corpus.vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble(corpus, groups, &mut rng, ratio)
}

fn assemble(
    corpus: &Corpus,
    groups: Vec<Vec<RelationId>>,
    rng: &mut ChaCha8Rng,
    ratio: SplitRatio,
) -> Result<TaskSequence> {
    ratio.validate()?;
    // relation -> (labelled samples by split, unlabelled samples)
    let mut by_relation: BTreeMap<RelationId, ([Vec<Sample>; 3], Vec<Sample>)> = BTreeMap::new();
    for (sample, split) in corpus.samples.iter().zip(&corpus.splits) {
        let entry = by_relation.entry(sample.relation).or_default();
        match split {
            Some(Split::Train) => entry.0[0].push(sample.clone()),
            Some(Split::Valid) => entry.0[1].push(sample.clone()),
            Some(Split::Test) => entry.0[2].push(sample.clone()),
            None => entry.1.push(sample.clone()),
        }
    }

    let mut tasks = Vec::with_capacity(groups.len());
    for (index, relations) in groups.into_iter().enumerate() {
        let mut task = Task {
            index,
            relations: relations.clone(),
            train: vec![],
            valid: vec![],
            test: vec![],
        };
        for r in &relations {
            let Some((labelled, mut unlabelled)) = by_relation.remove(r) else {
                continue;
            };
            let [train, valid, test] = labelled;
            task.train.extend(train);
            task.valid.extend(valid);
            task.test.extend(test);
            if !unlabelled.is_empty() {
                unlabelled.shuffle(rng);
                let (n_train, n_valid) = ratio.sizes(unlabelled.len());
                let rest = unlabelled.split_off(n_train);
                task.train.extend(unlabelled);
                let mut rest = rest;
                let test = rest.split_off(n_valid);
                task.valid.extend(rest);
                task.test.extend(test);
            }
        }
        tasks.push(task);
    }
    TaskSequence::new(tasks, corpus.vocab.clone())
}
