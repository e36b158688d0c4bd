//! Domain types, corpus ingestion and task-sequence construction.

mod ingest;
mod sequence;
mod synthetic;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{ingest_corpus, read_task_division, CorpusFormat, IngestOptions};
pub use sequence::{build_task_sequence, build_task_sequence_from_division, SplitRatio};
pub use synthetic::{generate_synthetic_sequence, SyntheticCorpus, SyntheticSpec};

/// Dense relation identifier. Stable for the lifetime of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Relation names by id. Serialized as the list of names in id order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, RelationId>,
}

impl TryFrom<Vec<String>> for RelationVocab {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::from_names(names)
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Self {
        v.names
    }
}

impl RelationVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Result<Self> {
        let mut vocab = Self::new();
        for name in names {
            if vocab.get(&name).is_some() {
                return Err(Error::Data(format!("duplicate relation name `{name}`")));
            }
            vocab.intern(&name);
        }
        Ok(vocab)
    }

    /// Returns the id for `name`, assigning the next dense id if unseen.
    pub fn intern(&mut self, name: &str) -> RelationId {
        if let Some(id) = self.get(name) {
            return id;
        }
        let id = RelationId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<RelationId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: RelationId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.names.len()).map(|i| RelationId(i as u32))
    }
}

/// Token span, inclusive start and exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// How a sample came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    EntityReplaced,
    Concatenated,
    ReplacedAndConcatenated,
}

/// A tokenized sentence with marked head/tail entities and a relation label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub relation: RelationId,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        head: Span,
        tail: Span,
        relation: RelationId,
    ) -> Result<Self> {
        let sample = Self {
            id: id.into(),
            tokens,
            head,
            tail,
            relation,
            provenance: Provenance::Original,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Checks the span invariants.
    pub fn validate(&self) -> Result<()> {
        for (field, span) in [("h", self.head), ("t", self.tail)] {
            if span.is_empty() {
                return Err(Error::record(&self.id, field, "empty span"));
            }
            if span.end > self.tokens.len() {
                return Err(Error::record(
                    &self.id,
                    field,
                    format!("span {:?} exceeds {} tokens", <[usize; 2]>::from(span), self.tokens.len()),
                ));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err(Error::record(&self.id, "h/t", "head and tail spans overlap"));
        }
        Ok(())
    }

    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }

    pub fn head_tokens(&self) -> &[String] {
        &self.tokens[self.head.start..self.head.end]
    }

    pub fn tail_tokens(&self) -> &[String] {
        &self.tokens[self.tail.start..self.tail.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Validated samples plus the relation vocabulary they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    /// Split label carried by each sample in the source file, if any.
    pub splits: Vec<Option<Split>>,
    pub vocab: RelationVocab,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One continual-learning task: a relation set and its data splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    pub relations: Vec<RelationId>,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Task {
    pub fn train_of(&self, relation: RelationId) -> Vec<&Sample> {
        self.train.iter().filter(|s| s.relation == relation).collect()
    }
}

/// Ordered tasks with pairwise disjoint relation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    tasks: Vec<Task>,
    vocab: RelationVocab,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Task>, vocab: RelationVocab) -> Result<Self> {
        let mut owner: HashMap<RelationId, usize> = HashMap::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.index != i {
                return Err(Error::Data(format!("task at position {i} has index {}", task.index)));
            }
            if task.relations.is_empty() {
                return Err(Error::Data(format!("task {i} has no relations")));
            }
            for r in &task.relations {
                if r.index() >= vocab.len() {
                    return Err(Error::Data(format!("task {i} references unknown relation {r}")));
                }
                if let Some(prev) = owner.insert(*r, i) {
                    return Err(Error::Data(format!(
                        "relation `{}` appears in tasks {prev} and {i}",
                        vocab.name(*r)
                    )));
                }
            }
            for s in task.train.iter().chain(&task.valid).chain(&task.test) {
                if !task.relations.contains(&s.relation) {
                    return Err(Error::Data(format!(
                        "sample {} of task {i} has relation outside the task",
                        s.id
                    )));
                }
            }
        }
        Ok(Self { tasks, vocab })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, k: usize) -> &Task {
        &self.tasks[k]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn vocab(&self) -> &RelationVocab {
        &self.vocab
    }

    /// Index of the task that introduces `relation`.
    pub fn task_of(&self, relation: RelationId) -> Option<usize> {
        self.tasks.iter().position(|t| t.relations.contains(&relation))
    }

    /// Relations of tasks `0..=k`, in introduction order.
    pub fn seen_relations(&self, k: usize) -> Vec<RelationId> {
        self.tasks[..=k].iter().flat_map(|t| t.relations.iter().copied()).collect()
    }

    /// Every sample of every split, for vocabulary construction.
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.valid).chain(&t.test))
    }

    /// Looks up an original sample by id across all tasks.
    pub fn find_sample(&self, id: &str) -> Option<&Sample> {
        self.all_samples().find(|s| s.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let seq: TaskSequence = serde_json::from_str(text)?;
        let TaskSequence { tasks, vocab } = seq;
        TaskSequence::new(tasks, vocab)
    }
}
