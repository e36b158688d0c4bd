//! Typical-sample memory, relation prototypes and memory augmentation.

mod augment;
pub mod kmeans;

use std::collections::BTreeMap;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RelationId, Sample, TaskSequence};
use crate::encoder::{EncoderState, Representation};
use crate::error::{Error, Result};
use crate::tensor;

pub use augment::{augment, concatenate, replace_entities};

/// A stored typical sample. Only original (non-augmented) samples can become exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Sample", into = "Sample")]
pub struct Exemplar(Sample);

impl Exemplar {
    pub fn new(sample: Sample) -> Result<Self> {
        if !sample.is_original() {
            return Err(Error::State(format!(
                "sample {} is augmented ({:?}) and cannot be stored in memory",
                sample.id, sample.provenance
            )));
        }
        Ok(Self(sample))
    }

    pub fn sample(&self) -> &Sample {
        &self.0
    }
}

impl Deref for Exemplar {
    type Target = Sample;
    fn deref(&self) -> &Sample {
        &self.0
    }
}

impl TryFrom<Sample> for Exemplar {
    type Error = Error;
    fn try_from(s: Sample) -> Result<Self> {
        Self::new(s)
    }
}

impl From<Exemplar> for Sample {
    fn from(e: Exemplar) -> Sample {
        e.0
    }
}

/// Chooses up to `m` typical samples of one relation.
///
/// Runs k-means with `k = min(m, n)` over current representations and keeps,
/// per cluster, the sample closest to the centroid.
pub fn select_typical(encoder: &EncoderState, samples: &[&Sample], m: usize, seed: u64) -> Result<Vec<Exemplar>> {
    let Some(first) = samples.first() else {
        return Err(Error::Data("cannot select exemplars from an empty sample set".into()));
    };
    if m == 0 {
        return Err(Error::Config("memory size must be at least 1".into()));
    }
    for s in samples {
        if !s.is_original() {
            return Err(Error::State(format!("selection received augmented sample {}", s.id)));
        }
        if s.relation != first.relation {
            return Err(Error::Data(format!(
                "selection mixes relations {} and {}",
                first.relation, s.relation
            )));
        }
    }
    let reprs = encoder.encode_all(samples.iter().copied())?;
    let keys: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let picks = select_indices(&reprs, &keys, m, seed);
    picks.into_iter().map(|i| Exemplar::new(samples[i].clone())).collect()
}

/// Index-level selection over precomputed representations.
pub fn select_indices<K: Ord>(reprs: &[Representation], keys: &[K], m: usize, seed: u64) -> Vec<usize> {
    let k = m.min(reprs.len());
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clustering = kmeans::kmeans(reprs, k, &mut rng);
    kmeans::closest_to_centroids(reprs, keys, &clustering)
}

/// Per-relation exemplar lists `M^r`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    relations: BTreeMap<RelationId, Vec<Exemplar>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the exemplars of a relation learned for the first time.
    pub fn insert(&mut self, relation: RelationId, exemplars: Vec<Exemplar>) -> Result<()> {
        if exemplars.is_empty() {
            return Err(Error::State(format!("relation {relation} needs at least one exemplar")));
        }
        if let Some(e) = exemplars.iter().find(|e| e.relation != relation) {
            return Err(Error::State(format!(
                "exemplar {} has relation {}, expected {relation}",
                e.id, e.relation
            )));
        }
        if self.relations.contains_key(&relation) {
            return Err(Error::State(format!("memory for relation {relation} is already filled")));
        }
        self.relations.insert(relation, exemplars);
        Ok(())
    }

    pub fn get(&self, relation: RelationId) -> Option<&[Exemplar]> {
        self.relations.get(&relation).map(Vec::as_slice)
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.relations.keys().copied()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// The accumulated memory `M~_k` in relation order.
    pub fn all(&self) -> impl Iterator<Item = &Exemplar> {
        self.relations.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn originals(&self) -> Vec<Sample> {
        self.all().map(|e| e.sample().clone()).collect()
    }
}

/// Write-once static prototypes and the `beta` blend that forms `p_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    beta: f64,
    statics: BTreeMap<RelationId, Representation>,
}

impl PrototypeStore {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(Self {
            beta,
            statics: BTreeMap::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Stores `p_r^static`. A relation's static prototype can be written once.
    pub fn insert_static(&mut self, relation: RelationId, prototype: Representation) -> Result<()> {
        if self.statics.contains_key(&relation) {
            return Err(Error::State(format!(
                "static prototype of relation {relation} is already set"
            )));
        }
        self.statics.insert(relation, prototype);
        Ok(())
    }

    /// Encodes every training sample of `relation` and stores their mean.
    pub fn capture_static(&mut self, encoder: &EncoderState, relation: RelationId, samples: &[&Sample]) -> Result<()> {
        if self.statics.contains_key(&relation) {
            return Err(Error::State(format!(
                "static prototype of relation {relation} is already set"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("relation {relation} has no training samples")));
        }
        if let Some(s) = samples.iter().find(|s| !s.is_original() || s.relation != relation) {
            return Err(Error::State(format!(
                "sample {} cannot contribute to the static prototype of {relation}",
                s.id
            )));
        }
        let reprs = encoder.encode_all(samples.iter().copied())?;
        self.insert_static(relation, mean(&reprs))
    }

    pub fn static_of(&self, relation: RelationId) -> Option<&Representation> {
        self.statics.get(&relation)
    }

    pub fn statics(&self) -> &BTreeMap<RelationId, Representation> {
        &self.statics
    }

    /// `p_r = (1 - beta) p_r^static + beta * mean(dynamic)`.
    pub fn blend(&self, relation: RelationId, dynamic: &[Representation]) -> Result<Representation> {
        let stat = self
            .statics
            .get(&relation)
            .ok_or_else(|| Error::State(format!("no static prototype for relation {relation}")))?;
        if self.beta == 0.0 {
            return Ok(stat.clone());
        }
        if dynamic.is_empty() {
            return Err(Error::State(format!("relation {relation} has no exemplars")));
        }
        let dyn_mean = mean(dynamic);
        if self.beta == 1.0 {
            return Ok(dyn_mean);
        }
        Ok(stat
            .iter()
            .zip(&dyn_mean)
            .map(|(s, d)| (1.0 - self.beta) * s + self.beta * d)
            .collect())
    }

    /// Combined prototype from the current encoding of `M^r`.
    pub fn combined(&self, encoder: &EncoderState, memory: &MemoryStore, relation: RelationId) -> Result<Representation> {
        let exemplars = memory
            .get(relation)
            .ok_or_else(|| Error::State(format!("no exemplars stored for relation {relation}")))?;
        let dynamic = if self.beta == 0.0 {
            Vec::new()
        } else {
            encoder.encode_all(exemplars.iter().map(Exemplar::sample))?
        };
        self.blend(relation, &dynamic)
    }

    /// Combined prototypes of every relation with stored memory.
    pub fn combined_all(&self, encoder: &EncoderState, memory: &MemoryStore) -> Result<BTreeMap<RelationId, Representation>> {
        memory
            .relations()
            .map(|r| Ok((r, self.combined(encoder, memory, r)?)))
            .collect()
    }
}

fn mean(vectors: &[Representation]) -> Representation {
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    tensor::mean_of(&refs)
}

/// On-disk form of memory and static prototypes: relation -> exemplar ids + static vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub beta: f64,
    pub relations: BTreeMap<RelationId, MemoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub exemplars: Vec<String>,
    pub static_prototype: Option<Representation>,
}

impl MemorySnapshot {
    pub fn capture(memory: &MemoryStore, prototypes: &PrototypeStore) -> Self {
        let mut relations: BTreeMap<RelationId, MemoryEntry> = BTreeMap::new();
        for r in memory.relations().chain(prototypes.statics.keys().copied()) {
            relations.entry(r).or_insert_with(|| MemoryEntry {
                exemplars: memory
                    .get(r)
                    .map(|ex| ex.iter().map(|e| e.id.clone()).collect())
                    .unwrap_or_default(),
                static_prototype: prototypes.static_of(r).cloned(),
            });
        }
        Self {
            beta: prototypes.beta,
            relations,
        }
    }

    /// Rebuilds the stores, resolving exemplar ids against `sequence`.
    pub fn restore(&self, sequence: &TaskSequence) -> Result<(MemoryStore, PrototypeStore)> {
        let mut memory = MemoryStore::new();
        let mut prototypes = PrototypeStore::new(self.beta)?;
        for (&r, entry) in &self.relations {
            if !entry.exemplars.is_empty() {
                let exemplars = entry
                    .exemplars
                    .iter()
                    .map(|id| {
                        let s = sequence
                            .find_sample(id)
                            .ok_or_else(|| Error::Data(format!("memory refers to unknown sample {id}")))?;
                        Exemplar::new(s.clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                memory.insert(r, exemplars)?;
            }
            if let Some(p) = &entry.static_prototype {
                prototypes.insert_static(r, p.clone())?;
            }
        }
        Ok((memory, prototypes))
    }
}
