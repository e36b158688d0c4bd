//! Deterministic synthetic relation corpora with known analogy structure.
//!
//! Each relation owns a few trigger templates. A sentence is filler words,
//! a head entity, one (noisy) template, the tail entity, more filler. An
//! analogous partner copies its anchor's templates and swaps a small number
//! of trigger tokens, so the two are confusable by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RelationId, RelationVocab, Sample, Span, SplitRatio, Task, TaskSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub relations: usize,
    pub tasks: usize,
    pub samples_per_relation: usize,
    /// `[anchor, partner]` relation indices; the partner is derived from the anchor.
    pub analogous_pairs: Vec<[usize; 2]>,
    pub templates_per_relation: usize,
    pub template_len: usize,
    /// Trigger tokens that differ between a partner and its anchor, per template.
    pub perturbed_tokens: usize,
    pub filler_vocab: usize,
    /// Inclusive range of filler tokens before and after the core.
    pub filler_len: [usize; 2],
    pub entity_pool: usize,
    /// Probability that a trigger token is replaced by a filler token.
    pub noise: f64,
    pub split: SplitRatio,
    pub seed: u64,
    /// Shuffle relation-to-task assignment with `seed`; otherwise relation `i`
    /// goes to task `i * tasks / relations`.
    pub shuffle_relations: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            relations: 10,
            tasks: 5,
            samples_per_relation: 50,
            analogous_pairs: vec![],
            templates_per_relation: 3,
            template_len: 3,
            perturbed_tokens: 1,
            filler_vocab: 40,
            filler_len: [1, 4],
            entity_pool: 60,
            noise: 0.1,
            split: SplitRatio {
                train: 0.6,
                valid: 0.2,
            },
            seed: 0,
            shuffle_relations: false,
        }
    }
}

/// A generated sequence plus the ground-truth analogous pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sequence: TaskSequence,
    pub analogous_pairs: Vec<(RelationId, RelationId)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.relations == 0 {
            return fail("empty spec: no relations".into());
        }
        if self.tasks == 0 || self.tasks > self.relations {
            return fail(format!("{} tasks for {} relations", self.tasks, self.relations));
        }
        if self.samples_per_relation < 3 {
            return fail("need at least 3 samples per relation".into());
        }
        if self.templates_per_relation == 0 || self.template_len == 0 {
            return fail("templates must be non-empty".into());
        }
        if self.filler_vocab == 0 || self.entity_pool < 2 {
            return fail("filler vocabulary and entity pool too small".into());
        }
        if self.filler_len[0] > self.filler_len[1] {
            return fail("filler_len range is inverted".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must be in [0, 1)".into());
        }
        self.split.validate()?;
        let mut used = vec![false; self.relations];
        for &[a, b] in &self.analogous_pairs {
            if a >= self.relations || b >= self.relations || a == b {
                return fail(format!("invalid analogous pair [{a}, {b}]"));
            }
            if used[a] || used[b] {
                return fail(format!("relation in more than one analogous pair: [{a}, {b}]"));
            }
            used[a] = true;
            used[b] = true;
        }
        if !self.analogous_pairs.is_empty()
            && (self.perturbed_tokens == 0 || self.perturbed_tokens > self.template_len)
        {
            return fail("perturbed_tokens must be in 1..=template_len".into());
        }
        Ok(())
    }
}

/// Generates a synthetic task sequence. Deterministic given its settings.
pub fn generate_synthetic_sequence(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // trigger templates, anchors first
    let mut templates: Vec<Vec<Vec<String>>> = (0..spec.relations)
        .map(|r| {
            (0..spec.templates_per_relation)
                .map(|t| (0..spec.template_len).map(|k| format!("t{r}_{t}_{k}")).collect())
                .collect()
        })
        .collect();
    for &[anchor, partner] in &spec.analogous_pairs {
        let mut derived = templates[anchor].clone();
        for (t, template) in derived.iter_mut().enumerate() {
            let mut positions: Vec<usize> = (0..spec.template_len).collect();
            positions.shuffle(&mut rng);
            for &k in positions.iter().take(spec.perturbed_tokens) {
                template[k] = format!("t{partner}_{t}_{k}");
            }
        }
        templates[partner] = derived;
    }

    let vocab = RelationVocab::from_names((0..spec.relations).map(|r| format!("rel{r}")))?;

    let mut assignment: Vec<usize> = (0..spec.relations).collect();
    if spec.shuffle_relations {
        assignment.shuffle(&mut rng);
    }
    let mut groups: Vec<Vec<RelationId>> = vec![vec![]; spec.tasks];
    for (slot, &r) in assignment.iter().enumerate() {
        groups[slot * spec.tasks / spec.relations].push(RelationId(r as u32));
    }

    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..spec.filler_vocab));
    let mut per_relation: Vec<Vec<Sample>> = Vec::with_capacity(spec.relations);
    for (r, rel_templates) in templates.iter().enumerate() {
        let mut samples = Vec::with_capacity(spec.samples_per_relation);
        for i in 0..spec.samples_per_relation {
            let mut tokens = Vec::new();
            let pre = rng.random_range(spec.filler_len[0]..=spec.filler_len[1]);
            for _ in 0..pre {
                tokens.push(filler(&mut rng));
            }
            let head_entity = rng.random_range(0..spec.entity_pool);
            let mut tail_entity = rng.random_range(0..spec.entity_pool - 1);
            if tail_entity >= head_entity {
                tail_entity += 1;
            }
            let head = push_entity(&mut tokens, head_entity, &mut rng);
            let template = &rel_templates[rng.random_range(0..rel_templates.len())];
            for trigger in template {
                if rng.random::<f64>() < spec.noise {
                    tokens.push(filler(&mut rng));
                } else {
                    tokens.push(trigger.clone());
                }
            }
            let tail = push_entity(&mut tokens, tail_entity, &mut rng);
            let post = rng.random_range(spec.filler_len[0]..=spec.filler_len[1]);
            for _ in 0..post {
                tokens.push(filler(&mut rng));
            }
            samples.push(Sample::new(format!("syn-r{r}-{i}"), tokens, head, tail, RelationId(r as u32))?);
        }
        per_relation.push(samples);
    }

    let mut tasks = Vec::with_capacity(spec.tasks);
    for (index, relations) in groups.into_iter().enumerate() {
        let mut task = Task {
            index,
            relations: relations.clone(),
            train: vec![],
            valid: vec![],
            test: vec![],
        };
        for r in relations {
            let samples = std::mem::take(&mut per_relation[r.index()]);
            let (n_train, n_valid) = spec.split.sizes(samples.len());
            let mut it = samples.into_iter();
            task.train.extend(it.by_ref().take(n_train));
            task.valid.extend(it.by_ref().take(n_valid));
            task.test.extend(it);
        }
        tasks.push(task);
    }

    let analogous_pairs = spec
        .analogous_pairs
        .iter()
        .map(|&[a, b]| (RelationId(a as u32), RelationId(b as u32)))
        .collect();
    Ok(SyntheticCorpus {
        sequence: TaskSequence::new(tasks, vocab)?,
        analogous_pairs,
    })
}

/// Appends a one- or two-token entity name and returns its span.
fn push_entity(tokens: &mut Vec<String>, entity: usize, rng: &mut ChaCha8Rng) -> Span {
    let start = tokens.len();
    tokens.push(format!("e{entity}"));
    if rng.random_bool(0.3) {
        tokens.push(format!("e{entity}x"));
    }
    Span::new(start, tokens.len())
}
