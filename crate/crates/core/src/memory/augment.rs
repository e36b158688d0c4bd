use rand::Rng;

use super::MemoryStore;
use crate::data::{Provenance, Sample, Span};
use crate::encoder::SEPARATOR;
use crate::error::{Error, Result};

/// Copy of `x` whose head and tail spans hold the head and tail tokens of `donor`.
pub fn replace_entities(x: &Sample, donor: &Sample, id: String) -> Sample {
    let head_first = x.head.start < x.tail.start;
    let (first, second) = if head_first { (x.head, x.tail) } else { (x.tail, x.head) };
    let (first_fill, second_fill) = if head_first {
        (donor.head_tokens(), donor.tail_tokens())
    } else {
        (donor.tail_tokens(), donor.head_tokens())
    };

    let mut tokens = Vec::with_capacity(x.tokens.len() + first_fill.len() + second_fill.len());
    tokens.extend_from_slice(&x.tokens[..first.start]);
    let first_span = Span::new(tokens.len(), tokens.len() + first_fill.len());
    tokens.extend_from_slice(first_fill);
    tokens.extend_from_slice(&x.tokens[first.end..second.start]);
    let second_span = Span::new(tokens.len(), tokens.len() + second_fill.len());
    tokens.extend_from_slice(second_fill);
    tokens.extend_from_slice(&x.tokens[second.end..]);

    let (head, tail) = if head_first {
        (first_span, second_span)
    } else {
        (second_span, first_span)
    };
    Sample {
        id,
        tokens,
        head,
        tail,
        relation: x.relation,
        provenance: Provenance::EntityReplaced,
    }
}

/// `x [SEP] other`, keeping the label and entity spans of `x`.
pub fn concatenate(x: &Sample, other: &Sample, id: String) -> Sample {
    let mut tokens = Vec::with_capacity(x.tokens.len() + 1 + other.tokens.len());
    tokens.extend_from_slice(&x.tokens);
    tokens.push(SEPARATOR.to_string());
    tokens.extend_from_slice(&other.tokens);
    let provenance = match x.provenance {
        Provenance::EntityReplaced => Provenance::ReplacedAndConcatenated,
        _ => Provenance::Concatenated,
    };
    Sample {
        id,
        tokens,
        head: x.head,
        tail: x.tail,
        relation: x.relation,
        provenance,
    }
}

/// Builds the augmented replay set: every exemplar plus three variants of it.
///
/// For `x` in `M^r`: an entity-replaced copy using another exemplar of `r`,
/// `x` with a sample of another relation appended, and the replaced copy with
/// a different sample of another relation appended. A relation with a single
/// exemplar replaces entities with its own.
pub fn augment<R: Rng + ?Sized>(memory: &MemoryStore, rng: &mut R) -> Result<Vec<Sample>> {
    if memory.num_relations() < 2 {
        return Err(Error::State(
            "memory augmentation needs exemplars from at least two relations".into(),
        ));
    }
    let mut out = Vec::with_capacity(4 * memory.len());
    for r in memory.relations() {
        let own = memory.get(r).expect("relation listed by the store");
        let others: Vec<&Sample> = memory.all().filter(|e| e.relation != r).map(|e| e.sample()).collect();
        for (i, x) in own.iter().enumerate() {
            let j = if own.len() == 1 {
                i
            } else {
                let j = rng.random_range(0..own.len() - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            };
            let m = rng.random_range(0..others.len());
            let n = if others.len() == 1 {
                m
            } else {
                let n = rng.random_range(0..others.len() - 1);
                if n >= m {
                    n + 1
                } else {
                    n
                }
            };
            let replaced = replace_entities(x, &own[j], format!("{}#rep", x.id));
            let appended = concatenate(x, others[m], format!("{}#cat", x.id));
            let both = concatenate(&replaced, others[n], format!("{}#repcat", x.id));
            out.extend([x.sample().clone(), replaced, appended, both]);
        }
    }
    Ok(out)
}
