use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Corpus, RelationVocab, Sample, Span, Split};
use crate::encoder::{mark_entities, truncate, MAX_SEQUENCE_LEN};
use crate::error::{Error, Result};

/// On-disk corpus layouts understood by [`ingest_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One JSON object per line: `id`, `tokens`, `h`, `t`, `relation`, optional `split`.
    #[default]
    JsonLines,
    /// FewRel release layout: relation name -> list of instances with
    /// `tokens` and `h`/`t` = `[name, id, [[positions...]]]`.
    FewRel,
    /// TACRED release layout: JSON array with inclusive `subj_*`/`obj_*` bounds.
    Tacred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Drop records labelled `no_relation` (TACRED convention).
    pub drop_no_relation: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            drop_no_relation: true,
        }
    }
}

const NO_RELATION: &str = "no_relation";

struct RawRecord {
    id: String,
    tokens: Vec<String>,
    head: Span,
    tail: Span,
    relation: String,
    split: Option<Split>,
}

/// Reads and validates a corpus file.
pub fn ingest_corpus(path: &Path, format: CorpusFormat, options: &IngestOptions) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = match format {
        CorpusFormat::JsonLines => parse_json_lines(&text)?,
        CorpusFormat::FewRel => parse_fewrel(&text)?,
        CorpusFormat::Tacred => parse_tacred(&text)?,
    };
    build_corpus(records, options)
}

fn build_corpus(records: Vec<RawRecord>, options: &IngestOptions) -> Result<Corpus> {
    let mut vocab = RelationVocab::new();
    let mut samples = Vec::with_capacity(records.len());
    let mut splits = Vec::with_capacity(records.len());
    let mut seen_ids = std::collections::HashSet::new();
    for rec in records {
        if options.drop_no_relation && rec.relation == NO_RELATION {
            continue;
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(Error::record(&rec.id, "id", "duplicate record id"));
        }
        let mut sample = Sample::new(rec.id, rec.tokens, rec.head, rec.tail, super::RelationId(0))?;
        if let Err(e) = truncate(mark_entities(&sample), MAX_SEQUENCE_LEN, &sample.id) {
            log::warn!("skipping: {e}");
            continue;
        }
        sample.relation = vocab.intern(&rec.relation);
        samples.push(sample);
        splits.push(rec.split);
    }
    Ok(Corpus {
        samples,
        splits,
        vocab,
    })
}

fn field<'a>(obj: &'a Value, id: &str, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::record(id, name, "missing field"))
}

fn str_field(obj: &Value, id: &str, name: &str) -> Result<String> {
    field(obj, id, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::record(id, name, "expected a string"))
}

fn usize_value(v: &Value, id: &str, name: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::record(id, name, "expected a non-negative integer"))
}

fn tokens_field(obj: &Value, id: &str, name: &str) -> Result<Vec<String>> {
    let arr = field(obj, id, name)?
        .as_array()
        .ok_or_else(|| Error::record(id, name, "expected a list of strings"))?;
    arr.iter()
        .map(|t| {
            t.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::record(id, name, "expected a list of strings"))
        })
        .collect()
}

fn span_field(obj: &Value, id: &str, name: &str) -> Result<Span> {
    let arr = field(obj, id, name)?
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::record(id, name, "expected [start, end]"))?;
    Ok(Span::new(usize_value(&arr[0], id, name)?, usize_value(&arr[1], id, name)?))
}

fn parse_json_lines(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fallback = format!("line {}", lineno + 1);
        let obj: Value = serde_json::from_str(line)
            .map_err(|e| Error::record(&fallback, "<json>", e.to_string()))?;
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::record(&fallback, "id", "expected a string")),
            None => return Err(Error::record(&fallback, "id", "missing field")),
        };
        let split = match obj.get("split") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value::<Split>(v.clone())
                    .map_err(|_| Error::record(&id, "split", "expected train|valid|test"))?,
            ),
        };
        out.push(RawRecord {
            tokens: tokens_field(&obj, &id, "tokens")?,
            head: span_field(&obj, &id, "h")?,
            tail: span_field(&obj, &id, "t")?,
            relation: str_field(&obj, &id, "relation")?,
            split,
            id,
        });
    }
    Ok(out)
}

/// FewRel positions are lists of inclusive token indices; the first mention is used.
fn fewrel_span(entity: &Value, id: &str, name: &str) -> Result<Span> {
    let positions = entity
        .get(2)
        .and_then(Value::as_array)
        .and_then(|mentions| mentions.first())
        .and_then(Value::as_array)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::record(id, name, "expected [name, id, [[positions]]]"))?;
    let idx: Vec<usize> = positions
        .iter()
        .map(|p| usize_value(p, id, name))
        .collect::<Result<_>>()?;
    let start = *idx.iter().min().unwrap();
    let end = *idx.iter().max().unwrap() + 1;
    Ok(Span::new(start, end))
}

fn parse_fewrel(text: &str) -> Result<Vec<RawRecord>> {
    let root: BTreeMap<String, Vec<Value>> = serde_json::from_str(text)
        .map_err(|e| Error::record("<root>", "<json>", e.to_string()))?;
    let mut out = Vec::new();
    for (relation, instances) in root {
        for (i, inst) in instances.iter().enumerate() {
            let id = format!("{relation}#{i}");
            out.push(RawRecord {
                tokens: tokens_field(inst, &id, "tokens")?,
                head: fewrel_span(field(inst, &id, "h")?, &id, "h")?,
                tail: fewrel_span(field(inst, &id, "t")?, &id, "t")?,
                relation: relation.clone(),
                split: None,
                id,
            });
        }
    }
    Ok(out)
}

fn parse_tacred(text: &str) -> Result<Vec<RawRecord>> {
    let root: Vec<Value> = serde_json::from_str(text)
        .map_err(|e| Error::record("<root>", "<json>", e.to_string()))?;
    let mut out = Vec::new();
    for (i, inst) in root.iter().enumerate() {
        let id = match inst.get("id").and_then(Value::as_str) {
            Some(s) => s.to_string(),
            None => format!("record {i}"),
        };
        let bound = |name: &str| usize_value(field(inst, &id, name)?, &id, name);
        let head = Span::new(bound("subj_start")?, bound("subj_end")? + 1);
        let tail = Span::new(bound("obj_start")?, bound("obj_end")? + 1);
        out.push(RawRecord {
            tokens: tokens_field(inst, &id, "token")?,
            head,
            tail,
            relation: str_field(inst, &id, "relation")?,
            split: None,
            id,
        });
    }
    Ok(out)
}

/// Reads a task-division file: JSON object mapping task index to relation names.
pub fn read_task_division(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)?;
    let mut indexed = Vec::with_capacity(raw.len());
    for (k, names) in raw {
        let idx: usize = k
            .parse()
            .map_err(|_| Error::Data(format!("task-division key `{k}` is not an integer")))?;
        indexed.push((idx, names));
    }
    indexed.sort_by_key(|(i, _)| *i);
    for (expected, (idx, _)) in indexed.iter().enumerate() {
        if *idx != expected {
            return Err(Error::Data(format!("task-division is missing task {expected}")));
        }
    }
    Ok(indexed.into_iter().map(|(_, n)| n).collect())
}
