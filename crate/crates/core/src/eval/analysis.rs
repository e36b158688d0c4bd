//! Forgetting versus prototype similarity: binned drops, sudden-drop table,
//! analogous/dissimilar subsets and heatmap export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::AccuracyMatrix;
use crate::data::{RelationId, TaskSequence};
use crate::error::{Error, Result};
use crate::model::{similarity_matrix, Prototypes};
use crate::tensor;

/// Maximum-similarity bins: `[0.85, 1]`, `[0.70, 0.85)`, below `0.70`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityBin {
    High,
    Medium,
    Low,
}

impl SimilarityBin {
    pub const ALL: [SimilarityBin; 3] = [SimilarityBin::High, SimilarityBin::Medium, SimilarityBin::Low];

    pub fn label(self) -> &'static str {
        match self {
            SimilarityBin::High => "[0.85, 1.00]",
            SimilarityBin::Medium => "[0.70, 0.85)",
            SimilarityBin::Low => "(-, 0.70)",
        }
    }
}

pub fn bin_of(similarity: f64) -> SimilarityBin {
    if similarity >= 0.85 {
        SimilarityBin::High
    } else if similarity >= 0.70 {
        SimilarityBin::Medium
    } else {
        SimilarityBin::Low
    }
}

/// Each relation's highest cosine similarity to any other relation.
pub fn max_similarities(prototypes: &Prototypes) -> Result<BTreeMap<RelationId, f64>> {
    if prototypes.len() < 2 {
        return Err(Error::State("similarity needs at least two relation prototypes".into()));
    }
    Ok(prototypes
        .iter()
        .map(|(r, p)| {
            let best = prototypes
                .iter()
                .filter(|(o, _)| *o != r)
                .map(|(_, q)| tensor::cosine(p, q))
                .fold(f64::NEG_INFINITY, f64::max);
            (*r, best)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationForgetting {
    pub relation: RelationId,
    pub name: String,
    pub first_task: usize,
    pub first_accuracy: f64,
    pub final_accuracy: f64,
    /// `first_accuracy - final_accuracy`.
    pub drop: f64,
    pub max_similarity: f64,
    pub bin: SimilarityBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: SimilarityBin,
    pub count: usize,
    pub mean_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub relations: Vec<RelationForgetting>,
    pub bins: Vec<BinSummary>,
}

/// Per-relation drop from first learning to the end, binned by final maximum similarity.
pub fn forgetting_report(history: &[Prototypes], matrix: &AccuracyMatrix, sequence: &TaskSequence) -> Result<ForgettingReport> {
    let last = history
        .last()
        .ok_or_else(|| Error::State("prototype history is empty".into()))?;
    let final_row = matrix.len().checked_sub(1).ok_or_else(|| Error::State("accuracy matrix is empty".into()))?;
    let sims = max_similarities(last)?;
    let mut relations = Vec::new();
    for (&r, &max_similarity) in &sims {
        let Some(first_task) = (0..matrix.len()).find(|&k| matrix.rows[k].per_relation.contains_key(&r)) else {
            continue;
        };
        let first_accuracy = matrix.relation_accuracy(first_task, r).unwrap_or(0.0);
        let final_accuracy = matrix.relation_accuracy(final_row, r).unwrap_or(0.0);
        relations.push(RelationForgetting {
            relation: r,
            name: sequence.vocab().name(r).to_string(),
            first_task,
            first_accuracy,
            final_accuracy,
            drop: first_accuracy - final_accuracy,
            max_similarity,
            bin: bin_of(max_similarity),
        });
    }
    let bins = SimilarityBin::ALL
        .into_iter()
        .map(|bin| {
            let drops: Vec<f64> = relations.iter().filter(|x| x.bin == bin).map(|x| x.drop).collect();
            BinSummary {
                bin,
                count: drops.len(),
                mean_drop: mean(&drops),
            }
        })
        .collect();
    Ok(ForgettingReport { relations, bins })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sudden-drop size in accuracy points between adjacent tasks: `(0, 20)`, `[20, 40)`, `[40, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropBin {
    Small,
    Medium,
    Large,
}

impl DropBin {
    pub const ALL: [DropBin; 3] = [DropBin::Small, DropBin::Medium, DropBin::Large];

    pub fn of(points: f64) -> Option<DropBin> {
        if points <= 0.0 {
            None
        } else if points < 20.0 {
            Some(DropBin::Small)
        } else if points < 40.0 {
            Some(DropBin::Medium)
        } else {
            Some(DropBin::Large)
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DropBin::Small => "(0, 20)",
            DropBin::Medium => "[20, 40)",
            DropBin::Large => "[40, 100]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuddenDropRow {
    pub bin: DropBin,
    pub count: usize,
    /// Mean maximum similarity before the drop (end of task `k - 1`).
    pub mean_before: Option<f64>,
    /// Mean maximum similarity after the drop (end of task `k`).
    pub mean_after: Option<f64>,
    pub mean_change: Option<f64>,
}

/// Mean maximum similarity before and after each adjacent-task accuracy drop.
///
/// A drop is `100 * (acc_{k-1}(r) - acc_k(r))` for a relation already learned at
/// task `k - 1`. Transitions where task `k - 1` had a single prototype are skipped.
pub fn sudden_drop_table(history: &[Prototypes], matrix: &AccuracyMatrix) -> Result<Vec<SuddenDropRow>> {
    if history.len() != matrix.len() {
        return Err(Error::State(format!(
            "prototype history has {} entries but the accuracy matrix has {} rows",
            history.len(),
            matrix.len()
        )));
    }
    let mut events: BTreeMap<DropBin, Vec<(f64, f64)>> = BTreeMap::new();
    for k in 1..matrix.len() {
        if history[k - 1].len() < 2 {
            continue;
        }
        let before = max_similarities(&history[k - 1])?;
        let after = max_similarities(&history[k])?;
        for (r, prev) in &matrix.rows[k - 1].per_relation {
            let (Some(prev_acc), Some(cur_acc)) = (prev.accuracy(), matrix.relation_accuracy(k, *r)) else {
                continue;
            };
            let Some(bin) = DropBin::of(100.0 * (prev_acc - cur_acc)) else {
                continue;
            };
            if let (Some(b), Some(a)) = (before.get(r), after.get(r)) {
                events.entry(bin).or_default().push((*b, *a));
            }
        }
    }
    Ok(DropBin::ALL
        .into_iter()
        .map(|bin| {
            let ev = events.remove(&bin).unwrap_or_default();
            let b: Vec<f64> = ev.iter().map(|e| e.0).collect();
            let a: Vec<f64> = ev.iter().map(|e| e.1).collect();
            let mean_before = mean(&b);
            let mean_after = mean(&a);
            SuddenDropRow {
                bin,
                count: ev.len(),
                mean_before,
                mean_after,
                mean_change: mean_before.zip(mean_after).map(|(b, a)| a - b),
            }
        })
        .collect())
}

/// How the relations of a subset are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRule {
    /// Relations of the first half of the tasks with a later relation at or above the threshold.
    Analogous { threshold: f64 },
    /// Relations of the first half of the tasks whose similarity to every later relation is below the threshold.
    Dissimilar { threshold: f64 },
    Explicit(Vec<RelationId>),
}

impl SubsetRule {
    pub fn label(&self) -> String {
        match self {
            SubsetRule::Analogous { threshold } => format!("analogous (>= {threshold})"),
            SubsetRule::Dissimilar { threshold } => format!("dissimilar (< {threshold})"),
            SubsetRule::Explicit(rs) => format!("explicit ({} relations)", rs.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub label: String,
    pub relations: Vec<RelationId>,
    /// Mean final accuracy over the subset; `None` for an empty subset.
    pub accuracy: Option<f64>,
    pub drop: Option<f64>,
}

impl SubsetMetrics {
    pub fn describe(&self) -> String {
        match (self.accuracy, self.drop) {
            // summaries averaged over seeds carry no relation list
            (Some(a), Some(d)) if self.relations.is_empty() => {
                format!("{}: accuracy {:.1}, drop {:.1}", self.label, 100.0 * a, 100.0 * d)
            }
            (Some(a), Some(d)) => format!(
                "{}: {} relations, accuracy {:.1}, drop {:.1}",
                self.label,
                self.relations.len(),
                100.0 * a,
                100.0 * d
            ),
            _ => format!("{}: none", self.label),
        }
    }
}

fn metrics_over(report: &ForgettingReport, label: String, chosen: &BTreeSet<RelationId>) -> SubsetMetrics {
    let rows: Vec<_> = report.relations.iter().filter(|x| chosen.contains(&x.relation)).collect();
    SubsetMetrics {
        label,
        relations: rows.iter().map(|x| x.relation).collect(),
        accuracy: mean(&rows.iter().map(|x| x.final_accuracy).collect::<Vec<_>>()),
        drop: mean(&rows.iter().map(|x| x.drop).collect::<Vec<_>>()),
    }
}

/// Mean final accuracy and drop over every relation in the report.
pub fn global_metrics(report: &ForgettingReport) -> SubsetMetrics {
    let all = report.relations.iter().map(|x| x.relation).collect();
    metrics_over(report, "all".into(), &all)
}

/// Accuracy and drop over the relations selected by `rule`, using final prototypes.
pub fn analogous_subset_metrics(
    report: &ForgettingReport,
    prototypes: &Prototypes,
    sequence: &TaskSequence,
    rule: &SubsetRule,
) -> SubsetMetrics {
    let half = sequence.len() / 2;
    let former: Vec<RelationId> = sequence.tasks()[..half].iter().flat_map(|t| t.relations.clone()).collect();
    let latter: Vec<RelationId> = sequence.tasks()[half..].iter().flat_map(|t| t.relations.clone()).collect();
    let best_later = |r: RelationId| -> Option<f64> {
        let p = prototypes.get(&r)?;
        latter
            .iter()
            .filter_map(|o| prototypes.get(o))
            .map(|q| tensor::cosine(p, q))
            .reduce(f64::max)
    };
    let chosen: BTreeSet<RelationId> = match rule {
        SubsetRule::Analogous { threshold } => former
            .iter()
            .copied()
            .filter(|r| best_later(*r).is_some_and(|s| s >= *threshold))
            .collect(),
        SubsetRule::Dissimilar { threshold } => former
            .iter()
            .copied()
            .filter(|r| best_later(*r).is_some_and(|s| s < *threshold))
            .collect(),
        SubsetRule::Explicit(rs) => rs.iter().copied().collect(),
    };
    metrics_over(report, rule.label(), &chosen)
}

/// Symmetric cosine-similarity matrix as CSV with relation names on both axes.
pub fn export_heatmap(prototypes: &Prototypes, relations: &[RelationId], sequence: &TaskSequence) -> Result<String> {
    let m = similarity_matrix(prototypes, relations)?;
    let names: Vec<&str> = relations.iter().map(|r| sequence.vocab().name(*r)).collect();
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = String::from("relation");
    for n in &names {
        let _ = write!(out, ",{}", quote(n));
    }
    out.push('\n');
    for (n, row) in names.iter().zip(&m) {
        out.push_str(&quote(n));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_and_edges() {
        assert_eq!(bin_of(1.0), SimilarityBin::High);
        assert_eq!(bin_of(0.85), SimilarityBin::High);
        assert_eq!(bin_of(0.8499), SimilarityBin::Medium);
        assert_eq!(bin_of(0.70), SimilarityBin::Medium);
        assert_eq!(bin_of(0.0), SimilarityBin::Low);
        assert_eq!(bin_of(-0.3), SimilarityBin::Low);
        assert_eq!(DropBin::of(0.0), None);
        assert_eq!(DropBin::of(19.9), Some(DropBin::Small));
        assert_eq!(DropBin::of(20.0), Some(DropBin::Medium));
        assert_eq!(DropBin::of(40.0), Some(DropBin::Large));
        assert_eq!(DropBin::of(100.0), Some(DropBin::Large));
    }

    #[test]
    fn identical_and_orthogonal_prototypes() {
        let same: Prototypes = [(RelationId(0), vec![1.0, 2.0]), (RelationId(1), vec![1.0, 2.0])].into();
        assert!(max_similarities(&same).unwrap().values().all(|v| (v - 1.0).abs() < 1e-12));
        let orth: Prototypes = [(RelationId(0), vec![1.0, 0.0]), (RelationId(1), vec![0.0, 3.0])].into();
        let s = max_similarities(&orth).unwrap();
        assert!(s.values().all(|v| *v == 0.0));
        assert_eq!(bin_of(s[&RelationId(0)]), SimilarityBin::Low);
        let one: Prototypes = [(RelationId(0), vec![1.0])].into();
        assert!(max_similarities(&one).is_err());
    }
}
