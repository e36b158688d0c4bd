//! Combined prediction and continual accuracy bookkeeping.

mod analysis;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{RelationId, Sample, TaskSequence};
use crate::encoder::Representation;
use crate::error::{Error, Result};
use crate::model::{Model, Prototypes};
use crate::tensor;

pub use analysis::{
    analogous_subset_metrics, bin_of, export_heatmap, forgetting_report, global_metrics, max_similarities,
    sudden_drop_table, DropBin, ForgettingReport, RelationForgetting, SimilarityBin, SubsetMetrics, SubsetRule,
    SuddenDropRow,
};

/// `(1 - alpha) * contrastive + alpha * linear`.
pub fn combine(contrastive: &[f64], linear: &[f64], alpha: f64) -> Vec<f64> {
    contrastive
        .iter()
        .zip(linear)
        .map(|(c, l)| (1.0 - alpha) * c + alpha * l)
        .collect()
}

/// Predicts with the linear head, the prototype head, or a blend of both.
#[derive(Debug)]
pub struct Predictor<'a> {
    model: &'a Model,
    projected: Option<Vec<Representation>>,
    alpha: f64,
}

impl<'a> Predictor<'a> {
    /// With `alpha == 1` the prototypes are not consulted.
    pub fn new(model: &'a Model, prototypes: &Prototypes, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let projected = if alpha < 1.0 {
            Some(model.project_prototypes(prototypes)?)
        } else {
            None
        };
        Ok(Self { model, projected, alpha })
    }

    pub fn scores(&self, sample: &Sample) -> Result<Vec<f64>> {
        let out = self.model.probabilities(sample, self.projected.as_deref())?;
        Ok(match out.contrastive {
            Some(c) => combine(&c, &out.linear, self.alpha),
            None => out.linear,
        })
    }

    pub fn predict(&self, sample: &Sample) -> Result<RelationId> {
        let scores = self.scores(sample)?;
        if scores.is_empty() {
            return Err(Error::State("model has no relations yet".into()));
        }
        Ok(self.model.classifier.relations[tensor::argmax(&scores)])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, other: Tally) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Test results of the model at the end of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub after_task: usize,
    /// One tally per task `j <= after_task`.
    pub per_task: Vec<Tally>,
    pub per_relation: BTreeMap<RelationId, Tally>,
}

impl TaskEvaluation {
    /// Pooled accuracy over every test sample seen so far.
    pub fn whole(&self) -> f64 {
        let mut t = Tally::default();
        for x in &self.per_task {
            t.add(*x);
        }
        t.accuracy().unwrap_or(0.0)
    }
}

/// Scores the test sets of tasks `0..=k` with any predicting function.
pub fn evaluate_after_task<F>(sequence: &TaskSequence, k: usize, mut predict: F) -> Result<TaskEvaluation>
where
    F: FnMut(&Sample) -> Result<RelationId>,
{
    if k >= sequence.len() {
        return Err(Error::State(format!("task {k} is out of range")));
    }
    let mut per_task = Vec::with_capacity(k + 1);
    let mut per_relation: BTreeMap<RelationId, Tally> = BTreeMap::new();
    for j in 0..=k {
        let task = sequence.task(j);
        if task.test.is_empty() {
            return Err(Error::Data(format!("task {j} has no test samples")));
        }
        let mut tally = Tally::default();
        for s in &task.test {
            let hit = usize::from(predict(s)? == s.relation);
            tally.add(Tally { correct: hit, total: 1 });
            per_relation.entry(s.relation).or_default().add(Tally { correct: hit, total: 1 });
        }
        per_task.push(tally);
    }
    Ok(TaskEvaluation {
        after_task: k,
        per_task,
        per_relation,
    })
}

/// Provenance attached to every evaluation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    /// Relation names of each task, in sequence order.
    pub task_order: Vec<Vec<String>>,
}

impl RunMetadata {
    pub fn from_sequence(seed: u64, config_hash: &str, sequence: &TaskSequence) -> Self {
        let vocab = sequence.vocab();
        Self {
            seed,
            config_hash: config_hash.to_string(),
            task_order: sequence
                .tasks()
                .iter()
                .map(|t| t.relations.iter().map(|r| vocab.name(*r).to_string()).collect())
                .collect(),
        }
    }
}

/// Entry `(k, j)`: accuracy on task `j`'s test set after learning task `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub metadata: RunMetadata,
    pub rows: Vec<TaskEvaluation>,
}

impl AccuracyMatrix {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            metadata,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: TaskEvaluation) -> Result<()> {
        if row.after_task != self.rows.len() || row.per_task.len() != row.after_task + 1 {
            return Err(Error::State(format!(
                "evaluation rows must arrive in order; expected task {}",
                self.rows.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn entry(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k)?.per_task.get(j)?.accuracy()
    }

    /// Whole-history accuracy after each task.
    pub fn whole(&self) -> Vec<f64> {
        self.rows.iter().map(TaskEvaluation::whole).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(TaskEvaluation::whole)
    }

    pub fn relation_accuracy(&self, k: usize, r: RelationId) -> Option<f64> {
        self.rows.get(k)?.per_relation.get(&r)?.accuracy()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Lower-triangular CSV with a `whole` column; metadata in a leading comment.
    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let order: Vec<String> = m.task_order.iter().map(|t| t.join("|")).collect();
        let mut out = format!(
            "# seed={} config_hash={} task_order={}\n",
            m.seed,
            m.config_hash,
            order.join(";")
        );
        let n = self.rows.len();
        out.push_str("after_task");
        for j in 0..n {
            let _ = write!(out, ",task_{j}");
        }
        out.push_str(",whole\n");
        for (k, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{k}");
            for j in 0..n {
                match row.per_task.get(j).and_then(Tally::accuracy) {
                    Some(a) => {
                        let _ = write!(out, ",{a}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{}", row.whole());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RelationVocab, Span, Task};

    #[test]
    fn combine_hand_case() {
        let s = combine(&[0.6, 0.4], &[0.2, 0.8], 0.6);
        assert!((s[0] - 0.36).abs() < 1e-12 && (s[1] - 0.64).abs() < 1e-12);
        assert_eq!(tensor::argmax(&s), 1);
        assert_eq!(combine(&[0.6, 0.4], &[0.2, 0.8], 0.0), vec![0.6, 0.4]);
        assert_eq!(combine(&[0.6, 0.4], &[0.2, 0.8], 1.0), vec![0.2, 0.8]);
    }

    fn sample(id: &str, r: u32) -> Sample {
        Sample::new(id, vec!["a".into(), "b".into()], Span::new(0, 1), Span::new(1, 2), RelationId(r)).unwrap()
    }

    fn sequence() -> TaskSequence {
        let vocab = RelationVocab::from_names(["r0", "r1", "r2", "r3"].map(String::from)).unwrap();
        let t0 = Task {
            index: 0,
            relations: vec![RelationId(0), RelationId(1)],
            train: vec![sample("a", 0), sample("b", 1)],
            valid: vec![],
            test: vec![sample("c", 0), sample("d", 1)],
        };
        let t1 = Task {
            index: 1,
            relations: vec![RelationId(2), RelationId(3)],
            train: vec![sample("e", 2), sample("f", 3)],
            valid: vec![],
            test: vec![sample("g", 2), sample("h", 3), sample("i", 3), sample("j", 3)],
        };
        TaskSequence::new(vec![t0, t1], vocab).unwrap()
    }

    #[test]
    fn constant_predictor_and_pooled_accuracy() {
        let seq = sequence();
        let row = evaluate_after_task(&seq, 0, |_| Ok(RelationId(0))).unwrap();
        assert_eq!(row.whole(), 0.5);
        let row = evaluate_after_task(&seq, 1, |_| Ok(RelationId(3))).unwrap();
        // pooled 3/6, per-task mean would be (0 + 0.75) / 2
        assert_eq!(row.whole(), 0.5);
        assert_eq!(row.per_task[1].accuracy(), Some(0.75));
    }

    #[test]
    fn oracle_fills_matrix_with_ones() {
        let seq = sequence();
        let mut m = AccuracyMatrix::new(RunMetadata::from_sequence(0, "h", &seq));
        for k in 0..2 {
            m.push(evaluate_after_task(&seq, k, |s| Ok(s.relation)).unwrap()).unwrap();
        }
        assert_eq!(m.whole(), vec![1.0, 1.0]);
        assert_eq!(m.entry(1, 0), Some(1.0));
        assert_eq!(m.entry(0, 1), None);
        let csv = m.to_csv();
        assert!(csv.starts_with("# seed=0 config_hash=h task_order=r0|r1;r2|r3"));
        assert!(csv.contains("0,1,,1\n"));
        assert_eq!(AccuracyMatrix::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn rows_must_arrive_in_order() {
        let seq = sequence();
        let mut m = AccuracyMatrix::new(RunMetadata::from_sequence(0, "h", &seq));
        let row = evaluate_after_task(&seq, 1, |s| Ok(s.relation)).unwrap();
        assert!(m.push(row).is_err());
    }
}
