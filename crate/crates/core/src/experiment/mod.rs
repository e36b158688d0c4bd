//! Multi-seed experiment driver with per-task persistence, resume, memory-size
//! sweeps and ablation batches.

mod spec;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Component};
use crate::data::{RelationId, TaskSequence};
use crate::encoder::TokenVocab;
use crate::error::{Error, Result};
use crate::eval::{
    analogous_subset_metrics, evaluate_after_task, forgetting_report, sudden_drop_table, AccuracyMatrix,
    ForgettingReport, RunMetadata, SubsetMetrics, SubsetRule, SuddenDropRow, TaskEvaluation,
};
use crate::memory::MemorySnapshot;
use crate::model::{Model, Prototypes};
use crate::training::{Learner, StepRecord};

pub use spec::{CorpusSource, DatasetSource, ExperimentSpec, OUTPUT_ROOT_ENV};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_FILE: &str = "experiment.toml";
const DONE_FILE: &str = "DONE";

/// Similarity threshold for the analogous subset.
pub const ANALOGOUS_THRESHOLD: f64 = 0.85;
/// Similarity threshold below which a relation counts as dissimilar.
pub const DISSIMILAR_THRESHOLD: f64 = 0.70;

/// Self-description written at the root of every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Mean and spread of whole-history accuracy after each task, across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_task: Vec<MeanStd>,
    pub final_accuracy: MeanStd,
    pub analogous: Vec<SubsetMetrics>,
}

impl ExperimentSummary {
    /// One line of `mean ± std` percentages per task, Table-2 style.
    pub fn table_row(&self) -> String {
        self.per_task
            .iter()
            .map(|m| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std))
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task,mean,std\n");
        for (k, m) in self.per_task.iter().enumerate() {
            out.push_str(&format!("{k},{},{}\n", m.mean, m.std));
        }
        out
    }
}

/// Everything produced for one permutation seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub sequence: TaskSequence,
    pub analogous_pairs: Vec<(RelationId, RelationId)>,
    pub matrix: AccuracyMatrix,
    pub history: Vec<Prototypes>,
    pub report: Option<ForgettingReport>,
}

impl SeedResult {
    /// Subset metrics: threshold-based analogous and dissimilar sets, plus the
    /// known analogous anchors when the data source provides them.
    pub fn subsets(&self) -> Vec<SubsetMetrics> {
        let (Some(report), Some(last)) = (&self.report, self.history.last()) else {
            return Vec::new();
        };
        let mut rules = vec![
            SubsetRule::Analogous {
                threshold: ANALOGOUS_THRESHOLD,
            },
            SubsetRule::Dissimilar {
                threshold: DISSIMILAR_THRESHOLD,
            },
        ];
        if !self.analogous_pairs.is_empty() {
            rules.push(SubsetRule::Explicit(self.analogous_pairs.iter().map(|p| p.0).collect()));
        }
        rules
            .iter()
            .map(|rule| analogous_subset_metrics(report, last, &self.sequence, rule))
            .collect()
    }
}

/// Knobs that do not change results and are excluded from the config hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop every seed after this task index, leaving a resumable directory.
    pub stop_after_task: Option<usize>,
}

#[derive(Debug)]
pub enum RunOutcome {
    Finished(ExperimentSummary, Vec<SeedResult>),
    /// Stopped early on request; the directory can be resumed.
    Interrupted,
    /// Resume found nothing left to do.
    AlreadyFinished(ExperimentSummary),
}

impl RunOutcome {
    pub fn summary(&self) -> Option<&ExperimentSummary> {
        match self {
            RunOutcome::Finished(s, _) | RunOutcome::AlreadyFinished(s) => Some(s),
            RunOutcome::Interrupted => None,
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub fn task_dir(seed_dir: &Path, k: usize) -> PathBuf {
    seed_dir.join(format!("task-{k}"))
}

/// Runs every permutation seed into a fresh directory.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, options: RunOptions) -> Result<RunOutcome> {
    spec.validate()?;
    if out.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; use resume to continue it",
            out.display()
        )));
    }
    let hash = spec.config_hash();
    write(&out.join(SPEC_FILE), spec.to_toml()?)?;
    let manifest = Manifest {
        config_hash: hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: spec.permutation_seeds(),
    };
    write(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    drive(spec, &hash, out, options)
}

/// Continues an interrupted run from the last completed task of each seed.
///
/// `expected`, when given, must hash to the stored configuration.
pub fn resume(out: &Path, expected: Option<&ExperimentSpec>) -> Result<RunOutcome> {
    let manifest: Manifest = serde_json::from_str(&read(&out.join(MANIFEST_FILE))?)?;
    let spec = ExperimentSpec::load(&out.join(SPEC_FILE))?;
    if spec.config_hash() != manifest.config_hash {
        return Err(Error::Config(format!(
            "{} was edited after the run started (config hash mismatch)",
            SPEC_FILE
        )));
    }
    if let Some(e) = expected {
        if e.config_hash() != manifest.config_hash {
            return Err(Error::Config(format!(
                "config hash {} does not match the run's {}",
                e.config_hash(),
                manifest.config_hash
            )));
        }
    }
    if is_finished(out)? && out.join("summary.json").exists() {
        let summary = serde_json::from_str(&read(&out.join("summary.json"))?)?;
        return Ok(RunOutcome::AlreadyFinished(summary));
    }
    drive(&spec, &manifest.config_hash, out, RunOptions::default())
}

/// Whether every seed in a run directory has finished all its tasks.
pub fn is_finished(out: &Path) -> Result<bool> {
    let manifest: Manifest = serde_json::from_str(&read(&out.join(MANIFEST_FILE))?)?;
    Ok(manifest
        .seeds
        .iter()
        .all(|s| seed_dir(out, *s).join(DONE_FILE).exists()))
}

fn drive(spec: &ExperimentSpec, hash: &str, out: &Path, options: RunOptions) -> Result<RunOutcome> {
    let mut results = Vec::new();
    for seed in spec.permutation_seeds() {
        match run_seed(spec, hash, seed, &seed_dir(out, seed), options)? {
            Some(r) => results.push(r),
            None => return Ok(RunOutcome::Interrupted),
        }
    }
    let summary = summarize(hash, &results)?;
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write(&out.join("summary.csv"), summary.to_csv())?;
    Ok(RunOutcome::Finished(summary, results))
}

fn summarize(hash: &str, results: &[SeedResult]) -> Result<ExperimentSummary> {
    let tasks = results.iter().map(|r| r.matrix.len()).min().unwrap_or(0);
    let per_task: Vec<MeanStd> = (0..tasks)
        .map(|k| MeanStd::of(&results.iter().map(|r| r.matrix.rows[k].whole()).collect::<Vec<_>>()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::State("no finished seeds to summarize".into()))?;
    let final_accuracy = *per_task
        .last()
        .ok_or_else(|| Error::State("no finished tasks to summarize".into()))?;
    let subsets: Vec<Vec<SubsetMetrics>> = results.iter().map(SeedResult::subsets).collect();
    let analogous = subsets
        .first()
        .map(|first| {
            (0..first.len())
                .map(|i| {
                    let pick = |f: fn(&SubsetMetrics) -> Option<f64>| {
                        let v: Vec<f64> = subsets.iter().filter_map(|s| s.get(i).and_then(f)).collect();
                        MeanStd::of(&v).map(|m| m.mean)
                    };
                    SubsetMetrics {
                        label: first[i].label.clone(),
                        relations: Vec::new(),
                        accuracy: pick(|s| s.accuracy),
                        drop: pick(|s| s.drop),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(ExperimentSummary {
        config_hash: hash.to_string(),
        seeds: results.iter().map(|r| r.seed).collect(),
        per_task,
        final_accuracy,
        analogous,
    })
}

/// Files of one completed task.
struct TaskFiles {
    model: Model,
    memory: MemorySnapshot,
    prototypes: Prototypes,
}

fn load_task(dir: &Path, k: usize, need_state: bool) -> Result<(Option<TaskFiles>, Prototypes, TaskEvaluation)> {
    let corrupt = |reason: String| Error::CorruptSnapshot { task: k, reason };
    let load = |name: &str| read(&dir.join(name)).map_err(|e| corrupt(e.to_string()));
    let prototypes: Prototypes =
        serde_json::from_str(&load("prototypes.json")?).map_err(|e| corrupt(format!("prototypes.json: {e}")))?;
    let evaluation: TaskEvaluation =
        serde_json::from_str(&load("eval.json")?).map_err(|e| corrupt(format!("eval.json: {e}")))?;
    if !need_state {
        return Ok((None, prototypes, evaluation));
    }
    let model = Model::from_json(&load("model.json")?).map_err(|e| corrupt(format!("model.json: {e}")))?;
    let memory: MemorySnapshot =
        serde_json::from_str(&load("memory.json")?).map_err(|e| corrupt(format!("memory.json: {e}")))?;
    let files = TaskFiles {
        model,
        memory,
        prototypes: prototypes.clone(),
    };
    Ok((Some(files), prototypes, evaluation))
}

fn run_seed(spec: &ExperimentSpec, hash: &str, seed: u64, dir: &Path, options: RunOptions) -> Result<Option<SeedResult>> {
    let (sequence, analogous_pairs) = if dir.join("sequence.json").exists() {
        let seq = TaskSequence::from_json(&read(&dir.join("sequence.json"))?)?;
        let pairs: Vec<(RelationId, RelationId)> = serde_json::from_str(&read(&dir.join("analogous_pairs.json"))?)?;
        (seq, pairs)
    } else {
        let built = spec.build_sequence(seed)?;
        write(&dir.join("sequence.json"), built.0.to_json()?)?;
        write(&dir.join("analogous_pairs.json"), serde_json::to_string(&built.1)?)?;
        built
    };
    let mut config = spec.run.clone();
    config.seed = seed;
    let metadata = RunMetadata::from_sequence(seed, hash, &sequence);
    let mut matrix = AccuracyMatrix::new(metadata);
    let mut history = Vec::new();

    let done: Vec<usize> = (0..sequence.len())
        .take_while(|k| task_dir(dir, *k).join(DONE_FILE).exists())
        .collect();
    let mut learner = match done.last() {
        None => Learner::new(config.clone(), TokenVocab::from_sequence(&sequence))?,
        Some(&last) => {
            for &k in &done[..done.len() - 1] {
                let (_, protos, eval) = load_task(&task_dir(dir, k), k, false)?;
                history.push(protos);
                matrix.push(eval)?;
            }
            let (files, protos, eval) = load_task(&task_dir(dir, last), last, true)?;
            let files = files.expect("state requested");
            history.push(protos);
            matrix.push(eval)?;
            let (memory, statics) = files
                .memory
                .restore(&sequence)
                .map_err(|e| Error::CorruptSnapshot {
                    task: last,
                    reason: e.to_string(),
                })?;
            info!("seed {seed}: resuming after task {last}");
            Learner::restore(config.clone(), files.model, memory, statics, files.prototypes, last + 1)?
        }
    };

    for task in &sequence.tasks()[learner.tasks_done..] {
        let k = task.index;
        let report = learner.run_task(task)?;
        let evaluation = {
            let predictor = learner.predictor()?;
            evaluate_after_task(&sequence, k, |s| predictor.predict(s))?
        };
        info!("seed {seed} task {k}: whole-history accuracy {:.4}", evaluation.whole());
        let tdir = task_dir(dir, k);
        write(&tdir.join("model.json"), learner.model.to_json()?)?;
        let snapshot = MemorySnapshot::capture(&learner.memory, &learner.prototypes);
        write(&tdir.join("memory.json"), serde_json::to_string(&snapshot)?)?;
        write(&tdir.join("prototypes.json"), serde_json::to_string(&report.prototypes)?)?;
        write(&tdir.join("eval.json"), serde_json::to_string(&evaluation)?)?;
        write_steps(&tdir.join("steps.jsonl"), &report.steps)?;
        write(&tdir.join(DONE_FILE), "")?;
        history.push(report.prototypes);
        matrix.push(evaluation)?;
        if options.stop_after_task == Some(k) && k + 1 < sequence.len() {
            return Ok(None);
        }
    }

    let report = if history.last().is_some_and(|p| p.len() >= 2) {
        Some(forgetting_report(&history, &matrix, &sequence)?)
    } else {
        None
    };
    let result = SeedResult {
        seed,
        sequence,
        analogous_pairs,
        matrix,
        history,
        report,
    };
    write_seed_artifacts(dir, &result)?;
    write(&dir.join(DONE_FILE), "")?;
    Ok(Some(result))
}

fn write_steps(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut buf, s)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    write(path, buf)
}

fn write_seed_artifacts(dir: &Path, r: &SeedResult) -> Result<()> {
    write(&dir.join("accuracy.csv"), r.matrix.to_csv())?;
    write(&dir.join("accuracy.json"), r.matrix.to_json()?)?;
    if let Some(report) = &r.report {
        write(&dir.join("forgetting.json"), serde_json::to_string_pretty(report)?)?;
        let drops = sudden_drop_table(&r.history, &r.matrix)?;
        write(&dir.join("sudden_drop.json"), serde_json::to_string_pretty(&drops)?)?;
        write(&dir.join("subsets.json"), serde_json::to_string_pretty(&r.subsets())?)?;
    }
    Ok(())
}

/// Reloads the finished artifacts of one seed.
pub fn load_seed(out: &Path, seed: u64) -> Result<SeedResult> {
    let dir = seed_dir(out, seed);
    let sequence = TaskSequence::from_json(&read(&dir.join("sequence.json"))?)?;
    let analogous_pairs = serde_json::from_str(&read(&dir.join("analogous_pairs.json"))?)?;
    let matrix = AccuracyMatrix::from_json(&read(&dir.join("accuracy.json"))?)?;
    let history = (0..matrix.len())
        .map(|k| load_task(&task_dir(&dir, k), k, false).map(|(_, p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    let report = if history.last().is_some_and(|p| p.len() >= 2) {
        Some(forgetting_report(&history, &matrix, &sequence)?)
    } else {
        None
    };
    Ok(SeedResult {
        seed,
        sequence,
        analogous_pairs,
        matrix,
        history,
        report,
    })
}

/// Analytics recomputed from a finished run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Analysis {
    pub seed: u64,
    pub report: Option<ForgettingReport>,
    pub sudden_drop: Vec<SuddenDropRow>,
    pub subsets: Vec<SubsetMetrics>,
}

pub fn analyze(out: &Path, threshold: f64) -> Result<Vec<Analysis>> {
    let manifest: Manifest = serde_json::from_str(&read(&out.join(MANIFEST_FILE))?)?;
    manifest
        .seeds
        .iter()
        .map(|&seed| {
            let r = load_seed(out, seed)?;
            let sudden_drop = sudden_drop_table(&r.history, &r.matrix)?;
            let mut subsets = Vec::new();
            if let (Some(report), Some(last)) = (&r.report, r.history.last()) {
                for rule in [
                    SubsetRule::Analogous { threshold },
                    SubsetRule::Dissimilar {
                        threshold: DISSIMILAR_THRESHOLD,
                    },
                ] {
                    subsets.push(analogous_subset_metrics(report, last, &r.sequence, &rule));
                }
                if !r.analogous_pairs.is_empty() {
                    let rule = SubsetRule::Explicit(r.analogous_pairs.iter().map(|p| p.0).collect());
                    subsets.push(analogous_subset_metrics(report, last, &r.sequence, &rule));
                }
            }
            Ok(Analysis {
                seed,
                report: r.report,
                sudden_drop,
                subsets,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub memory_size: usize,
    pub final_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDifference {
    pub from: usize,
    pub to: usize,
    /// Final mean accuracy of `to` minus that of `from`.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub differences: Vec<SweepDifference>,
}

/// One experiment per memory size, then differences between adjacent sizes.
pub fn memory_size_sweep(spec: &ExperimentSpec, sizes: &[usize], out: &Path) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::Config("at least one memory size is required".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("memory sizes must be positive".into()));
    }
    let mut rows = Vec::new();
    for &m in sizes {
        let mut s = spec.clone();
        s.run.memory_size = m;
        let RunOutcome::Finished(summary, _) = run_experiment(&s, &out.join(format!("memory-{m}")), RunOptions::default())? else {
            unreachable!("runs without a stop request always finish");
        };
        rows.push(SweepRow {
            memory_size: m,
            final_accuracy: summary.final_accuracy,
        });
    }
    let differences = rows
        .windows(2)
        .map(|w| SweepDifference {
            from: w[0].memory_size,
            to: w[1].memory_size,
            difference: w[1].final_accuracy.mean - w[0].final_accuracy.mean,
        })
        .collect();
    let report = SweepReport { rows, differences };
    write(&out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub disabled: Ablation,
    pub final_accuracy: MeanStd,
    pub subsets: Vec<SubsetMetrics>,
}

/// The intact model plus one run per ablation setting.
pub fn ablate(spec: &ExperimentSpec, settings: &[Ablation], out: &Path) -> Result<Vec<AblationRow>> {
    for a in settings {
        a.validate()?;
    }
    let mut all = vec![Ablation::intact()];
    all.extend(settings.iter().filter(|a| !a.disabled.is_empty()).cloned());
    let mut rows = Vec::new();
    for a in all {
        let mut s = spec.clone();
        s.run.ablation = a.clone();
        let dir_name = if a.disabled.is_empty() {
            "intact".to_string()
        } else {
            let parts: Vec<String> = a.disabled.iter().map(|c| c.label().to_lowercase()).collect();
            format!("wo-{}", parts.join("-"))
        };
        let RunOutcome::Finished(summary, _) = run_experiment(&s, &out.join(dir_name), RunOptions::default())? else {
            unreachable!("runs without a stop request always finish");
        };
        rows.push(AblationRow {
            label: a.label(),
            disabled: a,
            final_accuracy: summary.final_accuracy,
            subsets: summary.analogous,
        });
    }
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

/// The six single-component ablations in table order.
pub fn standard_ablations() -> Vec<Ablation> {
    Component::ALL.into_iter().map(Ablation::without).collect()
}
