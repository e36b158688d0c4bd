use crex_core::config::RunConfig;
use crex_core::data::SyntheticSpec;
use crex_core::experiment::{resume, run_experiment, ExperimentSpec, RunOptions, RunOutcome};
use crex_core::Error;

fn small_spec() -> ExperimentSpec {
    let mut run = RunConfig::fewrel();
    run.encoder.hidden_dim = 8;
    run.encoder.projection_dim = 8;
    run.optimizer.new_task_epochs = 2;
    run.optimizer.replay_epochs = 2;
    run.memory_size = 3;
    let data = SyntheticSpec {
        relations: 6,
        tasks: 3,
        samples_per_relation: 20,
        ..SyntheticSpec::default()
    };
    ExperimentSpec::synthetic(run, data, 2)
}

fn accuracy_files(dir: &std::path::Path, seeds: &[u64]) -> Vec<String> {
    seeds
        .iter()
        .map(|s| std::fs::read_to_string(dir.join(format!("seed-{s}/accuracy.json"))).unwrap())
        .collect()
}

#[test]
fn run_writes_summary_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let outcome = run_experiment(&spec, tmp.path(), RunOptions::default()).unwrap();
    let summary = outcome.summary().unwrap();
    assert_eq!(summary.per_task.len(), 3);
    assert_eq!(summary.seeds, vec![0, 1]);
    for f in ["summary.json", "summary.csv", "manifest.json", "experiment.toml", "seed-0/accuracy.csv", "seed-1/task-2/model.json", "seed-0/task-0/steps.jsonl"] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let again = run_experiment(&spec, tmp.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(again, Error::Config(_)));
}

#[test]
fn interrupted_run_resumes_to_identical_results() {
    let spec = small_spec();
    let full = tempfile::tempdir().unwrap();
    run_experiment(&spec, full.path(), RunOptions::default()).unwrap();

    let part = tempfile::tempdir().unwrap();
    let stopped = run_experiment(&spec, part.path(), RunOptions { stop_after_task: Some(0) }).unwrap();
    assert!(matches!(stopped, RunOutcome::Interrupted));
    let resumed = resume(part.path(), Some(&spec)).unwrap();
    assert!(matches!(resumed, RunOutcome::Finished(..)));
    assert_eq!(accuracy_files(full.path(), &[0, 1]), accuracy_files(part.path(), &[0, 1]));

    assert!(matches!(resume(part.path(), None).unwrap(), RunOutcome::AlreadyFinished(_)));
    let altered = spec.with_overrides(&["run.alpha=0.3".into()]).unwrap();
    assert!(matches!(resume(part.path(), Some(&altered)), Err(Error::Config(_))));
}

#[test]
fn corrupt_snapshot_names_the_task() {
    let spec = small_spec();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec, dir.path(), RunOptions { stop_after_task: Some(1) }).unwrap();
    std::fs::write(dir.path().join("seed-0/task-1/model.json"), "{ not json").unwrap();
    match resume(dir.path(), None) {
        Err(Error::CorruptSnapshot { task, .. }) => assert_eq!(task, 1),
        other => panic!("expected a corrupt snapshot error, got {other:?}"),
    }
}
