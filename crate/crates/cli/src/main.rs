use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crex_core::config::{Ablation, Component};
use crex_core::data::{
    build_task_sequence, build_task_sequence_from_division, ingest_corpus, read_task_division, CorpusFormat,
    IngestOptions, RelationId, SplitRatio,
};
use crex_core::eval::export_heatmap;
use crex_core::experiment::{self, ExperimentSpec, RunOptions, RunOutcome, ANALOGOUS_THRESHOLD};
use crex_core::{Error, Result};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "crex", version, about = "Continual relation extraction with analogous-relation aware replay")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw corpus and write a task sequence.
    Ingest(IngestArgs),
    /// Train and evaluate over every permutation seed.
    Run(RunArgs),
    /// Repeat a run for several memory sizes.
    SweepMemory(SweepArgs),
    /// Run the intact model and each ablation setting.
    Ablate(AblateArgs),
    /// Recompute forgetting analytics of a finished run.
    Analyze(AnalyzeArgs),
    /// Write the prototype similarity matrix of a run as CSV.
    ExportHeatmap(HeatmapArgs),
    /// Continue an interrupted run.
    Resume(ResumeArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_format, default_value = "jsonl")]
    format: CorpusFormat,
    /// Number of tasks when no division file is given.
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    /// JSON map from task index to relation names.
    #[arg(long)]
    division: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    keep_no_relation: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Experiment file; without one a small synthetic benchmark is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter profile for runs without a config file.
    #[arg(long, conflicts_with = "config")]
    profile: Option<String>,
    /// Override any field, e.g. `--set run.alpha=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => {
                let text = match &self.profile {
                    Some(p) => format!("profile = {p:?}\n[dataset]\nkind = \"synthetic\"\n"),
                    None => "[dataset]\nkind = \"synthetic\"\n".to_string(),
                };
                ExperimentSpec::from_toml_str(&text)?
            }
        };
        let mut overrides = self.overrides.clone();
        if let Some(n) = self.permutations {
            overrides.push(format!("permutations={n}"));
        }
        if let Some(m) = self.memory_size {
            overrides.push(format!("run.memory_size={m}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        spec.with_overrides(&overrides)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Run directory; defaults to the config's `output_dir` or a hash-named folder.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, hide = true)]
    stop_after_task: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    sizes: Vec<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Settings to disable, comma separated; join components with `+`.
    /// Defaults to each component on its own.
    #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
    switches: Vec<Ablation>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = ANALOGOUS_THRESHOLD)]
    threshold: f64,
    /// Print the full analysis as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Prototypes after this task; defaults to the last one.
    #[arg(long)]
    task: Option<usize>,
    /// Relation names to include, in order; defaults to every learned relation.
    #[arg(long, value_delimiter = ',')]
    relations: Vec<String>,
    /// Destination file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ResumeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Refuse to resume unless this file hashes to the run's configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_format(s: &str) -> std::result::Result<CorpusFormat, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "json_lines" | "jsonl" => Ok(CorpusFormat::JsonLines),
        "fewrel" | "few_rel" => Ok(CorpusFormat::FewRel),
        "tacred" => Ok(CorpusFormat::Tacred),
        _ => Err(format!("unknown format `{s}` (jsonl, fewrel, tacred)")),
    }
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    let mut a = Ablation::intact();
    for part in s.split('+') {
        let c: Component = part.trim().parse().map_err(|e: Error| e.to_string())?;
        a.disabled.insert(c);
    }
    a.validate().map_err(|e| e.to_string())?;
    Ok(a)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Run(a) => run(a),
        Command::SweepMemory(a) => sweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Analyze(a) => analyze(a),
        Command::ExportHeatmap(a) => heatmap(a),
        Command::Resume(a) => resume(a),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let options = IngestOptions {
        drop_no_relation: !a.keep_no_relation,
    };
    let corpus = ingest_corpus(&a.input, a.format, &options)?;
    let sequence = match &a.division {
        Some(d) => build_task_sequence_from_division(&corpus, &read_task_division(d)?, a.seed, SplitRatio::default())?,
        None => build_task_sequence(&corpus, a.tasks, a.seed, SplitRatio::default())?,
    };
    write_file(&a.output, sequence.to_json()?)?;
    println!(
        "{} samples, {} relations, {} tasks -> {}",
        corpus.len(),
        sequence.vocab().len(),
        sequence.len(),
        a.output.display()
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let spec = a.spec.load()?;
    let out = spec.resolve_output_dir(a.output.as_deref());
    info!("writing run to {}", out.display());
    let options = RunOptions {
        stop_after_task: a.stop_after_task,
    };
    report(experiment::run_experiment(&spec, &out, options)?, &out);
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<()> {
    let expected = a.config.as_deref().map(ExperimentSpec::load).transpose()?;
    report(experiment::resume(&a.run, expected.as_ref())?, &a.run);
    Ok(())
}

fn report(outcome: RunOutcome, out: &Path) {
    match &outcome {
        RunOutcome::Interrupted => println!("stopped early; continue with `crex resume --run {}`", out.display()),
        RunOutcome::AlreadyFinished(_) => println!("{} is already complete", out.display()),
        RunOutcome::Finished(..) => {}
    }
    if let Some(s) = outcome.summary() {
        println!("accuracy per task: {}", s.table_row());
        println!(
            "final: {:.1} ± {:.1}",
            100.0 * s.final_accuracy.mean,
            100.0 * s.final_accuracy.std
        );
        for subset in &s.analogous {
            println!("{}", subset.describe());
        }
    }
}

fn sweep(a: SweepArgs) -> Result<()> {
    let spec = a.spec.load()?;
    let out = spec.resolve_output_dir(a.output.as_deref());
    let r = experiment::memory_size_sweep(&spec, &a.sizes, &out)?;
    println!("memory_size,final_mean,final_std");
    for row in &r.rows {
        println!("{},{:.4},{:.4}", row.memory_size, row.final_accuracy.mean, row.final_accuracy.std);
    }
    for d in &r.differences {
        println!("{} -> {}: {:+.4}", d.from, d.to, d.difference);
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let spec = a.spec.load()?;
    let out = spec.resolve_output_dir(a.output.as_deref());
    let settings = if a.switches.is_empty() {
        experiment::standard_ablations()
    } else {
        a.switches
    };
    for row in experiment::ablate(&spec, &settings, &out)? {
        println!(
            "{:<12} {:.1} ± {:.1}",
            row.label,
            100.0 * row.final_accuracy.mean,
            100.0 * row.final_accuracy.std
        );
        for s in &row.subsets {
            println!("    {}", s.describe());
        }
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let analyses = experiment::analyze(&a.run, a.threshold)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&analyses)?);
        return Ok(());
    }
    for an in &analyses {
        println!("seed {}", an.seed);
        if let Some(r) = &an.report {
            for b in &r.bins {
                println!("  similarity {:<6} relations {:>3}  mean drop {}", b.bin.label(), b.count, fmt(b.mean_drop));
            }
        }
        for row in &an.sudden_drop {
            println!(
                "  drop {:<9} events {:>3}  max similarity {} -> {}",
                row.bin.label(),
                row.count,
                fmt(row.mean_before),
                fmt(row.mean_after)
            );
        }
        for s in &an.subsets {
            println!("  {}", s.describe());
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let manifest: experiment::Manifest =
        serde_json::from_str(&fs::read_to_string(a.run.join(experiment::MANIFEST_FILE)).map_err(|e| Error::io(&a.run, e))?)?;
    let seed = match a.seed {
        Some(s) if manifest.seeds.contains(&s) => s,
        Some(s) => return Err(Error::Config(format!("seed {s} is not part of this run"))),
        None => manifest.seeds[0],
    };
    let result = experiment::load_seed(&a.run, seed)?;
    let k = a.task.unwrap_or(result.history.len().saturating_sub(1));
    let protos = result
        .history
        .get(k)
        .ok_or_else(|| Error::Config(format!("task {k} has not been learned in this run")))?;
    let vocab = result.sequence.vocab();
    let relations: Vec<RelationId> = if a.relations.is_empty() {
        protos.keys().copied().collect()
    } else {
        a.relations
            .iter()
            .map(|n| {
                vocab
                    .get(n)
                    .filter(|r| protos.contains_key(r))
                    .ok_or_else(|| Error::Config(format!("relation `{n}` has no prototype after task {k}")))
            })
            .collect::<Result<_>>()?
    };
    let csv = export_heatmap(protos, &relations, &result.sequence)?;
    match &a.output {
        Some(p) => write_file(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
