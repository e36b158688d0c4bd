use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{
    build_task_sequence, build_task_sequence_from_division, generate_synthetic_sequence, ingest_corpus,
    read_task_division, CorpusFormat, IngestOptions, RelationId, SplitRatio, SyntheticSpec, TaskSequence,
};
use crate::error::{Error, Result};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "CREX_OUTPUT_ROOT";

/// Where task sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated corpus; each permutation offsets the generator seed.
    Synthetic(SyntheticSpec),
    /// Raw corpus split into tasks with the permutation seed.
    Corpus(CorpusSource),
    /// A fixed task sequence written by `ingest`.
    Sequence { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Published task division (task index -> relation names).
    #[serde(default)]
    pub division: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitRatio,
    #[serde(default = "default_true")]
    pub drop_no_relation: bool,
}

fn default_tasks() -> usize {
    10
}

fn default_true() -> bool {
    true
}

fn default_permutations() -> usize {
    5
}

/// A full experiment: hyperparameters, data source and the permutation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Hyperparameter profile the `run` table is layered on (`fewrel` or `tacred`).
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub run: RunConfig,
    pub dataset: DatasetSource,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Explicit permutation seeds; defaults to `run.seed, run.seed + 1, ...`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn synthetic(run: RunConfig, synthetic: SyntheticSpec, permutations: usize) -> Self {
        Self {
            profile: None,
            run,
            dataset: DatasetSource::Synthetic(synthetic),
            permutations,
            seeds: Vec::new(),
            output_dir: None,
        }
    }

    /// Parses TOML, layering the `run` table over the named profile.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid experiment file: {e}")))?;
        Self::from_table(value)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        let profile = match table.get("profile") {
            Some(toml::Value::String(p)) => Some(p.clone()),
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => None,
        };
        let base = match &profile {
            Some(p) => RunConfig::profile(p)?,
            None => RunConfig::default(),
        };
        let mut run = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(overrides) = table.remove("run") {
            let toml::Value::Table(overrides) = overrides else {
                return Err(Error::Config("`run` must be a table".into()));
            };
            merge(&mut run, overrides);
        }
        table.insert("run".into(), toml::Value::Table(run));
        let spec: ExperimentSpec = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid experiment file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides; values parse as TOML, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        // profile already applied; keep the layered values as they are
        table.remove("profile");
        let mut spec = Self::from_table(table)?;
        spec.profile = self.profile.clone();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.seeds.is_empty() && self.permutations == 0 {
            return Err(Error::Config("permutations must be at least 1".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate(),
            DatasetSource::Corpus(c) if c.tasks == 0 => Err(Error::Config("corpus.tasks must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Seeds of every permutation, in order.
    pub fn permutation_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.permutations as u64).map(|i| self.run.seed.wrapping_add(i)).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// SHA-256 over the canonical JSON of everything except the output location.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// CLI value, then spec value, then `$CREX_OUTPUT_ROOT/run-<hash>`, then `runs/run-<hash>`.
    pub fn resolve_output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let name = format!("run-{}", &self.config_hash()[..12]);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(name),
            None => PathBuf::from("runs").join(name),
        }
    }

    /// Builds the task sequence of one permutation, plus any known analogous pairs.
    pub fn build_sequence(&self, seed: u64) -> Result<(TaskSequence, Vec<(RelationId, RelationId)>)> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                let spec = SyntheticSpec {
                    seed: s.seed.wrapping_add(seed),
                    ..s.clone()
                };
                let corpus = generate_synthetic_sequence(&spec)?;
                Ok((corpus.sequence, corpus.analogous_pairs))
            }
            DatasetSource::Corpus(c) => {
                let options = IngestOptions {
                    drop_no_relation: c.drop_no_relation,
                };
                let corpus = ingest_corpus(&c.path, c.format, &options)?;
                let sequence = match &c.division {
                    Some(d) => build_task_sequence_from_division(&corpus, &read_task_division(d)?, seed, c.split)?,
                    None => build_task_sequence(&corpus, c.tasks, seed, c.split)?,
                };
                Ok((sequence, Vec::new()))
            }
            DatasetSource::Sequence { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok((TaskSequence::from_json(&text)?, Vec::new()))
            }
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
profile = "tacred"
permutations = 2

[run]
memory_size = 5
alpha = 0.4

[run.optimizer]
new_task_epochs = 3

[dataset]
kind = "synthetic"
relations = 4
tasks = 2
"#;

    #[test]
    fn profile_then_overrides() {
        let spec = ExperimentSpec::from_toml_str(BASIC).unwrap();
        assert_eq!(spec.run.alpha, 0.4);
        assert_eq!(spec.run.gamma, 2.0);
        assert_eq!(spec.run.memory_size, 5);
        assert_eq!(spec.run.optimizer.new_task_epochs, 3);
        assert_eq!(spec.run.optimizer.replay_epochs, 10);
        assert_eq!(spec.permutation_seeds(), vec![0, 1]);
        let DatasetSource::Synthetic(s) = &spec.dataset else { panic!() };
        assert_eq!((s.relations, s.tasks, s.samples_per_relation), (4, 2, 50));
    }

    #[test]
    fn round_trip_and_hash() {
        let spec = ExperimentSpec::from_toml_str(BASIC).unwrap();
        let back = ExperimentSpec::from_toml_str(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back.run, spec.run);
        assert_eq!(back.config_hash(), spec.config_hash());
        let mut moved = spec.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.config_hash(), spec.config_hash());
        let changed = spec.with_overrides(&["run.beta=0.9".into()]).unwrap();
        assert_eq!(changed.run.beta, 0.9);
        assert_ne!(changed.config_hash(), spec.config_hash());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let both = BASIC.replace("alpha = 0.4", "alpha = 0.4\nablation = [\"lm\", \"cm\"]");
        assert!(matches!(ExperimentSpec::from_toml_str(&both), Err(Error::Config(_))));
        let unknown = BASIC.replace("alpha = 0.4", "alhpa = 0.4");
        assert!(matches!(ExperimentSpec::from_toml_str(&unknown), Err(Error::Config(_))));
        let spec = ExperimentSpec::from_toml_str(BASIC).unwrap();
        assert!(spec.with_overrides(&["run.memory_size=0".into()]).is_err());
        assert!(spec.with_overrides(&["nonsense".into()]).is_err());
    }
}
