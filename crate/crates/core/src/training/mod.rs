//! New-task training, typical-sample memory, and focal-distillation replay.

pub mod losses;
mod optim;

use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ParamGroupRates, RunConfig};
use crate::data::{RelationId, Sample, Task};
use crate::encoder::TokenVocab;
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::memory::{self, MemoryStore, PrototypeStore};
use crate::model::{Frozen, Model, ParamGroup, Prototypes, Snapshot};
use crate::tape::Graph;
use crate::tensor;

pub use losses::{LossBreakdown, LossParams, ReplayInputs, TeacherOutput};
pub use optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NewTask,
    Replay,
}

/// One optimizer step, as written to the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    /// Size of the replay set the batch was drawn from (training set size for new-task steps).
    pub pool_size: usize,
    pub losses: LossBreakdown,
}

/// What a finished task leaves behind besides the updated learner.
#[derive(Debug, Clone)]
pub struct TaskReport {
    pub task: usize,
    pub steps: Vec<StepRecord>,
    /// Prototypes after replay (or first-learning means without replay).
    pub prototypes: Prototypes,
}

// Stream ids for the per-task generators.
const STREAM_EXPAND: u64 = 1;
const STREAM_NEW_TASK: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_REPLAY: u64 = 5;
const STREAMS_PER_TASK: u64 = 8;

/// Generator for `(seed, task, phase)`. Independent of anything run before, so a
/// resumed sequence draws the same numbers as an uninterrupted one.
pub fn phase_rng(seed: u64, task: usize, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + task as u64 * STREAMS_PER_TASK + phase);
    rng
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Model, memory and prototype state carried across a task sequence.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: RunConfig,
    pub model: Model,
    pub memory: MemoryStore,
    pub prototypes: PrototypeStore,
    /// Prototypes at the end of the most recent task.
    pub final_prototypes: Prototypes,
    pub tasks_done: usize,
    snapshot: Option<Snapshot>,
}

impl Learner {
    pub fn new(config: RunConfig, vocab: TokenVocab) -> Result<Self> {
        config.validate()?;
        let model = Model::new(vocab, &config.encoder, &mut init_rng(config.seed))?;
        let prototypes = PrototypeStore::new(config.effective_beta())?;
        Ok(Self {
            config,
            model,
            memory: MemoryStore::new(),
            prototypes,
            final_prototypes: Prototypes::new(),
            tasks_done: 0,
            snapshot: None,
        })
    }

    /// Rebuilds a learner from persisted end-of-task state.
    pub fn restore(
        config: RunConfig,
        model: Model,
        memory: MemoryStore,
        prototypes: PrototypeStore,
        final_prototypes: Prototypes,
        tasks_done: usize,
    ) -> Result<Self> {
        config.validate()?;
        let snapshot = if tasks_done > 0 && config.replay {
            Some(Frozen::new(model.clone(), final_prototypes.clone())?)
        } else {
            None
        };
        Ok(Self {
            config,
            model,
            memory,
            prototypes,
            final_prototypes,
            tasks_done,
            snapshot,
        })
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    /// Prediction weight actually in effect.
    pub fn alpha(&self) -> f64 {
        if self.config.replay {
            self.config.effective_alpha()
        } else {
            1.0
        }
    }

    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Predictor::new(&self.model, &self.final_prototypes, self.alpha())
    }

    fn learning_rates(&self) -> Vec<f64> {
        let rates = ParamGroupRates::from_config(&self.config);
        self.model
            .param_groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::Backbone => rates.backbone,
                ParamGroup::Head => rates.head,
            })
            .collect()
    }

    fn loss_params(&self) -> LossParams {
        LossParams::from_config(&self.config)
    }

    /// Runs one task: expansion, new-task training, selection, prototypes,
    /// augmentation, replay, and the snapshot for the next task.
    pub fn run_task(&mut self, task: &Task) -> Result<TaskReport> {
        let k = task.index;
        if k != self.tasks_done {
            return Err(Error::State(format!(
                "expected task {} next, got task {k}",
                self.tasks_done
            )));
        }
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {k} has no training samples")));
        }
        info!("task {k}: {} relations, {} training samples", task.relations.len(), task.train.len());
        let seed = self.config.seed;
        self.model
            .classifier
            .expand(&task.relations, &mut phase_rng(seed, k, STREAM_EXPAND))?;

        let mut steps = self.train_new_task(task)?;

        for &r in &task.relations {
            let samples = task.train_of(r);
            if samples.is_empty() {
                return Err(Error::Data(format!("relation {r} has no training samples in task {k}")));
            }
            self.prototypes.capture_static(&self.model.encoder, r, &samples)?;
        }

        let prototypes = if self.config.replay {
            let mut select_rng = phase_rng(seed, k, STREAM_SELECT);
            for &r in &task.relations {
                let samples = task.train_of(r);
                let picked = memory::select_typical(&self.model.encoder, &samples, self.config.memory_size, select_rng.random())?;
                self.memory.insert(r, picked)?;
            }
            steps.extend(self.replay(k)?);
            let prototypes = self.prototypes.combined_all(&self.model.encoder, &self.memory)?;
            self.snapshot = Some(Frozen::new(self.model.clone(), prototypes.clone())?);
            prototypes
        } else {
            self.prototypes.statics().clone()
        };

        if !self.model.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after task {k}")));
        }
        self.final_prototypes = prototypes.clone();
        self.tasks_done += 1;
        Ok(TaskReport {
            task: k,
            steps,
            prototypes,
        })
    }

    fn train_new_task(&mut self, task: &Task) -> Result<Vec<StepRecord>> {
        let k = task.index;
        let params = self.loss_params();
        let mut rng = phase_rng(self.config.seed, k, STREAM_NEW_TASK);
        let mut opt = Adam::new(self.learning_rates());
        let mut order: Vec<&Sample> = task.train.iter().collect();
        let mut steps = Vec::new();
        for epoch in 0..self.config.optimizer.new_task_epochs {
            let targets = if self.config.projector_in_new_task {
                Some(self.new_task_prototypes(task)?)
            } else {
                None
            };
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.optimizer.batch_size) {
                let mut g = Graph::new();
                let bound = self.model.bind(&mut g);
                let (loss, breakdown) =
                    losses::new_task_loss(&mut g, &self.model, &bound, batch, &params, targets.as_ref())?;
                self.apply(&mut opt, &g, loss, &bound.vars(), &breakdown, k, Phase::NewTask, epoch)?;
                steps.push(StepRecord {
                    task: k,
                    phase: Phase::NewTask,
                    epoch,
                    step: steps.len(),
                    batch_size: batch.len(),
                    pool_size: order.len(),
                    losses: breakdown,
                });
            }
        }
        Ok(steps)
    }

    /// Old relations keep their final prototypes; new ones use current class means.
    fn new_task_prototypes(&self, task: &Task) -> Result<Prototypes> {
        let mut out = self.final_prototypes.clone();
        for &r in &task.relations {
            let reprs = self.model.encoder.encode_all(task.train_of(r))?;
            let refs: Vec<&[f64]> = reprs.iter().map(Vec::as_slice).collect();
            out.insert(r, tensor::mean_of(&refs));
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        opt: &mut Adam,
        g: &Graph,
        loss: crate::tape::Var,
        vars: &[crate::tape::Var],
        breakdown: &LossBreakdown,
        task: usize,
        phase: Phase,
        epoch: usize,
    ) -> Result<()> {
        if !breakdown.is_finite() || !g.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in task {task}, {phase:?} epoch {epoch}: {breakdown:?}"
            )));
        }
        let mut grads = g.backward(loss);
        let grads: Vec<_> = vars.iter().map(|v| grads.take(*v)).collect();
        opt.step(self.model.tensors_mut(), &grads);
        Ok(())
    }

    fn replay_set(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        if self.config.uses_augmentation() && self.memory.num_relations() >= 2 {
            memory::augment(&self.memory, rng)
        } else {
            Ok(self.memory.originals())
        }
    }

    fn teacher_outputs(&self, samples: &[Sample], cache: &mut HashMap<String, TeacherOutput>) -> Result<()> {
        let Some(snapshot) = &self.snapshot else {
            return Ok(());
        };
        for s in samples {
            if cache.contains_key(&s.id) {
                continue;
            }
            let out = snapshot.teacher(s)?;
            let contrastive = out.contrastive.unwrap_or_default();
            cache.insert(
                s.id.clone(),
                TeacherOutput {
                    linear: out.linear,
                    contrastive,
                },
            );
        }
        Ok(())
    }

    fn replay(&mut self, k: usize) -> Result<Vec<StepRecord>> {
        let params = self.loss_params();
        let old_relations: Vec<RelationId> = self
            .snapshot
            .as_ref()
            .map(|s| s.relations().to_vec())
            .unwrap_or_default();
        let mut augment_rng = phase_rng(self.config.seed, k, STREAM_AUGMENT);
        let mut rng = phase_rng(self.config.seed, k, STREAM_REPLAY);
        let mut opt = Adam::new(self.learning_rates());
        let mut teacher = HashMap::new();
        let mut pool = self.replay_set(&mut augment_rng)?;
        let distill = params.fkd && !old_relations.is_empty();
        if distill {
            self.teacher_outputs(&pool, &mut teacher)?;
        }
        debug!("task {k}: replay set of {} samples", pool.len());

        let mut steps = Vec::new();
        for epoch in 0..self.config.optimizer.replay_epochs {
            if epoch > 0 && self.config.regenerate_augmentation {
                pool = self.replay_set(&mut augment_rng)?;
                if distill {
                    self.teacher_outputs(&pool, &mut teacher)?;
                }
            }
            let prototypes = self.prototypes.combined_all(&self.model.encoder, &self.memory)?;
            let mut order: Vec<&Sample> = pool.iter().collect();
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.optimizer.batch_size) {
                let inputs = ReplayInputs {
                    params,
                    prototypes: &prototypes,
                    old_relations: &old_relations,
                    teacher: &teacher,
                };
                let mut g = Graph::new();
                let bound = self.model.bind(&mut g);
                let (loss, breakdown) = losses::replay_loss(&mut g, &self.model, &bound, batch, &inputs)?;
                self.apply(&mut opt, &g, loss, &bound.vars(), &breakdown, k, Phase::Replay, epoch)?;
                steps.push(StepRecord {
                    task: k,
                    phase: Phase::Replay,
                    epoch,
                    step: steps.len(),
                    batch_size: batch.len(),
                    pool_size: pool.len(),
                    losses: breakdown,
                });
            }
        }
        Ok(steps)
    }
}
