//! Run hyperparameters, ablation switches and dataset profiles.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneKind, TransformerConfig};
use crate::error::{Error, Result};

/// Removable model components, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    /// Focal knowledge distillation.
    Fkd,
    /// Linear method (classifier loss and linear prediction).
    Lm,
    /// Contrastive method (prototype loss and prototype prediction).
    Cm,
    /// Memory augmentation.
    Ma,
    /// Dynamic prototypes (mean over current exemplar encodings).
    Dp,
    /// Static prototypes (mean over all training samples at first learning).
    Sp,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Fkd,
        Component::Lm,
        Component::Cm,
        Component::Ma,
        Component::Dp,
        Component::Sp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Fkd => "FKD",
            Component::Lm => "LM",
            Component::Cm => "CM",
            Component::Ma => "MA",
            Component::Dp => "DP",
            Component::Sp => "SP",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown component `{s}` (expected FKD, LM, CM, MA, DP or SP)")))
    }
}

/// Set of disabled components. Empty means the intact model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ablation {
    pub disabled: BTreeSet<Component>,
}

impl Ablation {
    pub fn intact() -> Self {
        Self::default()
    }

    pub fn without(c: Component) -> Self {
        Self {
            disabled: BTreeSet::from([c]),
        }
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.disabled.contains(&c)
    }

    pub fn label(&self) -> String {
        if self.disabled.is_empty() {
            "intact".to_string()
        } else {
            let names: Vec<&str> = self.disabled.iter().map(|c| c.label()).collect();
            format!("w/o {}", names.join("+"))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled(Component::Lm) && !self.enabled(Component::Cm) {
            return Err(Error::Config("cannot disable both LM and CM".into()));
        }
        if !self.enabled(Component::Dp) && !self.enabled(Component::Sp) {
            return Err(Error::Config("cannot disable both DP and SP".into()));
        }
        Ok(())
    }
}

/// Which probability `P(y|x)` enters the focal term `(1 - P)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Linear,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Learning rate for backbone tensors.
    pub lr_backbone: f64,
    /// Learning rate for fusion, classifier and projector tensors.
    pub lr_heads: f64,
    pub new_task_epochs: usize,
    pub replay_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_heads: 1e-3,
            new_task_epochs: 10,
            replay_epochs: 10,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    /// Settings for transformer runs: small backbone rate, larger head rate.
    pub fn transformer() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_heads: 1e-3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub transformer: TransformerConfig,
    /// Transformer checkpoint (vocabulary + weights) to start from.
    pub checkpoint: Option<PathBuf>,
    /// Train backbone tensors; when false only fusion and heads are updated.
    pub finetune_backbone: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            hidden_dim: 64,
            projection_dim: 64,
            transformer: TransformerConfig::default(),
            checkpoint: None,
            finetune_backbone: true,
        }
    }
}

/// Learning rates resolved per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroupRates {
    pub backbone: f64,
    pub head: f64,
}

impl ParamGroupRates {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            backbone: if c.encoder.finetune_backbone { c.optimizer.lr_backbone } else { 0.0 },
            head: c.optimizer.lr_heads,
        }
    }
}

/// Everything that determines one training run over a task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Exemplars stored per relation.
    pub memory_size: usize,
    /// Weight of the linear probability at prediction time.
    pub alpha: f64,
    /// Weight of the dynamic part of a prototype.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau1: f64,
    /// Temperature of the prototype similarity in focal weights.
    pub tau2: f64,
    /// Triplet term weight.
    pub mu: f64,
    /// Triplet margin.
    pub omega: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Contrastive distillation weight.
    pub lambda1: f64,
    /// Linear distillation weight.
    pub lambda2: f64,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    pub ablation: Ablation,
    /// Run the memory pipeline (selection, prototypes, augmentation, replay).
    /// When false the run is the plain sequential fine-tuning baseline.
    pub replay: bool,
    pub focal_probability: Variant,
    /// Redraw augmented samples every replay epoch instead of once per task.
    pub regenerate_augmentation: bool,
    /// Add the contrastive term (prototypes = current-task class means) to new-task training.
    pub projector_in_new_task: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::fewrel()
    }
}

impl RunConfig {
    /// FewRel hyperparameters with desk-scale encoder settings.
    pub fn fewrel() -> Self {
        Self {
            memory_size: 10,
            alpha: 0.5,
            beta: 0.5,
            tau1: 0.1,
            tau2: 0.5,
            mu: 0.5,
            omega: 0.1,
            gamma: 1.25,
            lambda1: 0.5,
            lambda2: 1.1,
            optimizer: OptimizerConfig::default(),
            encoder: EncoderConfig::default(),
            ablation: Ablation::intact(),
            replay: true,
            focal_probability: Variant::Linear,
            regenerate_augmentation: false,
            projector_in_new_task: false,
            seed: 0,
        }
    }

    pub fn tacred() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.2,
            mu: 0.8,
            omega: 0.15,
            gamma: 2.0,
            lambda1: 0.5,
            lambda2: 0.7,
            ..Self::fewrel()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fewrel" => Ok(Self::fewrel()),
            "tacred" => Ok(Self::tacred()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.memory_size == 0 {
            return bad("memory_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return bad("tau1 and tau2 must be positive");
        }
        let non_negative = [self.mu, self.omega, self.gamma, self.lambda1, self.lambda2];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("mu, omega, gamma, lambda1, lambda2 must be finite and non-negative");
        }
        let o = &self.optimizer;
        if !(o.lr_backbone > 0.0 && o.lr_heads > 0.0) || o.batch_size == 0 {
            return bad("learning rates and batch size must be positive");
        }
        if self.encoder.hidden_dim == 0 || self.encoder.projection_dim == 0 {
            return bad("encoder dimensions must be positive");
        }
        if self.focal_probability == Variant::Contrastive && !self.uses_contrastive() {
            return bad("the contrastive focal probability needs the contrastive method");
        }
        self.ablation.validate()
    }

    pub fn uses_linear(&self) -> bool {
        self.ablation.enabled(Component::Lm)
    }

    pub fn uses_contrastive(&self) -> bool {
        self.ablation.enabled(Component::Cm)
    }

    pub fn uses_fkd(&self) -> bool {
        self.ablation.enabled(Component::Fkd)
    }

    pub fn uses_augmentation(&self) -> bool {
        self.ablation.enabled(Component::Ma)
    }

    /// Prediction weight after ablations: only-contrastive is 0, only-linear is 1.
    pub fn effective_alpha(&self) -> f64 {
        match (self.uses_linear(), self.uses_contrastive()) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            _ => self.alpha,
        }
    }

    /// Prototype blend after ablations: static-only is 0, dynamic-only is 1.
    pub fn effective_beta(&self) -> f64 {
        match (
            self.ablation.enabled(Component::Dp),
            self.ablation.enabled(Component::Sp),
        ) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            _ => self.beta,
        }
    }
}
