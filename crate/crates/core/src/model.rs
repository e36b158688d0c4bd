//! The trainable model (encoder, linear head, projector) and its frozen copy.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::data::{RelationId, Sample};
use crate::encoder::{
    Backbone, BackboneKind, BoundEncoder, EncoderState, Representation, TokenVocab, ToyBackbone, TransformerBackbone,
};
use crate::error::{Error, Result};
use crate::heads::{self, BoundProjector, LinearClassifier, Projector};
use crate::tape::{Graph, Var};
use crate::tensor::{self, Tensor};

/// Combined relation prototypes `p_r`, keyed by relation.
pub type Prototypes = BTreeMap<RelationId, Representation>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderState,
    pub classifier: LinearClassifier,
    pub projector: Projector,
}

/// Model parameters registered as graph leaves.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub classifier: Var,
    pub projector: BoundProjector,
}

impl BoundModel {
    /// Leaves in the same order as [`Model::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.push(self.classifier);
        v.extend(self.projector.vars());
        v
    }
}

/// Which learning rate a parameter tensor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

impl Model {
    /// Fresh model over `vocab`. A transformer checkpoint replaces both vocabulary and backbone.
    pub fn new<R: Rng + ?Sized>(vocab: TokenVocab, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.hidden_dim;
        let (vocab, backbone) = match (config.backbone, &config.checkpoint) {
            (BackboneKind::Toy, None) => {
                let b = ToyBackbone::new(vocab.len(), d, rng);
                (vocab, Backbone::Toy(b))
            }
            (BackboneKind::Toy, Some(_)) => {
                return Err(Error::Config("checkpoints are only supported for the transformer backbone".into()))
            }
            (BackboneKind::Transformer, None) => {
                let b = TransformerBackbone::new(vocab.len(), d, config.transformer, rng);
                (vocab, Backbone::Transformer(b))
            }
            (BackboneKind::Transformer, Some(path)) => {
                let ckpt = TransformerBackbone::load_checkpoint(path)?;
                (ckpt.vocab, Backbone::Transformer(ckpt.backbone))
            }
        };
        let encoder = EncoderState::new(vocab, backbone, rng);
        let d = encoder.hidden_dim();
        Ok(Self {
            encoder,
            classifier: LinearClassifier::new(d),
            projector: Projector::new(d, config.projection_dim, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g),
            classifier: g.leaf(self.classifier.weights.clone()),
            projector: self.projector.bind(g),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.push(&mut self.classifier.weights);
        t.extend(self.projector.tensors_mut());
        t
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let backbone = self.encoder.backbone_tensor_count();
        let total = self.encoder.tensors().len() + 1 + self.projector.tensors().len();
        (0..total)
            .map(|i| if i < backbone { ParamGroup::Backbone } else { ParamGroup::Head })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.classifier.weights.is_finite()
            && self.projector.tensors().iter().all(|t| t.is_finite())
    }

    pub fn relations(&self) -> &[RelationId] {
        &self.classifier.relations
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        if model.classifier.dim() != model.encoder.hidden_dim() || model.projector.input_dim() != model.encoder.hidden_dim() {
            return Err(Error::Dimension {
                expected: model.encoder.hidden_dim(),
                got: model.classifier.dim(),
            });
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Projected, normalized prototypes in classifier row order.
    pub fn project_prototypes(&self, prototypes: &Prototypes) -> Result<Vec<Representation>> {
        self.classifier
            .relations
            .iter()
            .map(|r| {
                let p = prototypes
                    .get(r)
                    .ok_or_else(|| Error::State(format!("no prototype for relation {r}")))?;
                self.projector.project(p)
            })
            .collect()
    }

    /// Linear and contrastive probabilities over classifier rows for one sample.
    pub fn probabilities(&self, sample: &Sample, projected: Option<&[Representation]>) -> Result<ModelOutput> {
        let h = self.encoder.encode(sample)?;
        let linear = self.classifier.probs(&h)?;
        let contrastive = match projected {
            Some(z_protos) => {
                let z = self.projector.project(&h)?;
                Some(heads::contrastive_probs(&z, z_protos, self.classifier.len())?)
            }
            None => None,
        };
        Ok(ModelOutput {
            representation: h,
            linear,
            contrastive,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub representation: Representation,
    pub linear: Vec<f64>,
    pub contrastive: Option<Vec<f64>>,
}

/// Immutable copy of the model at the end of a task, plus that task's prototypes.
#[derive(Debug)]
pub struct Frozen {
    pub model: Model,
    pub prototypes: Prototypes,
    projected: Vec<Representation>,
}

/// Shared handle to a frozen model.
pub type Snapshot = Arc<Frozen>;

impl Frozen {
    pub fn new(model: Model, prototypes: Prototypes) -> Result<Snapshot> {
        let projected = model.project_prototypes(&prototypes)?;
        Ok(Arc::new(Self {
            model,
            prototypes,
            projected,
        }))
    }

    pub fn relations(&self) -> &[RelationId] {
        self.model.relations()
    }

    /// Teacher probabilities over the frozen relation set.
    pub fn teacher(&self, sample: &Sample) -> Result<ModelOutput> {
        self.model.probabilities(sample, Some(&self.projected))
    }
}

/// Cosine similarity matrix between prototypes, in the given relation order.
pub fn similarity_matrix(prototypes: &Prototypes, relations: &[RelationId]) -> Result<Vec<Vec<f64>>> {
    let vectors = relations
        .iter()
        .map(|r| {
            prototypes
                .get(r)
                .ok_or_else(|| Error::State(format!("no prototype for relation {r}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vectors
        .iter()
        .map(|a| vectors.iter().map(|b| tensor::cosine(a, b)).collect())
        .collect())
}
