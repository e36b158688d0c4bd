//! Loss terms built on the autodiff graph, plus the detached focal weights.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::data::{RelationId, Sample};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model, Prototypes};
use crate::tape::{Graph, Var};
use crate::tensor;

/// Per-batch values of every loss component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub new: f64,
    pub c_cls: f64,
    pub l_cls: f64,
    pub cls: f64,
    pub c_fkd: f64,
    pub l_fkd: f64,
    pub replay: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.new, self.c_cls, self.l_cls, self.cls, self.c_fkd, self.l_fkd, self.replay]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar hyperparameters and switches read by the losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub tau1: f64,
    pub tau2: f64,
    pub mu: f64,
    pub omega: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub linear: bool,
    pub contrastive: bool,
    pub fkd: bool,
    pub focal: Variant,
}

impl LossParams {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            tau1: c.tau1,
            tau2: c.tau2,
            mu: c.mu,
            omega: c.omega,
            gamma: c.gamma,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            linear: c.uses_linear(),
            contrastive: c.uses_contrastive(),
            fkd: c.uses_fkd(),
            focal: c.focal_probability,
        }
    }
}

/// Frozen-model probabilities over the previous relation set for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub linear: Vec<f64>,
    pub contrastive: Vec<f64>,
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Var {
    let logp = g.log_softmax(logits);
    let picked = g.index(logp, target);
    g.scale(picked, -1.0)
}

/// InfoNCE over `sims / tau1` plus `mu` times the hardest-negative triplet hinge.
///
/// `sims[r] = z_x . z_r`. With a single relation the triplet term is zero.
pub fn info_nce_triplet(g: &mut Graph, sims: Var, target: usize, tau1: f64, mu: f64, omega: f64) -> Var {
    let scaled = g.scale(sims, 1.0 / tau1);
    let info = cross_entropy(g, scaled, target);
    let values = g.value(sims).data().to_vec();
    let hardest = values
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    match hardest {
        None => info,
        Some(neg) => {
            let pos = g.index(sims, target);
            let neg = g.index(sims, neg);
            let gap = g.sub(neg, pos);
            let hinge = g.add_scalar(gap, omega);
            let hinge = g.relu(hinge);
            let weighted = g.scale(hinge, mu);
            g.add(info, weighted)
        }
    }
}

/// `s = softmax_j(cos(h, p_j) / tau2)` and `w = s * (1 - p_true)^gamma`.
///
/// Values only: the weights are constants for the distillation loss.
pub fn focal_weights(h: &[f64], old_prototypes: &[&[f64]], p_true: f64, tau2: f64, gamma: f64) -> Result<Vec<f64>> {
    if old_prototypes.is_empty() {
        return Err(Error::State("focal weights need at least one previous relation".into()));
    }
    let logits: Vec<f64> = old_prototypes.iter().map(|p| tensor::cosine(h, p) / tau2).collect();
    let focal = (1.0 - p_true).max(0.0).powf(gamma);
    Ok(tensor::softmax(&logits).into_iter().map(|s| s * focal).collect())
}

/// `-sum_j a_j log_probs_j` for constant targets `a` (zero-padded to the student width).
pub fn distillation(g: &mut Graph, log_probs: Var, targets: &[f64]) -> Var {
    let width = g.value(log_probs).len();
    let mut padded = targets.to_vec();
    padded.resize(width, 0.0);
    let a = g.constant_vec(&padded);
    let d = g.dot(log_probs, a);
    g.scale(d, -1.0)
}

fn target_row(model: &Model, sample: &Sample) -> Result<usize> {
    model.classifier.row_of(sample.relation).ok_or_else(|| {
        Error::State(format!(
            "sample {} has relation {} unseen by the classifier",
            sample.id, sample.relation
        ))
    })
}

/// Projected prototypes `z_r` for every classifier row; gradient reaches the projector only.
pub fn projected_prototypes(g: &mut Graph, model: &Model, bound: &BoundModel, prototypes: &Prototypes) -> Result<Vec<Var>> {
    model
        .classifier
        .relations
        .iter()
        .map(|r| {
            let p = prototypes
                .get(r)
                .ok_or_else(|| Error::State(format!("no prototype for relation {r}")))?;
            let c = g.constant_vec(p);
            model.projector.project_in(g, &bound.projector, c)
        })
        .collect()
}

fn similarities(g: &mut Graph, z: Var, protos: &[Var]) -> Var {
    let sims: Vec<Var> = protos.iter().map(|&p| g.dot(z, p)).collect();
    g.concat(&sims)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        None
    } else {
        Some(g.mean(terms))
    }
}

/// Cross-entropy of the linear head over all seen relations (new-task objective).
///
/// With `contrastive` set, adds the contrastive term against those prototypes.
pub fn new_task_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    batch: &[&Sample],
    params: &LossParams,
    contrastive: Option<&Prototypes>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::State("empty batch".into()));
    }
    let protos = match contrastive {
        Some(p) => Some(projected_prototypes(g, model, bound, p)?),
        None => None,
    };
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let y = target_row(model, s)?;
        let h = model.encoder.encode_in(g, &bound.encoder, s)?;
        let logits = g.matvec(bound.classifier, h);
        let mut term = cross_entropy(g, logits, y);
        if let Some(protos) = &protos {
            let z = model.projector.project_in(g, &bound.projector, h)?;
            let sims = similarities(g, z, protos);
            let c = info_nce_triplet(g, sims, y, params.tau1, params.mu, params.omega);
            term = g.add(term, c);
        }
        terms.push(term);
    }
    let loss = g.mean(&terms);
    let value = g.scalar(loss);
    Ok((
        loss,
        LossBreakdown {
            new: value,
            ..LossBreakdown::default()
        },
    ))
}

/// Constant inputs to the replay objective.
#[derive(Debug, Clone, Copy)]
pub struct ReplayInputs<'a> {
    pub params: LossParams,
    /// Current combined prototypes for every seen relation.
    pub prototypes: &'a Prototypes,
    /// Relations of the previous model, in its classifier order. Empty on the first task.
    pub old_relations: &'a [RelationId],
    /// Frozen-model outputs keyed by sample id.
    pub teacher: &'a HashMap<String, TeacherOutput>,
}

/// `L_replay = L_c_cls + L_l_cls + lambda1 L_c_fkd + lambda2 L_l_fkd` over a replay batch.
pub fn replay_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    batch: &[&Sample],
    inputs: &ReplayInputs<'_>,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::State("empty batch".into()));
    }
    let p = inputs.params;
    let old = inputs.old_relations;
    if model.classifier.relations.len() < old.len() || model.classifier.relations[..old.len()] != *old {
        return Err(Error::State("classifier rows do not extend the previous relation set".into()));
    }
    let distill = p.fkd && !old.is_empty();
    let old_prototypes: Vec<&[f64]> = if distill {
        old.iter()
            .map(|r| {
                inputs
                    .prototypes
                    .get(r)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::State(format!("no prototype for relation {r}")))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let protos = if p.contrastive {
        Some(projected_prototypes(g, model, bound, inputs.prototypes)?)
    } else {
        None
    };

    let (mut c_cls, mut l_cls, mut c_fkd, mut l_fkd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in batch {
        let y = target_row(model, s)?;
        let h = model.encoder.encode_in(g, &bound.encoder, s)?;
        let logits = g.matvec(bound.classifier, h);
        let linear_logp = g.log_softmax(logits);
        if p.linear {
            let picked = g.index(linear_logp, y);
            l_cls.push(g.scale(picked, -1.0));
        }
        let mut contrastive_logp = None;
        if let Some(protos) = &protos {
            let z = model.projector.project_in(g, &bound.projector, h)?;
            let sims = similarities(g, z, protos);
            c_cls.push(info_nce_triplet(g, sims, y, p.tau1, p.mu, p.omega));
            contrastive_logp = Some(g.log_softmax(sims));
        }
        if !distill {
            continue;
        }
        let teacher = inputs
            .teacher
            .get(&s.id)
            .ok_or_else(|| Error::State(format!("no frozen-model output for sample {}", s.id)))?;
        if teacher.linear.len() != old.len() || teacher.contrastive.len() != old.len() {
            return Err(Error::Dimension {
                expected: old.len(),
                got: teacher.linear.len(),
            });
        }
        let p_true = match (p.focal, contrastive_logp) {
            (Variant::Contrastive, Some(lp)) => g.value(lp).data()[y].exp(),
            _ => g.value(linear_logp).data()[y].exp(),
        };
        let w = focal_weights(g.value(h).data(), &old_prototypes, p_true, p.tau2, p.gamma)?;
        if p.linear {
            let a: Vec<f64> = w.iter().zip(&teacher.linear).map(|(w, t)| w * t).collect();
            l_fkd.push(distillation(g, linear_logp, &a));
        }
        if let Some(lp) = contrastive_logp {
            let a: Vec<f64> = w.iter().zip(&teacher.contrastive).map(|(w, t)| w * t).collect();
            c_fkd.push(distillation(g, lp, &a));
        }
    }

    let n = batch.len() as f64;
    let mut parts = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut add = |g: &mut Graph, terms: &[Var], weight: f64, slot: &mut f64| {
        // component means are taken over the whole batch
        if let Some(sum) = mean_of(g, terms) {
            let mean = g.scale(sum, terms.len() as f64 / n);
            *slot = g.scalar(mean);
            parts.push(g.scale(mean, weight));
        }
    };
    add(g, &c_cls, 1.0, &mut breakdown.c_cls);
    add(g, &l_cls, 1.0, &mut breakdown.l_cls);
    add(g, &c_fkd, p.lambda1, &mut breakdown.c_fkd);
    add(g, &l_fkd, p.lambda2, &mut breakdown.l_fkd);
    breakdown.cls = breakdown.c_cls + breakdown.l_cls;
    let total = if parts.is_empty() { g.constant(0.0) } else { g.sum(&parts) };
    breakdown.replay = g.scalar(total);
    Ok((total, breakdown))
}
