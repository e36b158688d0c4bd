//! Expanding linear classifier and the contrastive projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RelationId;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{self, Tensor};

/// Std of newly appended classifier rows.
pub const NEW_ROW_STD: f64 = 0.02;

/// Bias-free linear softmax classifier over all seen relations.
///
/// Row `i` always belongs to `relations[i]`; expansion only appends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Tensor,
    pub relations: Vec<RelationId>,
}

impl LinearClassifier {
    pub fn new(d: usize) -> Self {
        Self {
            weights: Tensor::zeros(0, d),
            relations: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn row_of(&self, r: RelationId) -> Option<usize> {
        self.relations.iter().position(|x| *x == r)
    }

    /// Appends freshly initialized rows for `new_relations`.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_relations: &[RelationId], rng: &mut R) -> Result<()> {
        for (i, r) in new_relations.iter().enumerate() {
            if self.relations.contains(r) || new_relations[..i].contains(r) {
                return Err(Error::State(format!("relation {r} already has a classifier row")));
            }
        }
        if new_relations.is_empty() {
            return Ok(());
        }
        let rows = Tensor::randn(new_relations.len(), self.dim(), NEW_ROW_STD, rng);
        self.weights.append_rows(&rows);
        self.relations.extend_from_slice(new_relations);
        Ok(())
    }

    pub fn logits_in(&self, g: &mut Graph, weights: Var, h: Var) -> Var {
        g.matvec(weights, h)
    }

    /// softmax(W h) over all rows.
    pub fn probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: h.len(),
            });
        }
        let logits: Vec<f64> = (0..self.len()).map(|r| tensor::dot(self.weights.row(r), h)).collect();
        Ok(tensor::softmax(&logits))
    }
}

/// Two-layer MLP `d -> d -> d_proj` with a tanh in between; outputs are L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub inner_weight: Tensor,
    pub inner_bias: Tensor,
    pub outer_weight: Tensor,
    pub outer_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjector {
    pub inner_weight: Var,
    pub inner_bias: Var,
    pub outer_weight: Var,
    pub outer_bias: Var,
}

impl BoundProjector {
    pub fn vars(&self) -> [Var; 4] {
        [self.inner_weight, self.inner_bias, self.outer_weight, self.outer_bias]
    }
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(d: usize, d_proj: usize, rng: &mut R) -> Self {
        let s = (1.0 / d as f64).sqrt();
        Self {
            inner_weight: Tensor::randn(d, d, s, rng),
            inner_bias: Tensor::zeros(d, 1),
            outer_weight: Tensor::randn(d_proj, d, s, rng),
            outer_bias: Tensor::zeros(d_proj, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.inner_weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.outer_weight.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.inner_weight, &self.inner_bias, &self.outer_weight, &self.outer_bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.inner_weight,
            &mut self.inner_bias,
            &mut self.outer_weight,
            &mut self.outer_bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundProjector {
        BoundProjector {
            inner_weight: g.leaf(self.inner_weight.clone()),
            inner_bias: g.leaf(self.inner_bias.clone()),
            outer_weight: g.leaf(self.outer_weight.clone()),
            outer_bias: g.leaf(self.outer_bias.clone()),
        }
    }

    /// Unit-norm projection of `h` built on `g`.
    pub fn project_in(&self, g: &mut Graph, bound: &BoundProjector, h: Var) -> Result<Var> {
        if g.value(h).len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: g.value(h).len(),
            });
        }
        let inner = g.matvec(bound.inner_weight, h);
        let inner = g.add(inner, bound.inner_bias);
        let inner = g.tanh(inner);
        let outer = g.matvec(bound.outer_weight, inner);
        let outer = g.add(outer, bound.outer_bias);
        if tensor::norm(g.value(outer).data()) == 0.0 {
            return Err(Error::Numeric("projection MLP produced a zero vector".into()));
        }
        Ok(g.l2_normalize(outer))
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let hv = g.constant_vec(h);
        let z = self.project_in(&mut g, &bound, hv)?;
        Ok(g.value(z).data().to_vec())
    }
}

/// softmax(z . Z^T) over prototype rows. No temperature.
pub fn contrastive_probs(z: &[f64], prototypes: &[Vec<f64>], expected_rows: usize) -> Result<Vec<f64>> {
    if prototypes.len() != expected_rows {
        return Err(Error::Dimension {
            expected: expected_rows,
            got: prototypes.len(),
        });
    }
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            if p.len() != z.len() {
                Err(Error::Dimension {
                    expected: z.len(),
                    got: p.len(),
                })
            } else {
                Ok(tensor::dot(z, p))
            }
        })
        .collect::<Result<_>>()?;
    Ok(tensor::softmax(&logits))
}
