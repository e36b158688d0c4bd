use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneModel, MAX_SEQUENCE_LEN};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Small trainable backbone for desk-scale runs.
///
/// Each position embeds as `token + position`. A position's hidden state is
/// a two-layer feed-forward of `[own embedding; mean embedding of the
/// sentence]` with a residual to its own embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub inner_weight: Tensor,
    pub inner_bias: Tensor,
    pub outer_weight: Tensor,
    pub outer_bias: Tensor,
}

impl ToyBackbone {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, d: usize, rng: &mut R) -> Self {
        Self {
            token_embedding: Tensor::randn(vocab_size, d, 1.0, rng),
            position_embedding: Tensor::randn(MAX_SEQUENCE_LEN, d, 0.1, rng),
            inner_weight: Tensor::randn(d, 2 * d, (1.0 / (2 * d) as f64).sqrt(), rng),
            inner_bias: Tensor::zeros(d, 1),
            outer_weight: Tensor::randn(d, d, (1.0 / d as f64).sqrt(), rng),
            outer_bias: Tensor::zeros(d, 1),
        }
    }
}

impl BackboneModel for ToyBackbone {
    fn hidden_dim(&self) -> usize {
        self.token_embedding.cols()
    }

    fn max_positions(&self) -> usize {
        self.position_embedding.rows()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.inner_weight,
            &self.inner_bias,
            &self.outer_weight,
            &self.outer_bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.inner_weight,
            &mut self.inner_bias,
            &mut self.outer_weight,
            &mut self.outer_bias,
        ]
    }

    fn hidden_at(&self, g: &mut Graph, params: &[Var], token_ids: &[usize], positions: &[usize]) -> Vec<Var> {
        let [tok, pos, w1, b1, w2, b2] = params else {
            panic!("toy backbone expects 6 bound tensors");
        };
        let embedded: Vec<Var> = token_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let t = g.row(*tok, id);
                let p = g.row(*pos, i);
                g.add(t, p)
            })
            .collect();
        let context = g.mean(&embedded);
        positions
            .iter()
            .map(|&p| {
                let own = embedded[p];
                let input = g.concat(&[own, context]);
                let inner = g.matvec(*w1, input);
                let inner = g.add(inner, *b1);
                let inner = g.tanh(inner);
                let outer = g.matvec(*w2, inner);
                let outer = g.add(outer, *b2);
                g.add(outer, own)
            })
            .collect()
    }
}
