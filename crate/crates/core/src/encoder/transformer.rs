//! Post-norm self-attention encoder (BERT layout, single head).
//!
//! Weights can be loaded from a JSON checkpoint with the same field layout
//! as [`TransformerBackbone`]; there is no pretraining here.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneModel, TokenVocab, MAX_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { layers: 1, ff_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_shift: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
    pub ff_norm_gain: Tensor,
    pub ff_norm_shift: Tensor,
}

const TENSORS_PER_LAYER: usize = 12;

impl TransformerLayer {
    fn new<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        let s = (1.0 / d as f64).sqrt();
        Self {
            query: Tensor::randn(d, d, s, rng),
            key: Tensor::randn(d, d, s, rng),
            value: Tensor::randn(d, d, s, rng),
            output: Tensor::randn(d, d, s, rng),
            attn_norm_gain: Tensor::filled(d, 1, 1.0),
            attn_norm_shift: Tensor::zeros(d, 1),
            ff_in: Tensor::randn(ff, d, s, rng),
            ff_in_bias: Tensor::zeros(ff, 1),
            ff_out: Tensor::randn(d, ff, (1.0 / ff as f64).sqrt(), rng),
            ff_out_bias: Tensor::zeros(d, 1),
            ff_norm_gain: Tensor::filled(d, 1, 1.0),
            ff_norm_shift: Tensor::zeros(d, 1),
        }
    }

    fn tensors(&self) -> [&Tensor; TENSORS_PER_LAYER] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.attn_norm_gain,
            &self.attn_norm_shift,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
            &self.ff_norm_gain,
            &self.ff_norm_shift,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; TENSORS_PER_LAYER] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_shift,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_shift,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBackbone {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<TransformerLayer>,
}

/// Checkpoint file: vocabulary plus backbone weights.
#[derive(Debug, Serialize, Deserialize)]
pub struct TransformerCheckpoint {
    pub vocab: TokenVocab,
    pub backbone: TransformerBackbone,
}

impl TransformerBackbone {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, d: usize, config: TransformerConfig, rng: &mut R) -> Self {
        Self {
            token_embedding: Tensor::randn(vocab_size, d, 1.0, rng),
            position_embedding: Tensor::randn(MAX_SEQUENCE_LEN, d, 0.1, rng),
            layers: (0..config.layers)
                .map(|_| TransformerLayer::new(d, config.ff_dim, rng))
                .collect(),
        }
    }

    pub fn load_checkpoint(path: &Path) -> Result<TransformerCheckpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: TransformerCheckpoint = serde_json::from_str(&text)?;
        if ckpt.backbone.token_embedding.rows() != ckpt.vocab.len() {
            return Err(Error::Dimension {
                expected: ckpt.vocab.len(),
                got: ckpt.backbone.token_embedding.rows(),
            });
        }
        Ok(ckpt)
    }

    fn residual_norm(g: &mut Graph, x: Var, update: Var, gain: Var, shift: Var) -> Var {
        let sum = g.add(x, update);
        let normed = g.layer_norm(sum);
        let scaled = g.mul(normed, gain);
        g.add(scaled, shift)
    }
}

impl BackboneModel for TransformerBackbone {
    fn hidden_dim(&self) -> usize {
        self.token_embedding.cols()
    }

    fn max_positions(&self) -> usize {
        self.position_embedding.rows()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            t.extend(layer.tensors());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            t.extend(layer.tensors_mut());
        }
        t
    }

    fn hidden_at(&self, g: &mut Graph, params: &[Var], token_ids: &[usize], positions: &[usize]) -> Vec<Var> {
        assert_eq!(params.len(), 2 + TENSORS_PER_LAYER * self.layers.len());
        let scale = 1.0 / (self.hidden_dim() as f64).sqrt();
        let mut states: Vec<Var> = token_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let t = g.row(params[0], id);
                let p = g.row(params[1], i);
                g.add(t, p)
            })
            .collect();

        for l in 0..self.layers.len() {
            let p = &params[2 + l * TENSORS_PER_LAYER..2 + (l + 1) * TENSORS_PER_LAYER];
            let (wq, wk, wv, wo) = (p[0], p[1], p[2], p[3]);
            let queries: Vec<Var> = states.iter().map(|&x| g.matvec(wq, x)).collect();
            let keys: Vec<Var> = states.iter().map(|&x| g.matvec(wk, x)).collect();
            let values: Vec<Var> = states.iter().map(|&x| g.matvec(wv, x)).collect();
            let mut next = Vec::with_capacity(states.len());
            for (i, &q) in queries.iter().enumerate() {
                let scores: Vec<Var> = keys
                    .iter()
                    .map(|&k| {
                        let s = g.dot(q, k);
                        g.scale(s, scale)
                    })
                    .collect();
                let scores = g.concat(&scores);
                let weights = g.softmax(scores);
                let mixed: Vec<Var> = values
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let w = g.index(weights, j);
                        g.scale_by(v, w)
                    })
                    .collect();
                let attended = g.sum(&mixed);
                let projected = g.matvec(wo, attended);
                let x = Self::residual_norm(g, states[i], projected, p[4], p[5]);
                let inner = g.matvec(p[6], x);
                let inner = g.add(inner, p[7]);
                let inner = g.tanh(inner);
                let outer = g.matvec(p[8], inner);
                let outer = g.add(outer, p[9]);
                next.push(Self::residual_norm(g, x, outer, p[10], p[11]));
            }
            states = next;
        }
        positions.iter().map(|&p| states[p]).collect()
    }
}
