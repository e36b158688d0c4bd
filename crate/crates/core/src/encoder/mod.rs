//! Sentence encoder: entity markers, a pluggable backbone, and the fused
//! head/tail representation `LayerNorm(W [h_head; h_tail] + b)`.

mod toy;
mod transformer;
mod vocab;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub use toy::ToyBackbone;
pub use transformer::{TransformerBackbone, TransformerConfig};
pub use vocab::TokenVocab;

pub const HEAD_START: &str = "[E11]";
pub const HEAD_END: &str = "[E12]";
pub const TAIL_START: &str = "[E21]";
pub const TAIL_END: &str = "[E22]";
pub const SEPARATOR: &str = "[SEP]";
pub const UNKNOWN: &str = "[UNK]";
pub const MARKERS: [&str; 4] = [HEAD_START, HEAD_END, TAIL_START, TAIL_END];

/// Longest backbone input, markers included.
pub const MAX_SEQUENCE_LEN: usize = 256;

const FORMAT_VERSION: u32 = 1;

/// A fixed-width sentence representation.
pub type Representation = Vec<f64>;

/// Tokens with entity markers inserted, plus the positions of the start markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub tokens: Vec<String>,
    pub head_marker: usize,
    pub tail_marker: usize,
}

impl MarkedSequence {
    pub fn marker_count(&self) -> usize {
        self.tokens.iter().filter(|t| MARKERS.contains(&t.as_str())).count()
    }
}

/// Wraps the head span in `[E11] .. [E12]` and the tail span in `[E21] .. [E22]`.
pub fn mark_entities(sample: &Sample) -> MarkedSequence {
    let n = sample.tokens.len();
    let mut tokens = Vec::with_capacity(n + 4);
    let (mut head_marker, mut tail_marker) = (0, 0);
    for i in 0..=n {
        if sample.head.end == i {
            tokens.push(HEAD_END.to_string());
        }
        if sample.tail.end == i {
            tokens.push(TAIL_END.to_string());
        }
        if sample.head.start == i {
            head_marker = tokens.len();
            tokens.push(HEAD_START.to_string());
        }
        if sample.tail.start == i {
            tail_marker = tokens.len();
            tokens.push(TAIL_START.to_string());
        }
        if i < n {
            tokens.push(sample.tokens[i].clone());
        }
    }
    MarkedSequence {
        tokens,
        head_marker,
        tail_marker,
    }
}

/// Cuts from the right to `max_len`. Fails if any marker would be removed.
pub fn truncate(mut marked: MarkedSequence, max_len: usize, sample_id: &str) -> Result<MarkedSequence> {
    if marked.tokens.len() <= max_len {
        return Ok(marked);
    }
    let last_marker = marked
        .tokens
        .iter()
        .rposition(|t| MARKERS.contains(&t.as_str()))
        .unwrap_or(0);
    if last_marker >= max_len {
        return Err(Error::Data(format!(
            "sample {sample_id}: {} tokens exceed the limit of {max_len} and truncation would cut an entity marker",
            marked.tokens.len()
        )));
    }
    marked.tokens.truncate(max_len);
    Ok(marked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Toy,
    Transformer,
}

/// Backbone parameters. Any variant maps token ids to per-position hidden vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "snake_case")]
pub enum Backbone {
    Toy(ToyBackbone),
    Transformer(TransformerBackbone),
}

/// Contract shared by all backbones.
pub trait BackboneModel {
    fn hidden_dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    /// Hidden vectors at `positions`, given leaves bound in `tensors()` order.
    fn hidden_at(&self, g: &mut Graph, params: &[Var], token_ids: &[usize], positions: &[usize]) -> Vec<Var>;
}

impl Backbone {
    fn inner(&self) -> &dyn BackboneModel {
        match self {
            Backbone::Toy(b) => b,
            Backbone::Transformer(b) => b,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn BackboneModel {
        match self {
            Backbone::Toy(b) => b,
            Backbone::Transformer(b) => b,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Toy(_) => BackboneKind::Toy,
            Backbone::Transformer(_) => BackboneKind::Transformer,
        }
    }
}

impl BackboneModel for Backbone {
    fn hidden_dim(&self) -> usize {
        self.inner().hidden_dim()
    }
    fn max_positions(&self) -> usize {
        self.inner().max_positions()
    }
    fn tensors(&self) -> Vec<&Tensor> {
        self.inner().tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner_mut().tensors_mut()
    }
    fn hidden_at(&self, g: &mut Graph, params: &[Var], token_ids: &[usize], positions: &[usize]) -> Vec<Var> {
        self.inner().hidden_at(g, params, token_ids, positions)
    }
}

/// Encoder parameters: token vocabulary, backbone, fusion layer and layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub vocab: TokenVocab,
    pub backbone: Backbone,
    pub fusion_weight: Tensor,
    pub fusion_bias: Tensor,
    pub norm_gain: Tensor,
    pub norm_shift: Tensor,
}

/// Encoder parameters registered as leaves on a graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub backbone: Vec<Var>,
    pub fusion_weight: Var,
    pub fusion_bias: Var,
    pub norm_gain: Var,
    pub norm_shift: Var,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.clone();
        v.extend([self.fusion_weight, self.fusion_bias, self.norm_gain, self.norm_shift]);
        v
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    format_version: u32,
    hidden_dim: usize,
    #[serde(flatten)]
    state: EncoderState,
}

impl EncoderState {
    pub fn new<R: Rng + ?Sized>(vocab: TokenVocab, backbone: Backbone, rng: &mut R) -> Self {
        let d = backbone.hidden_dim();
        Self {
            vocab,
            backbone,
            fusion_weight: Tensor::randn(d, 2 * d, (1.0 / (2 * d) as f64).sqrt(), rng),
            fusion_bias: Tensor::zeros(d, 1),
            norm_gain: Tensor::filled(d, 1, 1.0),
            norm_shift: Tensor::zeros(d, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.backbone.hidden_dim()
    }

    /// Backbone tensors first, then fusion weight, bias, gain, shift.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.backbone.tensors();
        t.extend([&self.fusion_weight, &self.fusion_bias, &self.norm_gain, &self.norm_shift]);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.backbone.tensors_mut();
        t.extend([
            &mut self.fusion_weight,
            &mut self.fusion_bias,
            &mut self.norm_gain,
            &mut self.norm_shift,
        ]);
        t
    }

    pub fn backbone_tensor_count(&self) -> usize {
        self.backbone.tensors().len()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        let backbone = self.backbone.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        BoundEncoder {
            backbone,
            fusion_weight: g.leaf(self.fusion_weight.clone()),
            fusion_bias: g.leaf(self.fusion_bias.clone()),
            norm_gain: g.leaf(self.norm_gain.clone()),
            norm_shift: g.leaf(self.norm_shift.clone()),
        }
    }

    /// Marked, truncated and id-mapped backbone input for a sample.
    pub fn prepare(&self, sample: &Sample) -> Result<(Vec<usize>, [usize; 2])> {
        let max_len = MAX_SEQUENCE_LEN.min(self.backbone.max_positions());
        let marked = truncate(mark_entities(sample), max_len, &sample.id)?;
        let ids = marked.tokens.iter().map(|t| self.vocab.id(t)).collect();
        Ok((ids, [marked.head_marker, marked.tail_marker]))
    }

    /// Builds the representation of `sample` on `g`.
    pub fn encode_in(&self, g: &mut Graph, bound: &BoundEncoder, sample: &Sample) -> Result<Var> {
        let (ids, markers) = self.prepare(sample)?;
        let hidden = self.backbone.hidden_at(g, &bound.backbone, &ids, &markers);
        let pair = g.concat(&[hidden[0], hidden[1]]);
        let fused = g.matvec(bound.fusion_weight, pair);
        let fused = g.add(fused, bound.fusion_bias);
        let normed = g.layer_norm(fused);
        let scaled = g.mul(normed, bound.norm_gain);
        Ok(g.add(scaled, bound.norm_shift))
    }

    pub fn encode(&self, sample: &Sample) -> Result<Representation> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let h = self.encode_in(&mut g, &bound, sample)?;
        Ok(g.value(h).data().to_vec())
    }

    /// Encodes many samples, binding parameters once per chunk.
    pub fn encode_all<'a, I>(&self, samples: I) -> Result<Vec<Representation>>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        const CHUNK: usize = 64;
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g);
            for s in chunk {
                let h = self.encode_in(&mut g, &bound, s)?;
                out.push(g.value(h).data().to_vec());
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EncoderFile {
            format_version: FORMAT_VERSION,
            hidden_dim: self.hidden_dim(),
            state: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EncoderFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported encoder format version {}",
                file.format_version
            )));
        }
        if file.hidden_dim != file.state.hidden_dim() {
            return Err(Error::Dimension {
                expected: file.hidden_dim,
                got: file.state.hidden_dim(),
            });
        }
        Ok(file.state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RelationId, Span};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(words: &[&str], head: (usize, usize), tail: (usize, usize)) -> Sample {
        Sample::new(
            "s",
            words.iter().map(|w| w.to_string()).collect(),
            Span::new(head.0, head.1),
            Span::new(tail.0, tail.1),
            RelationId(0),
        )
        .unwrap()
    }

    #[test]
    fn minimal_marking() {
        let m = mark_entities(&sample(&["a", "b", "c"], (0, 1), (2, 3)));
        assert_eq!(m.tokens, ["[E11]", "a", "[E12]", "b", "[E21]", "c", "[E22]"]);
        assert_eq!((m.head_marker, m.tail_marker), (0, 4));
    }

    #[test]
    fn tail_before_head_still_wraps_correct_spans() {
        let m = mark_entities(&sample(&["a", "b", "c", "d"], (2, 4), (0, 1)));
        assert_eq!(m.tokens, ["[E21]", "a", "[E22]", "b", "[E11]", "c", "d", "[E12]"]);
        assert_eq!(m.tokens[m.head_marker], HEAD_START);
        assert_eq!(m.tokens[m.tail_marker], TAIL_START);
    }

    #[test]
    fn adjacent_spans() {
        let m = mark_entities(&sample(&["a", "b"], (0, 1), (1, 2)));
        assert_eq!(m.tokens, ["[E11]", "a", "[E12]", "[E21]", "b", "[E22]"]);
        assert_eq!(m.marker_count(), 4);
    }

    #[test]
    fn truncation_keeps_markers_or_fails() {
        let mut words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        words[0] = "h".into();
        let s = Sample::new("long", words.clone(), Span::new(0, 1), Span::new(2, 3), RelationId(0)).unwrap();
        let m = truncate(mark_entities(&s), MAX_SEQUENCE_LEN, &s.id).unwrap();
        assert_eq!(m.tokens.len(), MAX_SEQUENCE_LEN);
        assert_eq!(m.marker_count(), 4);

        let s = Sample::new("late", words, Span::new(0, 1), Span::new(290, 291), RelationId(0)).unwrap();
        let err = truncate(mark_entities(&s), MAX_SEQUENCE_LEN, &s.id).unwrap_err();
        assert!(err.to_string().contains("late"));
    }

    fn toy_encoder(d: usize, seed: u64) -> EncoderState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = TokenVocab::build(["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()));
        let backbone = Backbone::Toy(ToyBackbone::new(vocab.len(), d, &mut rng));
        EncoderState::new(vocab, backbone, &mut rng)
    }

    #[test]
    fn selector_weights_reduce_to_layer_norm_of_head() {
        let mut enc = toy_encoder(4, 1);
        let d = 4;
        let mut w = Tensor::zeros(d, 2 * d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        enc.fusion_weight = w;
        let s = sample(&["a", "b", "c"], (0, 1), (2, 3));
        let out = enc.encode(&s).unwrap();

        let (ids, markers) = enc.prepare(&s).unwrap();
        let mut g = Graph::new();
        let bound = enc.bind(&mut g);
        let hidden = enc.backbone.hidden_at(&mut g, &bound.backbone, &ids, &markers);
        let h11 = g.value(hidden[0]).data().to_vec();
        let mu = h11.iter().sum::<f64>() / d as f64;
        let var = h11.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        for (o, h) in out.iter().zip(&h11) {
            assert!((o - (h - mu) / (var + 1e-12).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_deterministic_and_json_stable() {
        let enc = toy_encoder(8, 3);
        let s = sample(&["a", "b", "c", "d"], (0, 1), (3, 4));
        assert_eq!(enc.encode(&s).unwrap(), enc.encode(&s).unwrap());
        let back = EncoderState::from_json(&enc.to_json().unwrap()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.encode(&s).unwrap(), enc.encode(&s).unwrap());
    }
}
