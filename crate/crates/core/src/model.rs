//! Fused vision+text encoder with a CLS classification head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::attention::{randn, LayerShape, QuasiAttentionLayer, LN_EPS};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::{compose_block_mask, graph_to_mask, CrossPolicy, GraphMask, ModalSpan, Modality, SelfLoops};
use crate::ops;
use crate::tensor::{ParamId, ParamStore, Parameter, Tensor};
use crate::vision::{Connectivity, PatchGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub lambda: f64,
    pub answer_vocab_size: usize,
    pub text_vocab_size: usize,
    pub patch_input_dim: usize,
    pub connectivity: Connectivity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            num_layers: 2,
            d_ff: 64,
            l_max: 64,
            lambda: 1.0,
            answer_vocab_size: 4,
            text_vocab_size: 32,
            patch_input_dim: 16,
            connectivity: Connectivity::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            l_max: self.l_max,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shape().validate()?;
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("answer_vocab_size", self.answer_vocab_size),
            ("text_vocab_size", self.text_vocab_size),
            ("patch_input_dim", self.patch_input_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let embeddings = (self.text_vocab_size + self.patch_input_dim + self.l_max + 3) * d;
        let layers = self.num_layers * self.layer_shape().num_params();
        let head = 2 * d + d * self.answer_vocab_size + self.answer_vocab_size;
        embeddings + layers + head
    }
}

/// Row of the modality-type embedding table.
fn type_row(m: Modality) -> usize {
    match m {
        Modality::Vision => 0,
        Modality::Text => 1,
        Modality::Special => 2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalEncoder {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub token_embedding: ParamId,
    pub patch_projection: ParamId,
    pub position_embedding: ParamId,
    pub type_embedding: ParamId,
    pub layers: Vec<QuasiAttentionLayer>,
    pub final_norm_gain: ParamId,
    pub final_norm_bias: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Result of a traced forward pass.
pub struct ForwardTrace {
    pub logits: Var,
    pub spans: Vec<ModalSpan>,
    /// `[layer][head]` post-softmax attention weights.
    pub attention: Vec<Vec<Var>>,
}

impl MultimodalEncoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let emb_std = 0.5;
        let token_embedding = store.add(Parameter::new(
            "embed.tokens",
            randn(&[config.text_vocab_size, d], emb_std, &mut rng),
        ));
        let patch_projection = store.add(Parameter::new(
            "embed.patch_proj",
            randn(&[config.patch_input_dim, d], (1.0 / config.patch_input_dim as f64).sqrt(), &mut rng),
        ));
        let position_embedding = store.add(Parameter::new(
            "embed.positions",
            randn(&[config.l_max, d], emb_std, &mut rng),
        ));
        let type_embedding = store.add(Parameter::new("embed.types", randn(&[3, d], emb_std, &mut rng)));
        let layers = (0..config.num_layers)
            .map(|i| QuasiAttentionLayer::new(&mut store, &format!("layers.{i}"), config.layer_shape(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm_gain = store.add(Parameter::new("final_norm.gain", Tensor::full(&[d], 1.0)));
        let final_norm_bias = store.add(Parameter::new("final_norm.bias", Tensor::zeros(&[d])));
        let head_weight = store.add(Parameter::new(
            "head.weight",
            randn(&[d, config.answer_vocab_size], (1.0 / d as f64).sqrt(), &mut rng),
        ));
        let head_bias = store.add(Parameter::new("head.bias", Tensor::zeros(&[config.answer_vocab_size])));
        Ok(Self {
            config,
            store,
            token_embedding,
            patch_projection,
            position_embedding,
            type_embedding,
            layers,
            final_norm_gain,
            final_norm_bias,
            head_weight,
            head_bias,
        })
    }

    /// Span layout `[CLS] ++ patches ++ tokens`.
    pub fn spans(&self, n_patches: usize, n_tokens: usize) -> Result<Vec<ModalSpan>> {
        let l = 1 + n_patches + n_tokens;
        if l > self.config.l_max {
            return Err(Error::Capacity {
                len: l,
                max: self.config.l_max,
            });
        }
        Ok(vec![
            ModalSpan::new(Modality::Special, 0, 1),
            ModalSpan::new(Modality::Vision, 1, n_patches),
            ModalSpan::new(Modality::Text, 1 + n_patches, n_tokens),
        ])
    }

    /// `H0 = content + position + modality-type` rows for the fused sequence.
    pub fn embed_inputs(&self, tape: &mut Tape, grid: &PatchGrid, tokens: &[usize]) -> Result<(Var, Vec<ModalSpan>)> {
        let spans = self.spans(grid.len(), tokens.len())?;
        let l = 1 + grid.len() + tokens.len();
        let d = self.config.d_model;
        let mut parts = vec![tape.constant(Tensor::zeros(&[1, d]))];
        if !grid.is_empty() {
            parts.push(crate::vision::patch_project(tape, grid, self.patch_projection)?);
        }
        if !tokens.is_empty() {
            let table = tape.param(self.token_embedding);
            parts.push(tape.gather(table, tokens)?);
        }
        let content = tape.concat_rows(&parts)?;
        let pos_table = tape.param(self.position_embedding);
        let pos = tape.slice_rows(pos_table, 0, l)?;
        let type_ids: Vec<usize> = spans
            .iter()
            .flat_map(|s| std::iter::repeat_n(type_row(s.modality), s.length))
            .collect();
        let type_table = tape.param(self.type_embedding);
        let types = tape.gather(type_table, &type_ids)?;
        let h = tape.add(content, pos)?;
        Ok((tape.add(h, types)?, spans))
    }

    /// Fused mask `G` from the two modality graphs; the CLS row and column
    /// and all cross-modal blocks are Open.
    pub fn compose_mask(&self, spans: &[ModalSpan], vision: &Graph, text: &Graph) -> Result<GraphMask> {
        let mut per = BTreeMap::new();
        for (modality, g) in [(Modality::Vision, vision), (Modality::Text, text)] {
            let span = spans.iter().find(|s| s.modality == modality).expect("span present");
            if g.num_nodes() != span.length {
                return Err(Error::Alignment {
                    modality: modality.as_str(),
                    nodes: g.num_nodes(),
                    tokens: span.length,
                });
            }
            per.insert(modality, graph_to_mask(g, SelfLoops::Open));
        }
        compose_block_mask(spans, &per, CrossPolicy::AllOpen)
    }

    /// Runs the layer stack on given inputs under an optional fused mask and
    /// returns CLS logits `1×answers` plus per-layer attention weights.
    pub fn forward(&self, tape: &mut Tape, grid: &PatchGrid, tokens: &[usize], mask: Option<&GraphMask>) -> Result<ForwardTrace> {
        let (mut h, spans) = self.embed_inputs(tape, grid, tokens)?;
        let l = tape.value(h).rows();
        let mask = match mask {
            Some(m) if m.size() != l => return Err(Error::dim("fused mask", &[m.size(), m.size()], &[l, l])),
            Some(m) => Some(tape.constant(m.to_additive())),
            None => None,
        };
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward_traced(tape, h, mask)?;
            h = next;
            attention.push(w);
        }
        let (g, b) = (tape.param(self.final_norm_gain), tape.param(self.final_norm_bias));
        let h = tape.layer_norm(h, g, b, LN_EPS)?;
        let cls = tape.slice_rows(h, 0, 1)?;
        let w = tape.param(self.head_weight);
        let z = tape.matmul(cls, w)?;
        let hb = tape.param(self.head_bias);
        let logits = tape.add_row(z, hb)?;
        Ok(ForwardTrace {
            logits,
            spans,
            attention,
        })
    }

    /// Logits over the answer vocabulary for one example.
    pub fn encode_classify(&self, grid: &PatchGrid, tokens: &[usize], vision: &Graph, text: &Graph) -> Result<Tensor> {
        let spans = self.spans(grid.len(), tokens.len())?;
        let mask = self.compose_mask(&spans, vision, text)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, grid, tokens, Some(&mask))?;
        let z = tape.value(out.logits);
        Tensor::new(vec![z.len()], z.data().to_vec())
    }

    /// Dense region graph for a patch grid under the configured connectivity.
    pub fn vision_graph(&self, grid: &PatchGrid) -> Result<Graph> {
        if grid.is_empty() {
            return Ok(Graph::new(0, false));
        }
        crate::vision::build_dense_region_graph(grid.len(), self.config.connectivity, Some((grid.rows, grid.cols)))
    }
}

/// Highest-scoring answer; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> usize {
    ops::argmax(logits.data())
}
