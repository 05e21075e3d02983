//! Browser bindings: question graphs, fused masks and one attention head.
//!
//! Each exported function returns a JSON string. The `*_json` functions hold
//! the logic and are plain Rust so they can be tested natively.

use mgt_core::data::{render, text_vocab, SceneSpec};
use mgt_core::mask::{GraphMask, ModalSpan};
use mgt_core::model::{ModelConfig, MultimodalEncoder};
use mgt_core::text::{text_graph, Lexicon, Token};
use mgt_core::vision::{patchify, Connectivity, PatchGrid};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const PATCH: usize = 4;
const MAX_SIDE: usize = 6;

struct Fused {
    tokens: Vec<Token>,
    grid: PatchGrid,
    spans: Vec<ModalSpan>,
    mask: GraphMask,
    labels: Vec<String>,
    model: MultimodalEncoder,
}

fn connectivity(name: &str) -> Result<Connectivity, String> {
    match name {
        "full" => Ok(Connectivity::Full),
        "grid4" => Ok(Connectivity::Grid4),
        _ => Err(format!("unknown connectivity {name:?}")),
    }
}

fn fuse(question: &str, side: usize, conn: &str, lambda: f64) -> Result<Fused, String> {
    if !(1..=MAX_SIDE).contains(&side) {
        return Err(format!("grid side must be 1..={MAX_SIDE}"));
    }
    let (tokens, text) = text_graph(question, &Lexicon::default()).map_err(|e| e.to_string())?;
    let scene = SceneSpec {
        rows: side,
        cols: side,
        patch_size: PATCH,
    };
    let grid = patchify(&render(&scene, &[]), PATCH).map_err(|e| e.to_string())?;
    let model = MultimodalEncoder::new(ModelConfig {
        d_model: 16,
        heads: 2,
        num_layers: 1,
        d_ff: 16,
        l_max: 1 + side * side + tokens.len().max(1),
        lambda,
        text_vocab_size: text_vocab().len(),
        patch_input_dim: scene.patch_dim(),
        connectivity: connectivity(conn)?,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let spans = model.spans(grid.len(), tokens.len()).map_err(|e| e.to_string())?;
    let vision = model.vision_graph(&grid).map_err(|e| e.to_string())?;
    let mask = model.compose_mask(&spans, &vision, &text).map_err(|e| e.to_string())?;
    let labels = std::iter::once("[CLS]".to_string())
        .chain((0..grid.len()).map(|i| format!("p{i}")))
        .chain(tokens.iter().map(|t| t.surface.clone()))
        .collect();
    Ok(Fused {
        tokens,
        grid,
        spans,
        mask,
        labels,
        model,
    })
}

/// Tokens with their kinds plus the text graph.
pub fn question_graph_json(question: &str) -> Result<String, String> {
    let (tokens, graph) = text_graph(question, &Lexicon::default()).map_err(|e| e.to_string())?;
    let graph: Value = serde_json::from_str(&graph.to_json()).map_err(|e| e.to_string())?;
    Ok(json!({ "tokens": tokens, "graph": graph }).to_string())
}

/// Fused `[CLS, patches, tokens]` mask as 0/1 rows (1 = open).
pub fn fused_mask_json(question: &str, side: usize, conn: &str) -> Result<String, String> {
    let f = fuse(question, side, conn, 0.0)?;
    let n = f.mask.size();
    let open: Vec<Vec<u8>> = (0..n)
        .map(|i| (0..n).map(|j| u8::from(f.mask.is_open(i, j))).collect())
        .collect();
    Ok(json!({
        "labels": f.labels,
        "spans": f.spans,
        "blocked": f.mask.blocked_count(),
        "open": open,
    })
    .to_string())
}

/// Head-0 weights of an untrained one-layer encoder. Ĝ holds `bias` in the
/// column of key `focus` and zero elsewhere, scaled by `lambda`. With
/// `masked` false the layer runs without G or Ĝ.
pub fn attention_json(
    question: &str,
    side: usize,
    conn: &str,
    lambda: f64,
    bias: f64,
    focus: usize,
    masked: bool,
) -> Result<String, String> {
    let mut f = fuse(question, side, conn, lambda)?;
    let n = f.mask.size();
    if focus >= n {
        return Err(format!("focus {focus} out of range for {n} positions"));
    }
    let l_max = f.model.config.l_max;
    let g_hat = f.model.layers[0].params.g_hat;
    let data = f.model.store.get_mut(g_hat).value.data_mut();
    for h in 0..f.model.config.heads {
        for i in 0..n {
            data[(h * l_max + i) * l_max + focus] = bias;
        }
    }
    let vocab = text_vocab();
    let ids: Vec<usize> = f
        .tokens
        .iter()
        .map(|t| vocab.iter().position(|w| *w == t.surface).unwrap_or(0))
        .collect();
    let mut tape = mgt_core::autodiff::Tape::new(&f.model.store);
    let mask = masked.then_some(&f.mask);
    let out = f.model.forward(&mut tape, &f.grid, &ids, mask).map_err(|e| e.to_string())?;
    let w = tape.value(out.attention[0][0]);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| w.row(i).to_vec()).collect();
    Ok(json!({
        "labels": f.labels,
        "weights": rows,
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = questionGraph)]
pub fn question_graph(question: &str) -> Result<String, JsValue> {
    js(question_graph_json(question))
}

#[wasm_bindgen(js_name = fusedMask)]
pub fn fused_mask(question: &str, side: usize, connectivity: &str) -> Result<String, JsValue> {
    js(fused_mask_json(question, side, connectivity))
}

#[wasm_bindgen(js_name = attentionWeights)]
pub fn attention_weights(
    question: &str,
    side: usize,
    connectivity: &str,
    lambda: f64,
    bias: f64,
    focus: usize,
    masked: bool,
) -> Result<String, JsValue> {
    js(attention_json(question, side, connectivity, lambda, bias, focus, masked))
}
