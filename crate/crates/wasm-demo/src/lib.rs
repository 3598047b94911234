//! Browser demo bindings.
//!
//! Three operations, each returning JSON:
//!
//! - [`cache_sweep`]: predicted cache bytes for every variant over a range
//!   of sequence lengths.
//! - [`tokenize_obj`]: canonical token sequence and quantized geometry of a
//!   pasted OBJ mesh.
//! - [`nucleus`]: top-k / top-p support of a logit vector.
//!
//! The plain functions are usable natively; the `js_*` wrappers are what
//! the page calls.

use iflame::hourglass::{ModelConfig, Variant};
use iflame::inference::{cache_bytes, nucleus_support, SamplerConfig};
use iflame::mesh_codec::{encode_mesh, parse_obj, QuantizerConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CachePoint {
    variant: String,
    n: usize,
    kv_bytes: usize,
    state_bytes: usize,
    buffer_bytes: usize,
    baseline_bytes: usize,
    reduction_pct: f64,
}

/// `points` evenly spaced lengths up to `max_len` for each variant.
pub fn cache_sweep(d_model: usize, heads: usize, max_len: usize, points: usize) -> Result<String, String> {
    let base = ModelConfig {
        d_model,
        heads,
        ..ModelConfig::shapenet()
    };
    base.validate().map_err(|e| e.to_string())?;
    let points = points.clamp(1, 500);
    let mut out = Vec::new();
    for v in Variant::ALL {
        let cfg = v.config(&base, None);
        for i in 1..=points {
            let n = max_len * i / points;
            let r = cache_bytes(&cfg, v.label(), n, 2);
            out.push(CachePoint {
                variant: r.variant.clone(),
                n,
                kv_bytes: r.kv_bytes,
                state_bytes: r.state_bytes,
                buffer_bytes: r.buffer_bytes,
                baseline_bytes: r.baseline_bytes,
                reduction_pct: if n == 0 { 0.0 } else { r.reduction_pct() },
            });
        }
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Tokenized {
    bins: u32,
    faces: usize,
    vertices: usize,
    dropped_faces: usize,
    token_count: usize,
    token_text: String,
    /// Dequantized `[x, y, z]` per canonical vertex.
    positions: Vec<[f64; 3]>,
    triangles: Vec<[usize; 3]>,
}

/// Normalizes, canonicalizes and tokenizes OBJ text.
pub fn tokenize_obj(obj: &str, bins: u32) -> Result<String, String> {
    let q = QuantizerConfig::new(bins).map_err(|e| e.to_string())?;
    let mesh = parse_obj(obj).map_err(|e| e.to_string())?;
    let (canon, seq) = encode_mesh(&mesh, &q).map_err(|e| e.to_string())?;
    let geometry = canon.mesh.to_mesh(&q);
    let out = Tokenized {
        bins,
        faces: canon.mesh.face_count(),
        vertices: canon.mesh.vertices.len(),
        dropped_faces: canon.dropped_faces,
        token_count: seq.len(),
        token_text: seq.to_text(),
        positions: geometry.vertices,
        triangles: geometry.faces,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Support {
    id: u32,
    p: f64,
}

/// Support of comma- or space-separated logits under the given sampler.
pub fn nucleus(logits: &str, top_k: usize, top_p: f64, temperature: f64) -> Result<String, String> {
    let values = logits
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err("no logits given".into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("logits must be finite".into());
    }
    let cfg = SamplerConfig {
        top_p,
        top_k,
        temperature,
        seed: 0,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let support: Vec<Support> = nucleus_support(&values, &cfg)
        .into_iter()
        .map(|(id, p)| Support { id, p })
        .collect();
    serde_json::to_string(&support).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn js_cache_sweep(d_model: usize, heads: usize, max_len: usize, points: usize) -> Result<String, JsValue> {
    cache_sweep(d_model, heads, max_len, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn js_tokenize_obj(obj: &str, bins: u32) -> Result<String, JsValue> {
    tokenize_obj(obj, bins).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn js_nucleus(logits: &str, top_k: usize, top_p: f64, temperature: f64) -> Result<String, JsValue> {
    nucleus(logits, top_k, top_p, temperature).map_err(|e| JsValue::from_str(&e))
}
