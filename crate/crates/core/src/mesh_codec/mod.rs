//! Conversion between triangle meshes and quantized token sequences.
//!
//! A mesh is normalized into the cube `[-0.5, 0.5]^3`, quantized into `b`
//! bins per axis, put into canonical order (vertices ascending by
//! `(z, y, x)`, faces rotated lowest-index-first and sorted) and flattened
//! into `[S]`, `9N` coordinate tokens, `[E]`.

mod obj;
mod tokens;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use obj::{load_obj, parse_obj, save_obj, write_obj};
pub use tokens::{classify, TokenKind, TokenSequence, TOKENS_PER_FACE};

use crate::{Error, Result};

/// Triangle mesh in model units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Self {
        Self { vertices, faces }
    }

    /// Checks index bounds and that each face has three distinct indices.
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= self.vertices.len() {
                    return Err(Error::IndexOutOfRange {
                        index: idx as i64,
                        vertices: self.vertices.len(),
                        line: i,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Degenerate(format!("face {i} repeats a vertex")));
            }
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }
}

/// Quantization resolution. The vocabulary is `bins` coordinate tokens plus
/// `[S] = bins`, `[E] = bins + 1`, `[P] = bins + 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizerConfig {
    bins: u32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { bins: 128 }
    }
}

impl QuantizerConfig {
    pub const MIN_BINS: u32 = 2;
    pub const MAX_BINS: u32 = 1024;

    pub fn new(bins: u32) -> Result<Self> {
        if !(Self::MIN_BINS..=Self::MAX_BINS).contains(&bins) {
            return Err(Error::Config(format!(
                "bins must be in [{}, {}], got {bins}",
                Self::MIN_BINS,
                Self::MAX_BINS
            )));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn vocab_size(&self) -> usize {
        self.bins as usize + 3
    }

    pub fn start_token(&self) -> u32 {
        self.bins
    }

    pub fn end_token(&self) -> u32 {
        self.bins + 1
    }

    pub fn pad_token(&self) -> u32 {
        self.bins + 2
    }

    /// `clamp(floor((x + 0.5) * b), 0, b - 1)`.
    pub fn quantize(&self, x: f64) -> u32 {
        let b = self.bins as f64;
        let bin = ((x + 0.5) * b).floor();
        bin.clamp(0.0, b - 1.0) as u32
    }

    /// Bin center `(bin + 0.5) / b - 0.5`.
    pub fn dequantize(&self, bin: u32) -> f64 {
        (bin as f64 + 0.5) / self.bins as f64 - 0.5
    }
}

/// Mesh with vertices stored as `[x, y, z]` bin indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuantizedMesh {
    pub vertices: Vec<[u32; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl QuantizedMesh {
    pub fn from_mesh(mesh: &Mesh, cfg: &QuantizerConfig) -> Self {
        let vertices = mesh
            .vertices
            .iter()
            .map(|v| [cfg.quantize(v[0]), cfg.quantize(v[1]), cfg.quantize(v[2])])
            .collect();
        Self {
            vertices,
            faces: mesh.faces.clone(),
        }
    }

    pub fn to_mesh(&self, cfg: &QuantizerConfig) -> Mesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| [cfg.dequantize(v[0]), cfg.dequantize(v[1]), cfg.dequantize(v[2])])
            .collect();
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }
}

/// Sort key for a quantized vertex: `(z, y, x)`.
pub fn vertex_key(v: &[u32; 3]) -> (u32, u32, u32) {
    (v[2], v[1], v[0])
}

/// Output of canonicalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canonical {
    pub mesh: QuantizedMesh,
    /// Faces dropped because fewer than three distinct vertices survived
    /// quantization.
    pub dropped_faces: usize,
}

/// Scales and translates uniformly so the bounding box is centered at the
/// origin and the longest axis spans exactly `[-0.5, 0.5]`.
pub fn normalize(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| Error::Degenerate("mesh has no vertices".into()))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::Degenerate("zero extent on all axes".into()));
    }
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let scale = 1.0 / extent;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                ((v[0] - center[0]) * scale).clamp(-0.5, 0.5),
                ((v[1] - center[1]) * scale).clamp(-0.5, 0.5),
                ((v[2] - center[2]) * scale).clamp(-0.5, 0.5),
            ]
        })
        .collect();
    Ok(Mesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// Quantizes and puts the mesh into canonical order.
pub fn canonicalize(mesh: &Mesh, cfg: &QuantizerConfig) -> Canonical {
    canonicalize_quantized(&QuantizedMesh::from_mesh(mesh, cfg))
}

/// Canonical order on an already-quantized mesh: merge duplicate vertices,
/// drop degenerate faces and unreferenced vertices, sort vertices by
/// `(z, y, x)`, rotate each face so its smallest index leads, sort faces.
pub fn canonicalize_quantized(mesh: &QuantizedMesh) -> Canonical {
    let mut unique: Vec<[u32; 3]> = mesh.vertices.clone();
    unique.sort_by_key(vertex_key);
    unique.dedup();
    let rank: HashMap<[u32; 3], usize> = unique.iter().enumerate().map(|(i, v)| (*v, i)).collect();

    let mut dropped = 0;
    let mut faces = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        let r = f.map(|i| rank[&mesh.vertices[i]]);
        if r[0] == r[1] || r[1] == r[2] || r[0] == r[2] {
            dropped += 1;
            continue;
        }
        faces.push(r);
    }

    // Compact away vertices no surviving face references; this keeps the
    // relative order, so the (z, y, x) sort is preserved.
    let mut used = vec![false; unique.len()];
    for f in &faces {
        for &i in f {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; unique.len()];
    let mut vertices = Vec::new();
    for (i, v) in unique.iter().enumerate() {
        if used[i] {
            remap[i] = vertices.len();
            vertices.push(*v);
        }
    }
    let mut faces: Vec<[usize; 3]> = faces
        .into_iter()
        .map(|f| rotate_min_first(f.map(|i| remap[i])))
        .collect();
    faces.sort_unstable();

    Canonical {
        mesh: QuantizedMesh { vertices, faces },
        dropped_faces: dropped,
    }
}

/// Cyclic rotation that puts the smallest index first, preserving winding.
pub fn rotate_min_first(f: [usize; 3]) -> [usize; 3] {
    let k = (0..3).min_by_key(|&i| f[i]).unwrap_or(0);
    [f[k], f[(k + 1) % 3], f[(k + 2) % 3]]
}

/// Serializes a canonical mesh as `[S]`, per face per vertex `(z, y, x)`,
/// `[E]`. Length is `9N + 2`.
pub fn tokenize(mesh: &QuantizedMesh, cfg: &QuantizerConfig) -> Result<TokenSequence> {
    if mesh.faces.is_empty() {
        return Err(Error::ZeroFaces);
    }
    let mut tokens = Vec::with_capacity(mesh.faces.len() * TOKENS_PER_FACE + 2);
    tokens.push(cfg.start_token());
    for f in &mesh.faces {
        for &vi in f {
            let v = mesh
                .vertices
                .get(vi)
                .ok_or_else(|| Error::Shape(format!("face index {vi} out of range")))?;
            if v.iter().any(|&c| c >= cfg.bins()) {
                return Err(Error::Shape(format!("vertex bin {v:?} exceeds {}", cfg.bins())));
            }
            tokens.extend([v[2], v[1], v[0]]);
        }
    }
    tokens.push(cfg.end_token());
    Ok(TokenSequence::new(cfg.bins(), tokens))
}

/// Mesh reconstructed from tokens, with diagnostics for what was discarded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detokenized {
    pub mesh: QuantizedMesh,
    /// Coordinate tokens of a trailing incomplete face.
    pub discarded_tokens: usize,
    /// Faces with a repeated vertex.
    pub degenerate_faces: usize,
}

/// Reads 9-token groups after `[S]` until `[E]`/`[P]`, a truncated group, or
/// the end of the stream. The result is in canonical order.
pub fn detokenize(seq: &TokenSequence, cfg: &QuantizerConfig) -> Result<Detokenized> {
    if seq.bins != cfg.bins() {
        return Err(Error::Config(format!(
            "sequence uses {} bins, quantizer {}",
            seq.bins,
            cfg.bins()
        )));
    }
    if seq.tokens.first().map(|&t| seq.kind(t)) != Some(TokenKind::Start) {
        return Err(Error::Grammar("sequence must begin with [S]".into()));
    }
    let mut coords = Vec::new();
    for (pos, &t) in seq.tokens.iter().enumerate().skip(1) {
        match seq.kind(t) {
            TokenKind::Coord(c) => coords.push(c),
            TokenKind::End | TokenKind::Pad => break,
            TokenKind::Start | TokenKind::Invalid => {
                return Err(Error::Grammar(format!(
                    "token {t} at position {pos} is not a coordinate"
                )))
            }
        }
    }
    let whole = coords.len() / TOKENS_PER_FACE;
    let discarded = coords.len() % TOKENS_PER_FACE;
    if whole == 0 {
        return Err(Error::ZeroFaces);
    }

    let mut raw = QuantizedMesh::default();
    let mut index: HashMap<[u32; 3], usize> = HashMap::new();
    for group in coords.chunks_exact(TOKENS_PER_FACE) {
        let mut face = [0usize; 3];
        for (k, zyx) in group.chunks_exact(3).enumerate() {
            let v = [zyx[2], zyx[1], zyx[0]];
            face[k] = *index.entry(v).or_insert_with(|| {
                raw.vertices.push(v);
                raw.vertices.len() - 1
            });
        }
        raw.faces.push(face);
    }
    let canon = canonicalize_quantized(&raw);
    if canon.mesh.faces.is_empty() {
        return Err(Error::ZeroFaces);
    }
    Ok(Detokenized {
        mesh: canon.mesh,
        discarded_tokens: discarded,
        degenerate_faces: canon.dropped_faces,
    })
}

/// Per-axis scale and translation applied as `v * scale + translate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: [f64; 3],
    pub translate: [f64; 3],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: [1.0; 3],
        translate: [0.0; 3],
    };

    pub fn apply(&self, mesh: &Mesh) -> Mesh {
        let vertices = mesh
            .vertices
            .iter()
            .map(|v| {
                let mut out = [0.0; 3];
                for a in 0..3 {
                    out[a] = (v[a] * self.scale[a] + self.translate[a]).clamp(-0.5, 0.5);
                }
                out
            })
            .collect();
        Mesh {
            vertices,
            faces: mesh.faces.clone(),
        }
    }
}

pub const AUGMENT_SCALE_RANGE: (f64, f64) = (0.75, 1.0);

/// Samples a per-axis scale in `[0.75, 1.0]` and a translation that keeps
/// the scaled bounding box inside the normalization cube.
pub fn sample_augmentation(mesh: &Mesh, seed: u64) -> Affine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = mesh.bounding_box().unwrap_or(([0.0; 3], [0.0; 3]));
    let mut aff = Affine::IDENTITY;
    for a in 0..3 {
        let s = rng.gen_range(AUGMENT_SCALE_RANGE.0..=AUGMENT_SCALE_RANGE.1);
        let (slo, shi) = (lo[a] * s, hi[a] * s);
        let min_t = -0.5 - slo;
        let max_t = 0.5 - shi;
        let t = if max_t > min_t {
            rng.gen_range(min_t..=max_t)
        } else {
            // Box already spans the cube on this axis after scaling.
            (min_t + max_t) / 2.0
        };
        aff.scale[a] = s;
        aff.translate[a] = t;
    }
    aff
}

/// Random scaling and translation, deterministic in `seed`.
pub fn augment(mesh: &Mesh, seed: u64) -> Mesh {
    sample_augmentation(mesh, seed).apply(mesh)
}

/// Keeps canonical meshes with at most `max_faces` faces.
pub fn filter_dataset(meshes: Vec<QuantizedMesh>, max_faces: usize) -> Vec<QuantizedMesh> {
    meshes
        .into_iter()
        .filter(|m| m.face_count() <= max_faces)
        .collect()
}

/// Full pipeline from raw mesh to tokens: normalize, canonicalize, tokenize.
pub fn encode_mesh(mesh: &Mesh, cfg: &QuantizerConfig) -> Result<(Canonical, TokenSequence)> {
    let canon = canonicalize(&normalize(mesh)?, cfg);
    let seq = tokenize(&canon.mesh, cfg)?;
    Ok((canon, seq))
}
