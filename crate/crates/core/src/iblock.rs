//! Pre-norm transformer layers and the 3-linear : 1-full interleave.
//!
//! ```text
//! X ← X + f(RMSNorm(X))
//! Y ← X + SwiGLU(RMSNorm(X))
//! ```
//!
//! where `f` is full or linear attention depending on the layer's position
//! inside its group of four.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{full_attention_step, head_norm, linear_attention_step, AttentionKind, KvRing, LinearState};
use crate::autodiff::{Graph, Var};
use crate::nn::{rms_norm_into, sigmoid, silu, RotaryTable};
use crate::params::{ParamId, ParamStore};
use crate::{Real, Result};

/// Which of the two attention families a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Full,
    Linear,
}

/// Where the full-attention layer sits inside each group of four.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullPosition {
    First,
    #[default]
    Last,
}

/// `Last`: full iff `(i + 1) % 4 == 0`. `First`: full iff `i % 4 == 0`.
pub fn layer_kind(i: usize, position: FullPosition) -> LayerKind {
    let full = match position {
        FullPosition::Last => (i + 1) % 4 == 0,
        FullPosition::First => i % 4 == 0,
    };
    if full {
        LayerKind::Full
    } else {
        LayerKind::Linear
    }
}

pub fn full_layer_count(depth: usize, position: FullPosition) -> usize {
    (0..depth)
        .filter(|&i| layer_kind(i, position) == LayerKind::Full)
        .count()
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Output gate, only for [`AttentionKind::GatedLinear`].
    pub wg: Option<ParamId>,
}

/// One layer: attention kind plus the ids of its weights in a
/// [`ParamStore`]. Projections are stored `out × in`.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: AttentionKind,
    pub attn_norm: ParamId,
    pub attn: AttentionIds,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl LayerSpec {
    /// Allocates randomly initialized weights for one layer. `residual_std`
    /// scales the two projections that write into the residual stream.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        index: usize,
        kind: AttentionKind,
        d_model: usize,
        hidden: usize,
        residual_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = d_model;
        let in_std = 1.0 / (d as f64).sqrt();
        let p = |s: &str| format!("{prefix}.layer{index}.{s}");
        let attn_norm = store.push(p("attn_norm"), Array2::ones((1, d)));
        let wq = store.push_random(p("wq"), (d, d), in_std, rng);
        let wk = store.push_random(p("wk"), (d, d), in_std, rng);
        let wv = store.push_random(p("wv"), (d, d), in_std, rng);
        let wo = store.push_random(p("wo"), (d, d), in_std * residual_std, rng);
        let wg = (kind == AttentionKind::GatedLinear).then(|| store.push_random(p("wg"), (d, d), in_std, rng));
        let ffn_norm = store.push(p("ffn_norm"), Array2::ones((1, d)));
        let w_gate = store.push_random(p("w_gate"), (hidden, d), in_std, rng);
        let w_up = store.push_random(p("w_up"), (hidden, d), in_std, rng);
        let w_down = store.push_random(p("w_down"), (d, hidden), residual_std / (hidden as f64).sqrt(), rng);
        Self {
            index,
            kind,
            attn_norm,
            attn: AttentionIds { wq, wk, wv, wo, wg },
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.attn_norm,
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
        ];
        ids.extend(self.attn.wg);
        ids.extend([self.ffn_norm, self.w_gate, self.w_up, self.w_down]);
        ids
    }
}

/// Settings shared by every layer of a model.
#[derive(Clone, Copy, Debug)]
pub struct BlockContext<'a, T> {
    pub heads: usize,
    pub eps: T,
    pub rope: &'a RotaryTable<T>,
}

/// Appends one layer to the graph (row index = position at this scale).
pub fn block_graph<'p, T: Real>(
    g: &mut Graph<'p, T>,
    vars: &[Var],
    spec: &LayerSpec,
    x: Var,
    ctx: &BlockContext<'p, T>,
) -> Var {
    let v = |id: ParamId| vars[id.index()];
    let d = g.value(x).ncols();
    let dh = d / ctx.heads;

    let h = g.rms_norm(x, Some(v(spec.attn_norm)), d, ctx.eps);
    let mut q = g.matmul_t(h, v(spec.attn.wq));
    let mut k = g.matmul_t(h, v(spec.attn.wk));
    let mut val = g.matmul_t(h, v(spec.attn.wv));
    if spec.kind == AttentionKind::GatedLinear {
        q = g.silu(q);
        k = g.silu(k);
        val = g.silu(val);
    }
    let q = g.rope(q, ctx.rope);
    let k = g.rope(k, ctx.rope);
    let a = match spec.kind {
        AttentionKind::Full => g.softmax_attention(q, k, val, ctx.heads),
        AttentionKind::SimplifiedLinear => {
            let raw = g.linear_attention(q, k, val, ctx.heads);
            g.rms_norm(raw, None, dh, ctx.eps)
        }
        AttentionKind::GatedLinear => {
            let raw = g.linear_attention(q, k, val, ctx.heads);
            let normed = g.rms_norm(raw, None, dh, ctx.eps);
            let gate = g.matmul_t(h, v(spec.attn.wg.expect("gated layer has wg")));
            let gate = g.sigmoid(gate);
            g.mul(normed, gate)
        }
    };
    let o = g.matmul_t(a, v(spec.attn.wo));
    let x = g.add(x, o);

    let h2 = g.rms_norm(x, Some(v(spec.ffn_norm)), d, ctx.eps);
    let gate = g.matmul_t(h2, v(spec.w_gate));
    let gate = g.silu(gate);
    let up = g.matmul_t(h2, v(spec.w_up));
    let hidden = g.mul(gate, up);
    let f = g.matmul_t(hidden, v(spec.w_down));
    g.add(x, f)
}

/// Whole-sequence forward of a single layer.
pub fn block_forward<T: Real>(
    x: ArrayView2<T>,
    spec: &LayerSpec,
    store: &ParamStore<T>,
    ctx: &BlockContext<'_, T>,
) -> Array2<T> {
    let mut g = Graph::new();
    let vars = store.register(&mut g);
    let xin = g.input(x.to_owned());
    let y = block_graph(&mut g, &vars, spec, xin, ctx);
    g.value(y).clone()
}

/// Decoding cache of one layer.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Full(KvRing<T>),
    Linear(LinearState<T>),
}

impl<T: Real> LayerCache<T> {
    pub fn new(kind: AttentionKind, scale: &'static str, capacity: usize, d_model: usize, heads: usize) -> Self {
        match kind {
            AttentionKind::Full => LayerCache::Full(KvRing::new(scale, capacity, d_model)),
            _ => LayerCache::Linear(LinearState::new(heads, d_model / heads)),
        }
    }

    pub fn stored_elements(&self) -> usize {
        match self {
            LayerCache::Full(r) => r.stored_elements(),
            LayerCache::Linear(s) => s.stored_elements(),
        }
    }
}

pub(crate) fn matvec<T: Real>(w: &Array2<T>, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); w.nrows()];
    ndarray::linalg::general_mat_vec_mul(
        T::one(),
        w,
        &ArrayView1::from(x),
        T::zero(),
        &mut ArrayViewMut1::from(&mut out[..]),
    );
    out
}

/// Multiply-adds of one layer step: projections, FFN and the attention
/// read (which grows with the sequence only for full attention).
pub fn layer_step_flops(kind: AttentionKind, d_model: usize, hidden: usize, heads: usize, cached: usize) -> u64 {
    let d = d_model as u64;
    let dh = (d_model / heads) as u64;
    let proj = 4 * d * d + if kind == AttentionKind::GatedLinear { d * d } else { 0 };
    let ffn = 3 * d * hidden as u64;
    let attn = match kind {
        AttentionKind::Full => 2 * cached as u64 * d,
        _ => 2 * d * dh,
    };
    proj + ffn + attn
}

/// One decoding step of a layer on the residual vector `x` (updated in
/// place) at `position`. Returns the multiply-add count.
pub fn block_step<T: Real>(
    x: &mut [T],
    spec: &LayerSpec,
    store: &ParamStore<T>,
    cache: &mut LayerCache<T>,
    position: usize,
    ctx: &BlockContext<'_, T>,
) -> Result<u64> {
    let d = x.len();
    let dh = d / ctx.heads;
    let mut h = vec![T::zero(); d];
    rms_norm_into(x, Some(store.get(spec.attn_norm).row(0).as_slice().expect("contiguous")), ctx.eps, &mut h);

    let mut q = matvec(store.get(spec.attn.wq), &h);
    let mut k = matvec(store.get(spec.attn.wk), &h);
    let mut v = matvec(store.get(spec.attn.wv), &h);
    if spec.kind == AttentionKind::GatedLinear {
        for buf in [&mut q, &mut k, &mut v] {
            buf.iter_mut().for_each(|z| *z = silu(*z));
        }
    }
    ctx.rope.rotate(&mut q, position, false);
    ctx.rope.rotate(&mut k, position, false);

    let mut a = vec![T::zero(); d];
    let cached = match (spec.kind, &mut *cache) {
        (AttentionKind::Full, LayerCache::Full(ring)) => {
            full_attention_step(&q, &k, &v, ring, ctx.heads, &mut a)?;
            ring.len()
        }
        (AttentionKind::SimplifiedLinear, LayerCache::Linear(state)) => {
            linear_attention_step(&q, &k, &v, state, ctx.eps, &mut a);
            0
        }
        (AttentionKind::GatedLinear, LayerCache::Linear(state)) => {
            state.update(&k, &v);
            state.read(&q, &mut a);
            head_norm(&mut a, dh, ctx.eps);
            let gate = matvec(store.get(spec.attn.wg.expect("gated layer has wg")), &h);
            for (ai, gi) in a.iter_mut().zip(gate) {
                *ai = *ai * sigmoid(gi);
            }
            0
        }
        (kind, _) => panic!("cache does not match layer kind {kind:?}"),
    };
    let o = matvec(store.get(spec.attn.wo), &a);
    for (xi, oi) in x.iter_mut().zip(o) {
        *xi = *xi + oi;
    }

    rms_norm_into(x, Some(store.get(spec.ffn_norm).row(0).as_slice().expect("contiguous")), ctx.eps, &mut h);
    let gate = matvec(store.get(spec.w_gate), &h);
    let up = matvec(store.get(spec.w_up), &h);
    let hidden: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let f = matvec(store.get(spec.w_down), &hidden);
    for (xi, fi) in x.iter_mut().zip(f) {
        *xi = *xi + fi;
    }
    Ok(layer_step_flops(spec.kind, d, hidden.len(), ctx.heads, cached))
}
