//! Causal softmax attention and linear attention.
//!
//! Each mechanism comes in two forms: a whole-sequence kernel over `n × d`
//! matrices (heads laid out as contiguous column blocks of width `d / H`),
//! and a single decoding step that reads and extends a per-layer cache.
//! For full attention the cache is a [`KvRing`] that grows with the
//! sequence; for linear attention it is a [`LinearState`] of `H` matrices of
//! size `d_h × d_h`, updated as `S ← S + k vᵀ`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{inv_rms, softmax_in_place};
use crate::{Error, Real, Result};

/// Attention mechanism used by one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Causal softmax attention with `1/sqrt(d_h)` scaling.
    Full,
    /// `Norm(q (Σ k vᵀ))`: no feature map, no gate.
    SimplifiedLinear,
    /// Linear attention with SiLU on q, k, v and a sigmoid output gate.
    GatedLinear,
}

impl AttentionKind {
    pub fn is_linear(self) -> bool {
        !matches!(self, AttentionKind::Full)
    }
}

fn head_cols(h: usize, head_dim: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * head_dim..(h + 1) * head_dim]
}

fn check_qkv<T>(q: &ArrayView2<T>, k: &ArrayView2<T>, v: &ArrayView2<T>, heads: usize) -> usize {
    assert_eq!(q.dim(), k.dim(), "q/k shape mismatch");
    assert_eq!(q.dim(), v.dim(), "q/v shape mismatch");
    assert!(heads > 0 && q.ncols() % heads == 0, "heads must divide width");
    q.ncols() / heads
}

/// Row-wise causal softmax of `Q Kᵀ / sqrt(d_h)` times `V`, per head.
pub fn full_attention_parallel<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
) -> Array2<T> {
    full_attention_parallel_with_probs(q, k, v, heads).0
}

/// As [`full_attention_parallel`], also returning the per-head attention
/// probabilities (zero above the diagonal).
pub(crate) fn full_attention_parallel_with_probs<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let dh = check_qkv(&q, &k, &v, heads);
    let n = q.nrows();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(head_cols(h, dh));
        let kh = k.slice(head_cols(h, dh));
        let vh = v.slice(head_cols(h, dh));
        let mut p = qh.dot(&kh.t());
        for (t, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            for x in row[..=t].iter_mut() {
                *x = *x * scale;
            }
            softmax_in_place(&mut row[..=t]);
            for x in row[t + 1..].iter_mut() {
                *x = T::zero();
            }
        }
        debug_assert_eq!(p.nrows(), n);
        out.slice_mut(head_cols(h, dh)).assign(&p.dot(&vh));
        probs.push(p);
    }
    (out, probs)
}

/// Causal `(Q Kᵀ) V` per head with the upper triangle masked, before the
/// output normalization.
pub fn causal_linear_scores<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
) -> Array2<T> {
    let dh = check_qkv(&q, &k, &v, heads);
    let mut out = Array2::zeros(q.raw_dim());
    for h in 0..heads {
        let qh = q.slice(head_cols(h, dh));
        let kh = k.slice(head_cols(h, dh));
        let vh = v.slice(head_cols(h, dh));
        let mut a = qh.dot(&kh.t());
        mask_upper(&mut a);
        out.slice_mut(head_cols(h, dh)).assign(&a.dot(&vh));
    }
    out
}

pub(crate) fn mask_upper<T: Real>(a: &mut Array2<T>) {
    for (t, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        for x in row.iter_mut().skip(t + 1) {
            *x = T::zero();
        }
    }
}

/// Unit-gain RMS normalization of each head block of each row.
pub fn head_norm_rows<T: Real>(x: &mut Array2<T>, heads: usize, eps: T) {
    let dh = x.ncols() / heads;
    for mut row in x.axis_iter_mut(Axis(0)) {
        let row = row.as_slice_mut().expect("contiguous row");
        head_norm(row, dh, eps);
    }
}

pub(crate) fn head_norm<T: Real>(x: &mut [T], head_dim: usize, eps: T) {
    for chunk in x.chunks_exact_mut(head_dim) {
        let inv = inv_rms(chunk, eps);
        for v in chunk.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Whole-sequence linear attention: `Norm((Q Kᵀ) V)` with causal masking.
pub fn linear_attention_parallel<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    eps: T,
) -> Array2<T> {
    let mut out = causal_linear_scores(q, k, v, heads);
    head_norm_rows(&mut out, heads, eps);
    out
}

/// Append-only key/value store for one full-attention layer.
///
/// Writes land at slot `t mod capacity`; since a session never wraps, the
/// slot equals `t` and overflowing the capacity is an error rather than an
/// eviction.
#[derive(Clone, Debug)]
pub struct KvRing<T> {
    scale: &'static str,
    capacity: usize,
    width: usize,
    len: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> KvRing<T> {
    pub fn new(scale: &'static str, capacity: usize, width: usize) -> Self {
        Self {
            scale,
            capacity,
            width,
            len: 0,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, k: &[T], v: &[T]) -> Result<()> {
        if self.len >= self.capacity {
            return Err(Error::ContextOverflow {
                scale: self.scale,
                capacity: self.capacity,
            });
        }
        debug_assert_eq!(k.len(), self.width);
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.len += 1;
        Ok(())
    }

    pub fn key(&self, slot: usize) -> &[T] {
        &self.keys[slot * self.width..(slot + 1) * self.width]
    }

    pub fn value(&self, slot: usize) -> &[T] {
        &self.values[slot * self.width..(slot + 1) * self.width]
    }

    /// Elements held in keys and values.
    pub fn stored_elements(&self) -> usize {
        2 * self.len * self.width
    }
}

/// One decoding step of causal softmax attention: appends `(k, v)` and
/// attends `q` over every stored entry.
pub fn full_attention_step<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    ring: &mut KvRing<T>,
    heads: usize,
    out: &mut [T],
) -> Result<()> {
    ring.push(k, v)?;
    let width = q.len();
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let n = ring.len();
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &ring.key(j)[cols.clone()];
            *s = dot(qh, kh) * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[cols.clone()];
        oh.iter_mut().for_each(|x| *x = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vh = &ring.value(j)[cols.clone()];
            for (o, &x) in oh.iter_mut().zip(vh) {
                *o = *o + p * x;
            }
        }
    }
    Ok(())
}

/// Running `Σ_s k_s v_sᵀ` per head.
#[derive(Clone, Debug)]
pub struct LinearState<T> {
    heads: usize,
    head_dim: usize,
    state: Vec<T>,
}

impl<T: Real> LinearState<T> {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            state: vec![T::zero(); heads * head_dim * head_dim],
        }
    }

    /// `S ← S + k vᵀ` for every head.
    pub fn update(&mut self, k: &[T], v: &[T]) {
        let dh = self.head_dim;
        for h in 0..self.heads {
            let block = &mut self.state[h * dh * dh..(h + 1) * dh * dh];
            let kh = &k[h * dh..(h + 1) * dh];
            let vh = &v[h * dh..(h + 1) * dh];
            for (i, &ki) in kh.iter().enumerate() {
                let row = &mut block[i * dh..(i + 1) * dh];
                for (s, &vj) in row.iter_mut().zip(vh) {
                    *s = *s + ki * vj;
                }
            }
        }
    }

    /// `qᵀ S` per head, before normalization.
    pub fn read(&self, q: &[T], out: &mut [T]) {
        let dh = self.head_dim;
        for h in 0..self.heads {
            let block = &self.state[h * dh * dh..(h + 1) * dh * dh];
            let qh = &q[h * dh..(h + 1) * dh];
            let oh = &mut out[h * dh..(h + 1) * dh];
            oh.iter_mut().for_each(|x| *x = T::zero());
            for (i, &qi) in qh.iter().enumerate() {
                let row = &block[i * dh..(i + 1) * dh];
                for (o, &s) in oh.iter_mut().zip(row) {
                    *o = *o + qi * s;
                }
            }
        }
    }

    pub fn stored_elements(&self) -> usize {
        self.state.len()
    }

    pub fn matrix(&self, head: usize) -> &[T] {
        let dd = self.head_dim * self.head_dim;
        &self.state[head * dd..(head + 1) * dd]
    }
}

/// One recurrent step of linear attention: `S ← S + k vᵀ`, returns
/// `Norm(qᵀ S)` in `out`. Work is independent of the position.
pub fn linear_attention_step<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    state: &mut LinearState<T>,
    eps: T,
    out: &mut [T],
) {
    state.update(k, v);
    state.read(q, out);
    head_norm(out, state.head_dim, eps);
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Largest `|a - b|` divided by the largest `|b|` (with a floor of `1e-30`).
pub fn relative_error<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff = diff.max((x - y).abs().to_f64_lossy());
        scale = scale.max(y.abs().to_f64_lossy());
    }
    diff / scale.max(1e-30)
}
