//! Numeric layer primitives shared by the whole-sequence and incremental
//! paths: RMS normalization, SwiGLU, rotary embeddings, softmax and
//! cross-entropy.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::{Error, Real, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// `x / sqrt(mean(x^2) + eps)`, optionally scaled by `gain`, written to `out`.
pub fn rms_norm_into<T: Real>(x: &[T], gain: Option<&[T]>, eps: T, out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    let inv = inv_rms(x, eps);
    match gain {
        Some(g) => {
            for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
                *o = xi * inv * gi;
            }
        }
        None => {
            for (o, &xi) in out.iter_mut().zip(x) {
                *o = xi * inv;
            }
        }
    }
}

pub(crate) fn inv_rms<T: Real>(x: &[T], eps: T) -> T {
    let n = T::from_usize(x.len()).unwrap_or_else(T::one);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    T::one() / (ms + eps).sqrt()
}

pub fn rms_norm<T: Real>(x: ArrayView1<T>, gain: ArrayView1<T>, eps: T) -> Array1<T> {
    let x = x.to_vec();
    let g = gain.to_vec();
    let mut out = vec![T::zero(); x.len()];
    rms_norm_into(&x, Some(&g), eps, &mut out);
    Array1::from(out)
}

pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// Hidden width of the SwiGLU feed-forward: `8d/3` rounded to the nearest
/// multiple of 64 (at least 64).
pub fn ffn_hidden_dim(d_model: usize) -> usize {
    let raw = 8.0 * d_model as f64 / 3.0;
    let rounded = (raw / 64.0).round() as usize * 64;
    rounded.max(64)
}

/// `W_down (silu(W_gate x) ⊙ (W_up x))` with weights stored `out × in`.
pub fn swiglu_ffn<T: Real>(
    x: ArrayView1<T>,
    w_gate: ArrayView2<T>,
    w_up: ArrayView2<T>,
    w_down: ArrayView2<T>,
) -> Array1<T> {
    let gate = w_gate.dot(&x);
    let up = w_up.dot(&x);
    let hidden = ndarray::Zip::from(&gate)
        .and(&up)
        .map_collect(|&g, &u| silu(g) * u);
    w_down.dot(&hidden)
}

/// Precomputed rotary angles: `angle(t, i) = t * base^(-2i / head_dim)`.
#[derive(Clone, Debug)]
pub struct RotaryTable<T> {
    head_dim: usize,
    base: f64,
    positions: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RotaryTable<T> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for t in 0..max_positions {
            for i in 0..half {
                let angle = t as f64 * Self::frequency(base, head_dim, i);
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(Self {
            head_dim,
            base,
            positions: max_positions,
            cos,
            sin,
        })
    }

    fn frequency(base: f64, head_dim: usize, i: usize) -> f64 {
        base.powf(-2.0 * i as f64 / head_dim as f64)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_positions(&self) -> usize {
        self.positions
    }

    fn cos_sin(&self, position: usize, i: usize) -> (T, T) {
        let half = self.head_dim / 2;
        if position < self.positions {
            let k = position * half + i;
            (self.cos[k], self.sin[k])
        } else {
            let angle = position as f64 * Self::frequency(self.base, self.head_dim, i);
            (T::lit(angle.cos()), T::lit(angle.sin()))
        }
    }

    /// Rotates each pair `(x[2i], x[2i+1])` of every head in `x` by
    /// `sign * angle(position, i)`; `sign = -1` applies the inverse.
    pub fn rotate(&self, x: &mut [T], position: usize, inverse: bool) {
        debug_assert_eq!(x.len() % self.head_dim, 0);
        for head in x.chunks_exact_mut(self.head_dim) {
            for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                let (c, s) = self.cos_sin(position, i);
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

/// Applies rotary position embedding to one head vector (or several
/// concatenated heads) at `position`.
pub fn rope_apply<T: Real>(x: ArrayView1<T>, position: usize, table: &RotaryTable<T>) -> Result<Array1<T>> {
    if x.len() % table.head_dim() != 0 {
        return Err(Error::Shape(format!(
            "vector of length {} is not a multiple of head dim {}",
            x.len(),
            table.head_dim()
        )));
    }
    let mut v = x.to_vec();
    table.rotate(&mut v, position, false);
    Ok(Array1::from(v))
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Real>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// `-log softmax(logits)[target]` for one row.
pub fn token_nll<T: Real>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - logits[target]
}

/// Mean negative log-likelihood over rows where `include` is true.
pub fn cross_entropy<T: Real>(logits: ArrayView2<T>, targets: &[u32], include: &[bool]) -> Result<T> {
    if logits.nrows() != targets.len() || targets.len() != include.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            include.len()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (row, (&t, &inc)) in logits.rows().into_iter().zip(targets.iter().zip(include)) {
        if !inc {
            continue;
        }
        if t as usize >= row.len() {
            return Err(Error::Shape(format!("target {t} outside vocabulary of {}", row.len())));
        }
        let row = row.to_vec();
        total = total + token_nll(&row, t as usize);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Shape("every position is masked".into()));
    }
    Ok(total / T::from_usize(count).unwrap())
}

pub fn perplexity<T: Real>(mean_nll: T) -> T {
    mean_nll.exp()
}
