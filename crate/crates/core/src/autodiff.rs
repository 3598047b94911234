//! A small reverse-mode tape over row-major matrices.
//!
//! Values are computed eagerly as nodes are appended, so a [`Graph`] doubles
//! as the whole-sequence forward pass; calling [`Graph::backward`] on a
//! `1 × 1` node yields gradients for every node. Parameters are borrowed, not
//! copied. Ops are coarse (a whole causal attention is one node) and each
//! carries a hand-written adjoint.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

use crate::attention::{causal_linear_scores, full_attention_parallel_with_probs, mask_upper};
use crate::nn::{inv_rms, sigmoid, RotaryTable};
use crate::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'p, T> {
    Leaf,
    /// `x · wᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        group: usize,
        eps: T,
    },
    Rope {
        x: Var,
        table: &'p RotaryTable<T>,
    },
    SoftmaxAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    GroupConcat {
        x: Var,
        group: usize,
    },
    ShiftRepeat {
        x: Var,
        factor: usize,
        pad: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        include: Vec<bool>,
        denom: T,
    },
}

struct Node<'p, T: Clone> {
    value: Cow<'p, Array2<T>>,
    op: Op<'p, T>,
}

/// Tape of eagerly evaluated matrix ops.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients returned by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Array2<T>>, op: Op<'p, T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf (a parameter).
    pub fn param(&mut self, value: &'p Array2<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Owned leaf (an input or constant).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let y = self.value(x).dot(&self.value(w).t());
        self.push(Cow::Owned(y), Op::MatMulT(x, w))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(Cow::Owned(y), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(Cow::Owned(y), Op::Mul(a, b))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(crate::nn::silu);
        self.push(Cow::Owned(y), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(sigmoid);
        self.push(Cow::Owned(y), Op::Sigmoid(x))
    }

    /// RMS normalization of every contiguous block of `group` columns, with
    /// an optional `1 × group` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, group: usize, eps: T) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols() % group, 0, "group must divide width");
        let mut y = xv.clone();
        let g = gain.map(|g| self.value(g).row(0).to_vec());
        for mut row in y.axis_iter_mut(Axis(0)) {
            let row = row.as_slice_mut().expect("contiguous");
            for chunk in row.chunks_exact_mut(group) {
                let inv = inv_rms(chunk, eps);
                match &g {
                    Some(g) => chunk.iter_mut().zip(g).for_each(|(v, &gi)| *v = *v * inv * gi),
                    None => chunk.iter_mut().for_each(|v| *v = *v * inv),
                }
            }
        }
        self.push(Cow::Owned(y), Op::RmsNorm { x, gain, group, eps })
    }

    /// Rotary embedding with row index as position.
    pub fn rope(&mut self, x: Var, table: &'p RotaryTable<T>) -> Var {
        let mut y = self.value(x).clone();
        for (t, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            table.rotate(row.as_slice_mut().expect("contiguous"), t, false);
        }
        self.push(Cow::Owned(y), Op::Rope { x, table })
    }

    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (y, probs) = full_attention_parallel_with_probs(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
        );
        self.push(Cow::Owned(y), Op::SoftmaxAttention { q, k, v, heads, probs })
    }

    /// Causal `(Q Kᵀ) V` before normalization.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let y = causal_linear_scores(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
        );
        self.push(Cow::Owned(y), Op::LinearAttention { q, k, v, heads })
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = self.value(table);
        let mut y = Array2::zeros((ids.len(), tv.ncols()));
        for (mut row, &id) in y.axis_iter_mut(Axis(0)).zip(ids) {
            row.assign(&tv.row(id as usize));
        }
        self.push(
            Cow::Owned(y),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates each run of `group` consecutive rows into one row;
    /// trailing rows that do not fill a group are dropped.
    pub fn group_concat(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let m = n / group;
        let mut y = Array2::zeros((m, group * d));
        for j in 0..m {
            for p in 0..group {
                y.slice_mut(s![j, p * d..(p + 1) * d]).assign(&xv.row(j * group + p));
            }
        }
        self.push(Cow::Owned(y), Op::GroupConcat { x, group })
    }

    /// Fine row `t` receives coarse row `(t + 1) / factor - 1`; rows before
    /// the first complete group receive `pad` (or zero).
    pub fn shift_repeat(&mut self, x: Var, factor: usize, rows: usize, pad: Option<Var>) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        let mut y = Array2::zeros((rows, d));
        for t in 0..rows {
            match ((t + 1) / factor).checked_sub(1) {
                Some(j) => y.row_mut(t).assign(&xv.row(j)),
                None => {
                    if let Some(p) = pad {
                        y.row_mut(t).assign(&self.value(p).row(0));
                    }
                }
            }
        }
        self.push(Cow::Owned(y), Op::ShiftRepeat { x, factor, pad })
    }

    /// `Σ_{included} -log softmax(logits_t)[target_t] / denom`, as a `1 × 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], include: &[bool], denom: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(targets.len(), include.len());
        let mut total = T::zero();
        for ((row, &t), &inc) in lv.rows().into_iter().zip(targets).zip(include) {
            if inc {
                total = total + crate::nn::token_nll(row.as_slice().expect("contiguous"), t as usize);
            }
        }
        let y = Array2::from_elem((1, 1), total / denom);
        self.push(
            Cow::Owned(y),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                denom,
            },
        )
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMulT(x, w) => {
                    let dx = dy.dot(self.value(*w));
                    let dw = dy.t().dot(self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &dy * self.value(*b));
                    accumulate(&mut grads, *b, &dy * self.value(*a));
                }
                Op::Silu(x) => {
                    let mut dx = dy.clone();
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &z| {
                        let sg = sigmoid(z);
                        *d = *d * sg * (T::one() + z * (T::one() - sg));
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy.clone();
                    Zip::from(&mut dx).and(&*node.value).for_each(|d, &y| {
                        *d = *d * y * (T::one() - y);
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::RmsNorm { x, gain, group, eps } => {
                    let (dx, dg) = rms_norm_backward(
                        self.value(*x),
                        gain.map(|g| self.value(g)),
                        &dy,
                        *group,
                        *eps,
                    );
                    accumulate(&mut grads, *x, dx);
                    if let (Some(g), Some(dg)) = (gain, dg) {
                        accumulate(&mut grads, *g, dg);
                    }
                }
                Op::Rope { x, table } => {
                    let mut dx = dy.clone();
                    for (t, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        table.rotate(row.as_slice_mut().expect("contiguous"), t, true);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxAttention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) = softmax_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &dy,
                        *heads,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::LinearAttention { q, k, v, heads } => {
                    let (dq, dk, dv) = linear_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &dy,
                        *heads,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Embed { table, ids } => {
                    let mut dt = Array2::zeros(self.value(*table).raw_dim());
                    for (row, &id) in dy.rows().into_iter().zip(ids) {
                        let mut target = dt.row_mut(id as usize);
                        target += &row;
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::GroupConcat { x, group } => {
                    let (n, d) = self.value(*x).dim();
                    let mut dx = Array2::zeros((n, d));
                    for j in 0..dy.nrows() {
                        for p in 0..*group {
                            dx.row_mut(j * group + p).assign(&dy.slice(s![j, p * d..(p + 1) * d]));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ShiftRepeat { x, factor, pad } => {
                    let xv = self.value(*x);
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dpad = Array2::zeros((1, xv.ncols()));
                    for (t, row) in dy.rows().into_iter().enumerate() {
                        match ((t + 1) / factor).checked_sub(1) {
                            Some(j) => {
                                let mut target = dx.row_mut(j);
                                target += &row;
                            }
                            None => {
                                let mut target = dpad.row_mut(0);
                                target += &row;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    if let Some(p) = pad {
                        accumulate(&mut grads, *p, dpad);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    include,
                    denom,
                } => {
                    let scale = dy[[0, 0]] / *denom;
                    let lv = self.value(*logits);
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for (t, (&target, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = lv.row(t);
                        let mut p = row.to_vec();
                        crate::nn::softmax_in_place(&mut p);
                        p[target as usize] = p[target as usize] - T::one();
                        for (d, pi) in dl.row_mut(t).iter_mut().zip(p) {
                            *d = pi * scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn rms_norm_backward<T: Real>(
    x: &Array2<T>,
    gain: Option<&Array2<T>>,
    dy: &Array2<T>,
    group: usize,
    eps: T,
) -> (Array2<T>, Option<Array2<T>>) {
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dg = gain.map(|g| Array2::zeros(g.raw_dim()));
    let g = gain.map(|g| g.row(0).to_vec());
    let gl = T::from_usize(group).unwrap();
    for r in 0..x.nrows() {
        let xr = x.row(r);
        let xr = xr.as_slice().expect("contiguous");
        let dyr = dy.row(r);
        let dyr = dyr.as_slice().expect("contiguous");
        let mut dxr = vec![T::zero(); xr.len()];
        for ((xc, dyc), dxc) in xr
            .chunks_exact(group)
            .zip(dyr.chunks_exact(group))
            .zip(dxr.chunks_exact_mut(group))
        {
            let inv = inv_rms(xc, eps);
            // dxhat = dy * gain
            let dxhat: Vec<T> = match &g {
                Some(g) => dyc.iter().zip(g).map(|(&d, &gi)| d * gi).collect(),
                None => dyc.to_vec(),
            };
            if let Some(dg) = dg.as_mut() {
                for (i, (&d, &xi)) in dyc.iter().zip(xc).enumerate() {
                    dg[[0, i]] = dg[[0, i]] + d * xi * inv;
                }
            }
            let m = dxhat
                .iter()
                .zip(xc)
                .fold(T::zero(), |acc, (&d, &xi)| acc + d * xi * inv)
                / gl;
            for ((o, &d), &xi) in dxc.iter_mut().zip(&dxhat).zip(xc) {
                *o = (d - xi * inv * m) * inv;
            }
        }
        dx.row_mut(r).assign(&ndarray::ArrayView1::from(&dxr[..]));
    }
    (dx, dg)
}

fn softmax_attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    dy: &Array2<T>,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dh = q.ncols() / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate().take(heads) {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = dy.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let dp = doh.dot(&v.slice(cols).t());
        let mut ds = &dp * p;
        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.rows()) {
            let total = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|d, &pi| *d = *d - pi * total);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

fn linear_attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    dy: &Array2<T>,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dh = q.ncols() / heads;
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let doh = dy.slice(cols);
        let mut a = qh.dot(&kh.t());
        mask_upper(&mut a);
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let mut da = doh.dot(&vh.t());
        mask_upper(&mut da);
        dq.slice_mut(cols).assign(&da.dot(&kh));
        dk.slice_mut(cols).assign(&da.t().dot(&qh));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x` against the tape's gradient.
    fn check<'a>(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Graph<'a, f64>, &[Var]) -> Var) {
        let loss_of = |vals: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|v| g.input(v.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l)[[0, 0]]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.input(v.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-4;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Array2::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "input {i} elem {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let heads = 2;
        let table = RotaryTable::<f64>::new(4, 32, 10_000.0).unwrap();

        // rms norm with gain
        check(vec![random(&mut rng, 5, 8), random(&mut rng, 1, 8)], |g, v| {
            let y = g.rms_norm(v[0], Some(v[1]), 8, 1e-6);
            scalar(g, y, 1)
        });
        // grouped rms norm without gain
        check(vec![random(&mut rng, 5, 8)], |g, v| {
            let y = g.rms_norm(v[0], None, 4, 1e-6);
            scalar(g, y, 2)
        });
        // swiglu
        check(
            vec![random(&mut rng, 4, 6), random(&mut rng, 8, 6), random(&mut rng, 8, 6), random(&mut rng, 6, 8)],
            |g, v| {
                let gate = g.matmul_t(v[0], v[1]);
                let gate = g.silu(gate);
                let up = g.matmul_t(v[0], v[2]);
                let hidden = g.mul(gate, up);
                let y = g.matmul_t(hidden, v[3]);
                scalar(g, y, 3)
            },
        );
        // rope + softmax attention
        check(
            vec![random(&mut rng, 6, 8), random(&mut rng, 6, 8), random(&mut rng, 6, 8)],
            |g, v| {
                let q = g.rope(v[0], &table);
                let k = g.rope(v[1], &table);
                let y = g.softmax_attention(q, k, v[2], heads);
                scalar(g, y, 4)
            },
        );
        // linear attention + head norm + sigmoid gate
        check(
            vec![random(&mut rng, 7, 8), random(&mut rng, 7, 8), random(&mut rng, 7, 8)],
            |g, v| {
                let y = g.linear_attention(v[0], v[1], v[2], heads);
                let y = g.rms_norm(y, None, 4, 1e-6);
                let gate = g.sigmoid(v[0]);
                let y = g.mul(y, gate);
                scalar(g, y, 5)
            },
        );
        // group concat + shift repeat with a learned pad + embedding + CE
        check(
            vec![random(&mut rng, 10, 3), random(&mut rng, 3, 9), random(&mut rng, 1, 3)],
            |g, v| {
                let x = g.embed(v[0], &[1, 4, 2, 9, 0, 3, 3, 7]);
                let c = g.group_concat(x, 3);
                let c = g.matmul_t(c, v[1]);
                let f = g.shift_repeat(c, 3, 8, Some(v[2]));
                let f = g.add(f, x);
                let targets = [0, 1, 2, 0, 1, 2, 1, 0];
                let mut include = [true; 8];
                include[5] = false;
                g.cross_entropy(f, &targets, &include, 7.0)
            },
        );
    }

    fn scalar(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
        let (n, d) = g.value(y).dim();
        let targets: Vec<u32> = (0..n).map(|t| ((t as u64 * 7 + seed) % d as u64) as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(random(&mut rng, n, d));
        let z = g.mul(y, w);
        g.cross_entropy(z, &targets, &vec![true; n], n as f64)
    }
}
