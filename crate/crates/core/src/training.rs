//! Next-token training on tokenized meshes and teacher-forced metrics.
//!
//! The loss is the mean cross-entropy over every target position except
//! `[P]`, summed across the batch and divided by the batch's unmasked
//! count. Per-sequence gradients are computed on worker threads and summed
//! in sequence order, so a run is reproducible for a fixed seed regardless
//! of the thread count.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::hourglass::{forward_graph, model_forward, ModelWeights};
use crate::mesh_codec::{
    augment, canonicalize, load_obj, normalize, tokenize, Mesh, QuantizerConfig, TokenSequence, TOKENS_PER_FACE,
};
use crate::nn::{cross_entropy, perplexity};
use crate::params::ParamStore;
use crate::{worker_threads, Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    /// Learning rate reached at the end of the cosine decay.
    pub min_lr: f64,
    pub seed: u64,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Meshes with more faces are dropped when building a dataset.
    pub max_faces: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 20,
            peak_lr: 1e-3,
            warmup_epochs: 2,
            min_lr: 0.0,
            seed: 0,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            max_faces: 800,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return bad("need 0 <= min_lr <= peak_lr and peak_lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay, in optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            peak: config.peak_lr,
            floor: config.min_lr,
            warmup_steps: config.warmup_epochs * steps_per_epoch,
            total_steps: config.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn lr_at(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    LrSchedule::new(config, steps_per_epoch).lr_at(step)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Array2<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (T::lit(lr), T::lit(self.eps), T::lit(self.weight_decay));
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *w = *w - lr * (step + wd * *w);
                });
        }
    }
}

/// Pads every sequence with `[P]` to the longest length in the batch.
pub fn pad_batch(batch: &[TokenSequence]) -> Vec<Vec<u32>> {
    let len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    batch.iter().map(|s| s.padded(len)).collect()
}

fn targets_of(tokens: &[u32], pad: u32) -> (Vec<u32>, Vec<bool>) {
    let targets = tokens[1..].to_vec();
    let include = targets.iter().map(|&t| t != pad).collect();
    (targets, include)
}

/// Training loss of a padded batch and its gradient for every parameter.
pub fn loss_and_gradients<T: Real>(weights: &ModelWeights<T>, batch: &[Vec<u32>]) -> Result<(T, Vec<Array2<T>>)> {
    let pad = QuantizerConfig::new(weights.config.bins)?.pad_token();
    let count: usize = batch
        .iter()
        .map(|s| s.iter().skip(1).filter(|&&t| t != pad).count())
        .sum();
    if count == 0 {
        return Err(Error::Shape("batch has no unmasked targets".into()));
    }
    let denom = T::from_usize(count).unwrap();

    let one = |tokens: &Vec<u32>| -> Result<Option<(T, Vec<Array2<T>>)>> {
        // Trailing padding cannot influence earlier positions.
        let Some(last) = tokens.iter().rposition(|&t| t != pad) else {
            return Ok(None);
        };
        if last == 0 {
            return Ok(None);
        }
        let tokens = &tokens[..=last];
        let (targets, include) = targets_of(tokens, pad);
        let mut g = Graph::new();
        let vars = weights.store.register(&mut g);
        let (logits, _) = forward_graph(&mut g, &vars, weights, &tokens[..last])?;
        let loss = g.cross_entropy(logits, &targets, &include, denom);
        let value = g.value(loss)[[0, 0]];
        let mut grads = g.backward(loss);
        let per_param = vars
            .iter()
            .zip(weights.store.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
            .collect();
        Ok(Some((value, per_param)))
    };

    let mut loss = T::zero();
    let mut total: Vec<Array2<T>> = weights.store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
    let threads = worker_threads().min(batch.len()).max(1);
    for wave in batch.chunks(threads) {
        let results: Vec<Result<Option<(T, Vec<Array2<T>>)>>> = if wave.len() == 1 {
            vec![one(&wave[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave.iter().map(|s| scope.spawn(|| one(s))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        for r in results {
            if let Some((l, grads)) = r? {
                loss += l;
                for (acc, g) in total.iter_mut().zip(grads) {
                    *acc += &g;
                }
            }
        }
    }
    Ok((loss, total))
}

fn clip_global_norm<T: Real>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * scale));
    }
    norm
}

/// One optimizer step on a padded batch; returns the loss before the
/// update.
pub fn train_step<T: Real>(
    batch: &[Vec<u32>],
    weights: &mut ModelWeights<T>,
    optimizer: &mut Adam<T>,
    lr: f64,
    grad_clip: f64,
    step: usize,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(weights, batch)?;
    let loss = loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss = {loss}"),
        });
    }
    let norm = clip_global_norm(&mut grads, grad_clip);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient norm = {norm}"),
        });
    }
    optimizer.update(&mut weights.store, &grads, lr);
    Ok(loss)
}

/// Fraction of unmasked rows whose argmax (lowest id on ties) equals the
/// target; `0` when every row is masked.
pub fn token_accuracy<T: Real>(logits: ArrayView2<T>, targets: &[u32], mask: &[bool]) -> f64 {
    let (hit, total) = token_tally(logits, targets, mask);
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn token_tally<T: Real>(logits: ArrayView2<T>, targets: &[u32], mask: &[bool]) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for ((row, &t), &m) in logits.rows().into_iter().zip(targets).zip(mask) {
        if m {
            total += 1;
            hit += usize::from(crate::inference::argmax(row.as_slice().expect("contiguous")) == t);
        }
    }
    (hit, total)
}

/// Fraction of complete faces whose nine coordinate targets are all
/// predicted by argmax. `logits` row `i` predicts `tokens[i + 1]`.
pub fn face_accuracy<T: Real>(logits: ArrayView2<T>, tokens: &[u32], bins: u32) -> f64 {
    let (hit, total) = face_tally(logits, tokens, bins);
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn face_tally<T: Real>(logits: ArrayView2<T>, tokens: &[u32], bins: u32) -> (usize, usize) {
    let body = tokens.iter().skip(1).take_while(|&&t| t < bins).count();
    let faces = body / TOKENS_PER_FACE;
    let mut hit = 0;
    for f in 0..faces {
        let rows = f * TOKENS_PER_FACE..(f + 1) * TOKENS_PER_FACE;
        let ok = rows.clone().all(|r| {
            r < logits.nrows() && crate::inference::argmax(logits.row(r).as_slice().expect("contiguous")) == tokens[r + 1]
        });
        hit += usize::from(ok);
    }
    (hit, faces)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub face_accuracy: f64,
    /// Mean masked cross-entropy.
    pub loss: f64,
    pub perplexity: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,token_acc,face_acc,ppl";

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{:.6},{:.6},{:.6}",
            self.token_accuracy, self.face_accuracy, self.perplexity
        )
    }
}

/// Teacher-forced metrics over complete sequences.
pub fn evaluate<T: Real>(weights: &ModelWeights<T>, sequences: &[TokenSequence]) -> Result<EvalReport> {
    let pad = QuantizerConfig::new(weights.config.bins)?.pad_token();
    let vocab = weights.config.vocab_size();
    let mut rows = Vec::new();
    let mut all_targets = Vec::new();
    let mut all_mask = Vec::new();
    let (mut face_hit, mut face_total) = (0, 0);
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let logits = model_forward(&seq.tokens[..seq.len() - 1], weights)?;
        let (targets, include) = targets_of(&seq.tokens, pad);
        let (h, t) = face_tally(logits.view(), &seq.tokens, weights.config.bins);
        face_hit += h;
        face_total += t;
        rows.push(logits);
        all_targets.extend(targets);
        all_mask.extend(include);
    }
    let mut logits = Array2::zeros((all_targets.len(), vocab));
    let mut at = 0;
    for r in rows {
        logits.slice_mut(s![at..at + r.nrows(), ..]).assign(&r);
        at += r.nrows();
    }
    let mean = cross_entropy(logits.view(), &all_targets, &all_mask)?;
    Ok(EvalReport {
        token_accuracy: token_accuracy(logits.view(), &all_targets, &all_mask),
        face_accuracy: if face_total == 0 {
            0.0
        } else {
            face_hit as f64 / face_total as f64
        },
        loss: mean.to_f64_lossy(),
        perplexity: perplexity(mean).to_f64_lossy(),
    })
}

/// Normalized meshes and their canonical token sequences.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub quantizer: QuantizerConfig,
    pub meshes: Vec<Mesh>,
    pub sequences: Vec<TokenSequence>,
}

impl Dataset {
    /// Normalizes and tokenizes `meshes`, dropping any with more than
    /// `max_faces` canonical faces or none at all.
    pub fn from_meshes(meshes: Vec<Mesh>, quantizer: QuantizerConfig, max_faces: usize) -> Result<Self> {
        let mut out = Self {
            quantizer,
            meshes: Vec::new(),
            sequences: Vec::new(),
        };
        for mesh in meshes {
            let norm = normalize(&mesh)?;
            let canon = canonicalize(&norm, &quantizer);
            let faces = canon.mesh.face_count();
            if faces == 0 || faces > max_faces {
                continue;
            }
            out.sequences.push(tokenize(&canon.mesh, &quantizer)?);
            out.meshes.push(norm);
        }
        Ok(out)
    }

    /// Reads a manifest of OBJ paths, one per line; blank lines and `#`
    /// comments are skipped and relative paths resolve against the
    /// manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>, quantizer: QuantizerConfig, max_faces: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut meshes = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            meshes.push(load_obj(base.join(line))?);
        }
        Self::from_meshes(meshes, quantizer, max_faces)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Token sequence of mesh `i`, randomly scaled and shifted when `seed`
    /// is given. Falls back to the canonical sequence if the augmented mesh
    /// collapses.
    pub fn sample(&self, i: usize, seed: Option<u64>) -> Result<TokenSequence> {
        let Some(seed) = seed else {
            return Ok(self.sequences[i].clone());
        };
        let canon = canonicalize(&augment(&self.meshes[i], seed), &self.quantizer);
        if canon.mesh.face_count() == 0 {
            return Ok(self.sequences[i].clone());
        }
        tokenize(&canon.mesh, &self.quantizer)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_s: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss,tokens_per_s";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6e},{:.6},{:.1}", self.step, self.lr, self.loss, self.tokens_per_s)
    }
}

/// Model, optimizer and schedule over a fixed dataset.
pub struct Trainer<T: Real> {
    pub weights: ModelWeights<T>,
    pub config: TrainConfig,
    pub schedule: LrSchedule,
    optimizer: Adam<T>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(weights: ModelWeights<T>, config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let steps_per_epoch = dataset_len.div_ceil(config.batch_size);
        Ok(Self {
            optimizer: Adam::new(&weights.store, &config),
            schedule: LrSchedule::new(&config, steps_per_epoch),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            weights,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One optimizer step at the scheduled learning rate.
    pub fn train_batch(&mut self, batch: &[TokenSequence]) -> Result<StepLog> {
        let padded = pad_batch(batch);
        let tokens: usize = batch.iter().map(|s| s.len()).sum();
        let lr = self.schedule.lr_at(self.step);
        let start = Instant::now();
        let loss = train_step(
            &padded,
            &mut self.weights,
            &mut self.optimizer,
            lr,
            self.config.grad_clip,
            self.step,
        )?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let log = StepLog {
            step: self.step,
            lr,
            loss,
            tokens_per_s: tokens as f64 / secs,
        };
        self.step += 1;
        Ok(log)
    }

    /// One shuffled pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset, log: &mut impl FnMut(&StepLog)) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let seed = self.config.augment.then(|| self.rng.gen());
                    data.sample(i, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let entry = self.train_batch(&batch)?;
            log(&entry);
        }
        Ok(())
    }

    /// Runs every configured epoch.
    pub fn fit(&mut self, data: &Dataset, log: &mut impl FnMut(&StepLog)) -> Result<()> {
        for _ in 0..self.config.epochs {
            self.train_epoch(data, log)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
