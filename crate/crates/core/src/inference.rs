//! Token-by-token decoding with per-scale caches.
//!
//! Each step embeds one token and runs only the stages whose scale
//! completes a group at this position:
//!
//! | stage | runs when        | position      |
//! |-------|------------------|---------------|
//! | enc0  | every token      | `t`           |
//! | enc1  | `(t+1) % 3 == 0` | `(t+1)/3 - 1` |
//! | core  | `(t+1) % 9 == 0` | `(t+1)/9 - 1` |
//! | dec0  | `(t+1) % 3 == 0` | `(t+1)/3 - 1` |
//! | dec1  | every token      | `t`           |
//!
//! Encoder outputs go into three-slot circular buffers that feed the
//! downsampling projections; decoder inputs read the latest upsampled
//! coarse feature. Full-attention layers keep an append-only key/value
//! store sized to the context of their scale; linear layers keep a constant
//! `H × d_h × d_h` state.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::hourglass::{Layout, ModelConfig, ModelWeights, Scale, Stage, POOL};
use crate::iblock::{block_step, matvec, LayerCache};
use crate::mesh_codec::{classify, QuantizerConfig, TokenKind, TokenSequence, TOKENS_PER_FACE};
use crate::nn::rms_norm_into;
use crate::{Error, Real, Result};

/// Which computations run at position `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// Coordinate encoder.
    pub phi0: bool,
    /// Vertex encoder.
    pub phi1: bool,
    /// Face core.
    pub phi_b: bool,
    /// Vertex decoder.
    pub psi0: bool,
    /// Coordinate decoder.
    pub psi1: bool,
}

pub fn update_schedule(t: usize) -> Schedule {
    let vertex = (t + 1) % POOL == 0;
    Schedule {
        phi0: true,
        phi1: vertex,
        phi_b: (t + 1) % (POOL * POOL) == 0,
        psi0: vertex,
        psi1: true,
    }
}

/// Counters for one [`process_token`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub position: usize,
    /// Multiply-adds, excluding norms and activations.
    pub flops: u64,
    pub stages_run: Vec<Stage>,
    /// Wall time inside full-attention layers (only when timing is on).
    pub full_layer_time: Duration,
    /// Wall time inside linear-attention layers (only when timing is on).
    pub linear_layer_time: Duration,
}

struct StageCache<T> {
    stage: Stage,
    layers: Vec<LayerCache<T>>,
}

/// Decoding state of one session.
pub struct InferenceState<T> {
    position: usize,
    capacity: usize,
    d_model: usize,
    /// Last three coordinate-encoder outputs, slot `t % 3`.
    cache_e0: [Vec<T>; POOL],
    /// Last three vertex-encoder outputs, slot `j % 3`.
    cache_e1: [Vec<T>; POOL],
    /// Latest upsampled face feature, input to the vertex decoder.
    cache_d0: Vec<T>,
    /// Latest upsampled vertex feature, input to the coordinate decoder.
    cache_d1: Vec<T>,
    stages: Vec<StageCache<T>>,
    timing: bool,
    last: StepStats,
}

impl<T: Real> InferenceState<T> {
    /// Empty state sized to the model's context.
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let cfg = &weights.config;
        let d = cfg.d_model;
        let l = cfg.max_context;
        let stages = weights
            .layout
            .stages
            .iter()
            .map(|spec| {
                let scale = spec.stage.scale();
                StageCache {
                    stage: spec.stage,
                    layers: spec
                        .layers
                        .iter()
                        .map(|layer| LayerCache::new(layer.kind, scale.name(), scale.capacity(l), d, cfg.heads))
                        .collect(),
                }
            })
            .collect();
        let pad = |k: usize| match weights.layout.pad {
            Some(p) => weights.store.get(p[k]).row(0).to_vec(),
            None => vec![T::zero(); d],
        };
        Self {
            position: 0,
            capacity: l,
            d_model: d,
            cache_e0: std::array::from_fn(|_| vec![T::zero(); d]),
            cache_e1: std::array::from_fn(|_| vec![T::zero(); d]),
            cache_d0: pad(1),
            cache_d1: pad(0),
            stages,
            timing: false,
            last: StepStats::default(),
        }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Records per-kind layer wall time in [`StepStats`].
    pub fn set_timing(&mut self, on: bool) {
        self.timing = on;
    }

    pub fn last_step(&self) -> &StepStats {
        &self.last
    }

    /// Bytes currently held by attention caches and stage buffers.
    pub fn resident_bytes(&self) -> ResidentBytes {
        let elt = std::mem::size_of::<T>();
        let mut out = ResidentBytes::default();
        for layer in self.stages.iter().flat_map(|s| &s.layers) {
            match layer {
                LayerCache::Full(_) => out.kv_bytes += layer.stored_elements() * elt,
                LayerCache::Linear(_) => out.state_bytes += layer.stored_elements() * elt,
            }
        }
        if self.stages.len() > 1 {
            out.buffer_bytes = (2 * POOL + 2) * self.d_model * elt;
        }
        out
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageCache<T> {
        self.stages
            .iter_mut()
            .find(|s| s.stage == stage)
            .expect("stage present in state")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResidentBytes {
    pub kv_bytes: usize,
    pub state_bytes: usize,
    pub buffer_bytes: usize,
}

impl ResidentBytes {
    pub fn total(&self) -> usize {
        self.kv_bytes + self.state_bytes + self.buffer_bytes
    }
}

fn run_stage<T: Real>(
    x: &mut [T],
    state: &mut InferenceState<T>,
    weights: &ModelWeights<T>,
    stage: Stage,
    position: usize,
    stats: &mut StepStats,
) -> Result<()> {
    let ctx = weights.context();
    let timing = state.timing;
    let spec = weights.layout.stage(stage);
    let cache = state.stage_mut(stage);
    for (layer, lc) in spec.layers.iter().zip(cache.layers.iter_mut()) {
        let start = timing.then(Instant::now);
        stats.flops += block_step(x, layer, &weights.store, lc, position, &ctx)?;
        if let Some(start) = start {
            let dt = start.elapsed();
            match layer.kind {
                AttentionKind::Full => stats.full_layer_time += dt,
                _ => stats.linear_layer_time += dt,
            }
        }
    }
    stats.stages_run.push(stage);
    Ok(())
}

fn project<T: Real>(w: &ndarray::Array2<T>, x: &[T], stats: &mut StepStats) -> Vec<T> {
    stats.flops += (w.nrows() * w.ncols()) as u64;
    matvec(w, x)
}

/// Feeds token `token` at the state's current position and returns the
/// logits for the next token. Advances the position.
pub fn process_token<T: Real>(token: u32, state: &mut InferenceState<T>, weights: &ModelWeights<T>) -> Result<Vec<T>> {
    let cfg = &weights.config;
    let t = state.position;
    if t >= state.capacity {
        return Err(Error::ContextOverflow {
            scale: Scale::Coordinate.name(),
            capacity: state.capacity,
        });
    }
    if token as usize >= cfg.vocab_size() {
        return Err(Error::Shape(format!("token {token} outside vocabulary of {}", cfg.vocab_size())));
    }
    let layout = &weights.layout;
    let mut stats = StepStats {
        position: t,
        ..StepStats::default()
    };
    let mut x = weights.store.get(layout.embed).row(token as usize).to_vec();

    match cfg.layout {
        Layout::Plain => run_stage(&mut x, state, weights, Stage::Stack, t, &mut stats)?,
        Layout::Hourglass => {
            let flags = update_schedule(t);
            let down = layout.down.expect("hourglass has downsample weights");
            let up = layout.up.expect("hourglass has upsample weights");

            run_stage(&mut x, state, weights, Stage::Enc0, t, &mut stats)?;
            state.cache_e0[t % POOL].clone_from(&x);
            let e0 = x;

            let mut e1 = None;
            if flags.phi1 {
                let j = (t + 1) / POOL - 1;
                let mut v = project(weights.store.get(down[0]), &state.cache_e0.concat(), &mut stats);
                run_stage(&mut v, state, weights, Stage::Enc1, j, &mut stats)?;
                state.cache_e1[j % POOL].clone_from(&v);

                if flags.phi_b {
                    let f = (t + 1) / (POOL * POOL) - 1;
                    let mut c = project(weights.store.get(down[1]), &state.cache_e1.concat(), &mut stats);
                    run_stage(&mut c, state, weights, Stage::Core, f, &mut stats)?;
                    state.cache_d0 = project(weights.store.get(up[1]), &c, &mut stats);
                }
                e1 = Some((j, v));
            }

            if flags.psi0 {
                let (j, v) = e1.expect("vertex decoder runs with the vertex encoder");
                let mut d0: Vec<T> = state.cache_d0.iter().zip(&v).map(|(&a, &b)| a + b).collect();
                run_stage(&mut d0, state, weights, Stage::Dec0, j, &mut stats)?;
                state.cache_d1 = project(weights.store.get(up[0]), &d0, &mut stats);
            }

            x = state.cache_d1.iter().zip(&e0).map(|(&a, &b)| a + b).collect();
            run_stage(&mut x, state, weights, Stage::Dec1, t, &mut stats)?;
        }
    }

    let mut h = vec![T::zero(); x.len()];
    let gain = weights.store.get(layout.final_norm);
    rms_norm_into(&x, Some(gain.row(0).as_slice().expect("contiguous")), weights.context().eps, &mut h);
    let logits = project(weights.store.get(layout.head_id()), &h, &mut stats);
    state.position += 1;
    state.last = stats;
    Ok(logits)
}

/// Nucleus sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            top_k: 50,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Slack on the cumulative-probability cutoff so that a prefix summing to
/// `top_p` up to rounding is accepted.
const TOP_P_SLACK: f64 = 1e-9;

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Token ids and renormalized probabilities that [`sample_token`] may
/// return, in descending probability (ties by lower id).
pub fn nucleus_support<T: Real>(logits: &[T], cfg: &SamplerConfig) -> Vec<(u32, f64)> {
    let mut order: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, l.to_f64_lossy() / cfg.temperature))
        .filter(|(_, l)| *l > f64::NEG_INFINITY)
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.truncate(cfg.top_k.max(1));
    let Some(&(_, max)) = order.first() else {
        return Vec::new();
    };
    let mut total = 0.0;
    for (_, l) in order.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, (_, p)) in order.iter_mut().enumerate() {
        *p /= total;
        cum += *p;
        if cum >= cfg.top_p - TOP_P_SLACK {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    let kept: f64 = order.iter().map(|(_, p)| p).sum();
    order.iter_mut().for_each(|(_, p)| *p /= kept);
    order
}

/// Draws one token from the top-k / top-p support.
pub fn sample_token<T: Real>(logits: &[T], cfg: &SamplerConfig, rng: &mut impl Rng) -> u32 {
    let support = nucleus_support(logits, cfg);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(id, p) in &support {
        cum += p;
        if u < cum {
            return id;
        }
    }
    support.last().map(|&(id, _)| id).expect("logits contain a finite value")
}

/// Index of the largest logit, lowest id on ties.
pub fn argmax<T: Real>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Why a generation loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// `[E]` was sampled and appended.
    End,
    /// The face budget was exhausted; no `[E]` is appended.
    FaceLimit,
    /// `[S]` or `[P]` was sampled; it is not appended.
    Special(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub sequence: TokenSequence,
    pub stop: StopReason,
}

/// Options shared by [`generate`] and [`complete`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerateOptions {
    pub sampler: SamplerConfig,
    /// Upper bound on faces in the returned sequence, prefix included.
    pub max_faces: usize,
    /// Masks tokens that would break the grammar at the current position.
    pub strict_grammar: bool,
    /// Picks the most likely token instead of sampling.
    pub greedy: bool,
}

fn grammar_mask<T: Real>(logits: &mut [T], bins: u32, coords: usize) {
    let boundary = coords % TOKENS_PER_FACE == 0;
    for (id, l) in logits.iter_mut().enumerate() {
        let allowed = match classify(bins, id as u32) {
            TokenKind::Coord(_) => true,
            TokenKind::End => boundary && coords > 0,
            _ => false,
        };
        if !allowed {
            *l = T::neg_infinity();
        }
    }
}

fn decode_loop<T: Real>(
    mut tokens: Vec<u32>,
    weights: &ModelWeights<T>,
    opts: &GenerateOptions,
) -> Result<Generation> {
    opts.sampler.validate()?;
    if opts.max_faces == 0 {
        return Err(Error::Config("max_faces must be at least 1".into()));
    }
    let cfg: &ModelConfig = &weights.config;
    let q = QuantizerConfig::new(cfg.bins)?;
    let limit = TOKENS_PER_FACE * opts.max_faces;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sampler.seed);
    let mut state = InferenceState::new(weights);
    let mut logits = Vec::new();
    for &tok in &tokens {
        logits = process_token(tok, &mut state, weights)?;
    }
    loop {
        let coords = tokens.len() - 1;
        if coords >= limit {
            return Ok(Generation {
                sequence: TokenSequence::new(cfg.bins, tokens),
                stop: StopReason::FaceLimit,
            });
        }
        if opts.strict_grammar {
            grammar_mask(&mut logits, cfg.bins, coords);
        }
        let next = if opts.greedy {
            argmax(&logits)
        } else {
            sample_token(&logits, &opts.sampler, &mut rng)
        };
        let stop = match classify(cfg.bins, next) {
            TokenKind::Coord(_) => None,
            _ if next == q.end_token() => {
                tokens.push(next);
                Some(StopReason::End)
            }
            _ => Some(StopReason::Special(next)),
        };
        if let Some(stop) = stop {
            return Ok(Generation {
                sequence: TokenSequence::new(cfg.bins, tokens),
                stop,
            });
        }
        tokens.push(next);
        logits = process_token(next, &mut state, weights)?;
    }
}

/// Samples a mesh sequence from `[S]`.
pub fn generate<T: Real>(weights: &ModelWeights<T>, opts: &GenerateOptions) -> Result<Generation> {
    let start = QuantizerConfig::new(weights.config.bins)?.start_token();
    decode_loop(vec![start], weights, opts)
}

/// Continues a grammatical prefix (`[S]` plus whole faces).
pub fn complete<T: Real>(prefix: &TokenSequence, weights: &ModelWeights<T>, opts: &GenerateOptions) -> Result<Generation> {
    if prefix.bins != weights.config.bins {
        return Err(Error::Grammar(format!(
            "prefix uses {} bins, model uses {}",
            prefix.bins, weights.config.bins
        )));
    }
    let faces = prefix.check_prefix()?;
    if faces > opts.max_faces {
        return Err(Error::Config(format!(
            "prefix has {faces} faces, more than max_faces {}",
            opts.max_faces
        )));
    }
    decode_loop(prefix.tokens.clone(), weights, opts)
}

/// Predicted cache footprint after `n` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheReport {
    pub variant: String,
    pub n: usize,
    pub bytes_per_element: usize,
    /// Cached key/value positions summed over full-attention layers.
    pub kv_positions: usize,
    /// Same for an all-full-attention stack of equal depth at the
    /// coordinate scale.
    pub baseline_positions: usize,
    pub kv_bytes: usize,
    pub state_bytes: usize,
    pub buffer_bytes: usize,
    pub baseline_bytes: usize,
}

impl CacheReport {
    pub fn kv_ratio(&self) -> f64 {
        self.kv_positions as f64 / self.baseline_positions as f64
    }

    /// Key/value reduction against the baseline, in percent.
    pub fn reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.kv_bytes as f64 / self.baseline_bytes as f64)
    }

    pub fn total_bytes(&self) -> usize {
        self.kv_bytes + self.state_bytes + self.buffer_bytes
    }

    pub const CSV_HEADER: &'static str = "variant,n,kv_bytes,state_bytes,buffer_bytes,baseline_bytes,reduction_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.variant,
            self.n,
            self.kv_bytes,
            self.state_bytes,
            self.buffer_bytes,
            self.baseline_bytes,
            self.reduction_pct()
        )
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\nn = {}\nbytes_per_element = {}\nkv_positions = {}\nbaseline_positions = {}\n\
             kv_ratio = {:.6}\nkv_bytes = {}\nstate_bytes = {}\nbuffer_bytes = {}\ntotal_bytes = {}\n\
             baseline_bytes = {}\nreduction_pct = {:.3}\n",
            self.variant,
            self.n,
            self.bytes_per_element,
            self.kv_positions,
            self.baseline_positions,
            self.kv_ratio(),
            self.kv_bytes,
            self.state_bytes,
            self.buffer_bytes,
            self.total_bytes(),
            self.baseline_bytes,
            self.reduction_pct()
        )
    }
}

/// Closed-form cache accounting for `config` after `n` tokens.
pub fn cache_bytes(config: &ModelConfig, variant: &str, n: usize, bytes_per_element: usize) -> CacheReport {
    let d = config.d_model;
    let dh = config.head_dim();
    let mut kv_positions = 0;
    let mut linear_layers = 0;
    for (stage, depth) in config.stages() {
        for i in 0..depth {
            if config.attention_kind(i) == AttentionKind::Full {
                kv_positions += stage.scale().positions(n);
            } else {
                linear_layers += 1;
            }
        }
    }
    let baseline_positions = config.total_layers() * n;
    let kv = |positions: usize| 2 * positions * config.heads * dh * bytes_per_element;
    CacheReport {
        variant: variant.to_string(),
        n,
        bytes_per_element,
        kv_positions,
        baseline_positions,
        kv_bytes: kv(kv_positions),
        state_bytes: linear_layers * config.heads * dh * dh * bytes_per_element,
        buffer_bytes: if config.layout == Layout::Hourglass {
            (2 * POOL + 2) * d * bytes_per_element
        } else {
            0
        },
        baseline_bytes: kv(baseline_positions),
    }
}
