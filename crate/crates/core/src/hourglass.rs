//! The three-scale hourglass model.
//!
//! ```text
//! tokens → embed → enc0 ─────────────(Φ_coord)──────────────┐
//!                   └→ down → enc1 ──(Φ_vertex)──────┐        │
//!                                 └→ down → core → up⇢ + → dec0 → up⇢ + → dec1 → head
//! ```
//!
//! `enc0`/`dec1` see every token, `enc1`/`dec0` every third (one per
//! vertex) and `core` every ninth (one per face). `down` projects the
//! concatenation of three consecutive fine positions; `up⇢` projects and
//! repeats each coarse position three times shifted right by two, so fine
//! position `t` only sees groups that end at or before `t`. Skips are
//! additive.
//!
//! The same module also describes the plain single-stack variants used for
//! ablations.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::autodiff::{Graph, Var};
use crate::iblock::{block_graph, layer_kind, BlockContext, FullPosition, LayerKind, LayerSpec};
use crate::nn::{ffn_hidden_dim, RotaryTable, DEFAULT_NORM_EPS, DEFAULT_ROPE_BASE};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Real, Result};

/// Pooling factor between adjacent scales (3 coordinates per vertex, 3
/// vertices per face).
pub const POOL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Hourglass,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Full,
    Linear,
    Interleaved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearFlavor {
    Simplified,
    Gated,
}

impl LinearFlavor {
    pub fn kind(self) -> AttentionKind {
        match self {
            LinearFlavor::Simplified => AttentionKind::SimplifiedLinear,
            LinearFlavor::Gated => AttentionKind::GatedLinear,
        }
    }
}

/// Resolution a stage runs at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Coordinate,
    Vertex,
    Face,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Coordinate => "coordinate",
            Scale::Vertex => "vertex",
            Scale::Face => "face",
        }
    }

    /// Number of positions at this scale after `n` coordinate tokens.
    pub fn positions(self, n: usize) -> usize {
        match self {
            Scale::Coordinate => n,
            Scale::Vertex => n / POOL,
            Scale::Face => n / (POOL * POOL),
        }
    }

    /// Cache capacity for a coordinate context of `n`.
    pub fn capacity(self, n: usize) -> usize {
        match self {
            Scale::Coordinate => n,
            Scale::Vertex => n.div_ceil(POOL),
            Scale::Face => n.div_ceil(POOL * POOL),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Enc0,
    Enc1,
    Core,
    Dec0,
    Dec1,
    Stack,
}

impl Stage {
    pub const HOURGLASS: [Stage; 5] = [Stage::Enc0, Stage::Enc1, Stage::Core, Stage::Dec0, Stage::Dec1];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Enc0 => "enc0",
            Stage::Enc1 => "enc1",
            Stage::Core => "core",
            Stage::Dec0 => "dec0",
            Stage::Dec1 => "dec1",
            Stage::Stack => "stack",
        }
    }

    pub fn scale(self) -> Scale {
        match self {
            Stage::Enc0 | Stage::Dec1 | Stage::Stack => Scale::Coordinate,
            Stage::Enc1 | Stage::Dec0 => Scale::Vertex,
            Stage::Core => Scale::Face,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub bins: u32,
    /// Longest token sequence (coordinate positions) a session may hold.
    pub max_context: usize,
    pub layout: Layout,
    /// Stage depths `(enc0, enc1, core, dec0, dec1)` for the hourglass.
    pub depths: [usize; 5],
    /// Depth of the single stack for the plain layout.
    pub plain_depth: usize,
    pub mixing: Mixing,
    pub linear: LinearFlavor,
    pub full_position: FullPosition,
    /// Overrides the `8d/3` SwiGLU width rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
    /// Learned vectors instead of zeros for fine positions before the first
    /// complete coarse group.
    pub learned_pad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::shapenet()
    }
}

impl ModelConfig {
    /// 24 layers, d = 512, 16 heads, b = 128, contexts up to 4000 faces.
    pub fn shapenet() -> Self {
        Self {
            d_model: 512,
            heads: 16,
            bins: 128,
            max_context: 9 * 4000 + 2,
            layout: Layout::Hourglass,
            depths: [4, 4, 8, 4, 4],
            plain_depth: 24,
            mixing: Mixing::Interleaved,
            linear: LinearFlavor::Simplified,
            full_position: FullPosition::Last,
            ffn_hidden: None,
            rope_base: DEFAULT_ROPE_BASE,
            norm_eps: DEFAULT_NORM_EPS,
            tie_embeddings: false,
            learned_pad: false,
        }
    }

    /// Same as [`ModelConfig::shapenet`] with d = 1024.
    pub fn objaverse() -> Self {
        Self {
            d_model: 1024,
            ..Self::shapenet()
        }
    }

    /// Small hourglass for tests and desk-scale training.
    pub fn micro(d_model: usize, heads: usize, depths: [usize; 5], max_context: usize) -> Self {
        Self {
            d_model,
            heads,
            max_context,
            depths,
            plain_depth: depths.iter().sum(),
            ffn_hidden: Some(2 * d_model),
            ..Self::shapenet()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.bins as usize + 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or_else(|| ffn_hidden_dim(self.d_model))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embedding", self.head_dim()));
        }
        crate::mesh_codec::QuantizerConfig::new(self.bins)?;
        if self.max_context == 0 {
            return bad("max_context must be positive".into());
        }
        if self.hidden() == 0 {
            return bad("ffn hidden width must be positive".into());
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return bad("norm_eps and rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<(Stage, usize)> {
        match self.layout {
            Layout::Hourglass => Stage::HOURGLASS.iter().copied().zip(self.depths).collect(),
            Layout::Plain => vec![(Stage::Stack, self.plain_depth)],
        }
    }

    pub fn total_layers(&self) -> usize {
        self.stages().iter().map(|(_, d)| d).sum()
    }

    /// Attention kind of layer `i` within a stage.
    pub fn attention_kind(&self, i: usize) -> AttentionKind {
        match self.mixing {
            Mixing::Full => AttentionKind::Full,
            Mixing::Linear => self.linear.kind(),
            Mixing::Interleaved => match layer_kind(i, self.full_position) {
                LayerKind::Full => AttentionKind::Full,
                LayerKind::Linear => self.linear.kind(),
            },
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = self.hidden();
        let layer = |kind: AttentionKind| {
            2 * d + 4 * d * d + if kind == AttentionKind::GatedLinear { d * d } else { 0 } + 3 * d * h
        };
        let mut total = self.vocab_size() * d + d;
        if !self.tie_embeddings {
            total += self.vocab_size() * d;
        }
        for (_, depth) in self.stages() {
            total += (0..depth).map(|i| layer(self.attention_kind(i))).sum::<usize>();
        }
        if self.layout == Layout::Hourglass {
            total += 2 * (POOL * d * d) + 2 * d * d;
            if self.learned_pad {
                total += 2 * d;
            }
        }
        total
    }
}

/// The five ablation variants sharing `d`, heads and vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    Linear,
    Interleaved,
    InterleavedSimplified,
    InterleavedSimplifiedHourglass,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Linear,
        Variant::Interleaved,
        Variant::InterleavedSimplified,
        Variant::InterleavedSimplifiedHourglass,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Linear => "linear",
            Variant::Interleaved => "I",
            Variant::InterleavedSimplified => "I+S",
            Variant::InterleavedSimplifiedHourglass => "I+S+H",
        }
    }

    /// Derives this variant from `base`, keeping width, heads, vocabulary,
    /// context and numerics. Plain variants get `plain_depth` layers (by
    /// default the hourglass's total).
    pub fn config(self, base: &ModelConfig, plain_depth: Option<usize>) -> ModelConfig {
        let total = plain_depth.unwrap_or_else(|| base.depths.iter().sum());
        let plain = |mixing, linear| ModelConfig {
            layout: Layout::Plain,
            plain_depth: total,
            mixing,
            linear,
            ..base.clone()
        };
        match self {
            Variant::Full => plain(Mixing::Full, LinearFlavor::Gated),
            Variant::Linear => plain(Mixing::Linear, LinearFlavor::Gated),
            Variant::Interleaved => plain(Mixing::Interleaved, LinearFlavor::Gated),
            Variant::InterleavedSimplified => plain(Mixing::Interleaved, LinearFlavor::Simplified),
            Variant::InterleavedSimplifiedHourglass => ModelConfig {
                layout: Layout::Hourglass,
                mixing: Mixing::Interleaved,
                linear: LinearFlavor::Simplified,
                ..base.clone()
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "linear" => Ok(Variant::Linear),
            "i" => Ok(Variant::Interleaved),
            "i+s" => Ok(Variant::InterleavedSimplified),
            "i+s+h" => Ok(Variant::InterleavedSimplifiedHourglass),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, linear, I, I+S, I+S+H)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageSpec {
    pub stage: Stage,
    pub layers: Vec<LayerSpec>,
}

/// Parameter ids of the whole model.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub embed: ParamId,
    pub stages: Vec<StageSpec>,
    /// `[coordinate→vertex, vertex→face]`, each `d × 3d`.
    pub down: Option<[ParamId; 2]>,
    /// `[vertex→coordinate, face→vertex]`, each `d × d`.
    pub up: Option<[ParamId; 2]>,
    /// Learned pads, same indexing as `up`.
    pub pad: Option<[ParamId; 2]>,
    pub final_norm: ParamId,
    /// `None` when tied to the embedding.
    pub head: Option<ParamId>,
}

impl ModelLayout {
    pub fn stage(&self, stage: Stage) -> &StageSpec {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .expect("stage present in layout")
    }

    pub fn head_id(&self) -> ParamId {
        self.head.unwrap_or(self.embed)
    }
}

/// Configuration plus parameters and derived tables.
#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: ModelLayout,
    pub rope: RotaryTable<T>,
}

impl<T: Real> ModelWeights<T> {
    /// Random initialization, deterministic in `seed`.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size();
        let mut store = ParamStore::new();
        let residual_std = 1.0 / (2.0 * config.total_layers().max(1) as f64).sqrt();
        let embed_std = if config.tie_embeddings { 0.02 } else { 1.0 };
        let embed = store.push_random("embed", (v, d), embed_std, &mut rng);

        let mut stages = Vec::new();
        for (stage, depth) in config.stages() {
            let layers = (0..depth)
                .map(|i| {
                    LayerSpec::init(
                        &mut store,
                        stage.name(),
                        i,
                        config.attention_kind(i),
                        d,
                        config.hidden(),
                        residual_std,
                        &mut rng,
                    )
                })
                .collect();
            stages.push(StageSpec { stage, layers });
        }

        let (down, up, pad) = if config.layout == Layout::Hourglass {
            let down_std = 1.0 / ((POOL * d) as f64).sqrt();
            let up_std = 1.0 / (d as f64).sqrt();
            let down = [
                store.push_random("down0", (d, POOL * d), down_std, &mut rng),
                store.push_random("down1", (d, POOL * d), down_std, &mut rng),
            ];
            let up = [
                store.push_random("up0", (d, d), up_std, &mut rng),
                store.push_random("up1", (d, d), up_std, &mut rng),
            ];
            let pad = config
                .learned_pad
                .then(|| [store.push("pad0", Array2::zeros((1, d))), store.push("pad1", Array2::zeros((1, d)))]);
            (Some(down), Some(up), pad)
        } else {
            (None, None, None)
        };
        let final_norm = store.push("final_norm", Array2::ones((1, d)));
        let head = (!config.tie_embeddings).then(|| store.push_random("head", (v, d), 0.02, &mut rng));

        let rope = RotaryTable::new(config.head_dim(), config.max_context, config.rope_base)?;
        Ok(Self {
            config: config.clone(),
            store,
            layout: ModelLayout {
                embed,
                stages,
                down,
                up,
                pad,
                final_norm,
                head,
            },
            rope,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn context(&self) -> BlockContext<'_, T> {
        BlockContext {
            heads: self.config.heads,
            eps: T::lit(self.config.norm_eps),
            rope: &self.rope,
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                scale: Scale::Coordinate.name(),
                capacity: self.config.max_context,
            });
        }
        let vocab = self.config.vocab_size() as u32;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

/// Positions processed by each stage during one whole-sequence forward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub stage_positions: Vec<(Stage, usize)>,
}

impl ForwardTrace {
    pub fn positions(&self, stage: Stage) -> Option<usize> {
        self.stage_positions
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|&(_, n)| n)
    }
}

fn stage_graph<'p, T: Real>(
    g: &mut Graph<'p, T>,
    vars: &[Var],
    spec: &StageSpec,
    mut x: Var,
    ctx: &BlockContext<'p, T>,
    trace: &mut ForwardTrace,
) -> Var {
    trace.stage_positions.push((spec.stage, g.value(x).nrows()));
    for layer in &spec.layers {
        x = block_graph(g, vars, layer, x, ctx);
    }
    x
}

/// Builds the whole-sequence forward pass on `g` and returns the logits
/// node (`n × vocab`). Row `t` parameterizes the token at `t + 1`.
pub fn forward_graph<'p, T: Real>(
    g: &mut Graph<'p, T>,
    vars: &[Var],
    weights: &'p ModelWeights<T>,
    tokens: &[u32],
) -> Result<(Var, ForwardTrace)> {
    weights.check_tokens(tokens)?;
    let cfg = &weights.config;
    let layout = &weights.layout;
    let ctx = weights.context();
    let v = |id: ParamId| vars[id.index()];
    let mut trace = ForwardTrace::default();
    let n = tokens.len();

    let x = g.embed(v(layout.embed), tokens);
    let top = match cfg.layout {
        Layout::Plain => stage_graph(g, vars, layout.stage(Stage::Stack), x, &ctx, &mut trace),
        Layout::Hourglass => {
            let down = layout.down.expect("hourglass has downsample weights");
            let up = layout.up.expect("hourglass has upsample weights");
            let pad = layout.pad.map(|p| p.map(v));

            let phi_coord = stage_graph(g, vars, layout.stage(Stage::Enc0), x, &ctx, &mut trace);
            let grouped = g.group_concat(phi_coord, POOL);
            let vin = g.matmul_t(grouped, v(down[0]));
            let phi_vertex = stage_graph(g, vars, layout.stage(Stage::Enc1), vin, &ctx, &mut trace);
            let m = g.value(phi_vertex).nrows();

            let grouped = g.group_concat(phi_vertex, POOL);
            let fin = g.matmul_t(grouped, v(down[1]));
            let core = stage_graph(g, vars, layout.stage(Stage::Core), fin, &ctx, &mut trace);

            let up_face = g.matmul_t(core, v(up[1]));
            let up_face = g.shift_repeat(up_face, POOL, m, pad.map(|p| p[1]));
            let d0_in = g.add(up_face, phi_vertex);
            let d0 = stage_graph(g, vars, layout.stage(Stage::Dec0), d0_in, &ctx, &mut trace);

            let up_vertex = g.matmul_t(d0, v(up[0]));
            let up_vertex = g.shift_repeat(up_vertex, POOL, n, pad.map(|p| p[0]));
            let d1_in = g.add(up_vertex, phi_coord);
            stage_graph(g, vars, layout.stage(Stage::Dec1), d1_in, &ctx, &mut trace)
        }
    };
    let normed = g.rms_norm(top, Some(v(layout.final_norm)), cfg.d_model, ctx.eps);
    let logits = g.matmul_t(normed, v(layout.head_id()));
    Ok((logits, trace))
}

/// Whole-sequence logits, `n × (b + 3)`.
pub fn model_forward<T: Real>(tokens: &[u32], weights: &ModelWeights<T>) -> Result<Array2<T>> {
    Ok(model_forward_traced(tokens, weights)?.0)
}

pub fn model_forward_traced<T: Real>(tokens: &[u32], weights: &ModelWeights<T>) -> Result<(Array2<T>, ForwardTrace)> {
    let mut g = Graph::new();
    let vars = weights.store.register(&mut g);
    let (logits, trace) = forward_graph(&mut g, &vars, weights, tokens)?;
    Ok((g.value(logits).clone(), trace))
}

/// `coarse_j = W_down · concat(fine_{pj}, …, fine_{pj+p-1})`; length
/// `floor(n / p)`.
pub fn downsample<T: Real>(fine: ArrayView2<T>, w_down: ArrayView2<T>, p: usize) -> Array2<T> {
    let mut g = Graph::new();
    let x = g.input(fine.to_owned());
    let w = g.input(w_down.to_owned());
    let grouped = g.group_concat(x, p);
    let y = g.matmul_t(grouped, w);
    g.value(y).clone()
}

/// Fine position `t` receives `W_up · coarse_{(t+1)/p - 1}`, and zero for
/// `t < p - 1`.
pub fn upsample_shifted<T: Real>(coarse: ArrayView2<T>, w_up: ArrayView2<T>, p: usize, n_fine: usize) -> Array2<T> {
    let mut g = Graph::new();
    let x = g.input(coarse.to_owned());
    let w = g.input(w_up.to_owned());
    let projected = g.matmul_t(x, w);
    let y = g.shift_repeat(projected, p, n_fine, None);
    g.value(y).clone()
}

#[cfg(test)]
mod tests;
