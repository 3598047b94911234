//! Decode benchmark over the ablation variants.
//!
//! Weights are random; timings and cache sizes do not depend on them. Each
//! of the `B` sessions runs on its own thread and all sessions advance in
//! lockstep through `n` greedy steps.

use std::time::{Duration, Instant};

use crate::hourglass::{ModelConfig, ModelWeights, Variant};
use crate::inference::{argmax, cache_bytes, process_token, InferenceState};
use crate::mesh_codec::QuantizerConfig;
use crate::{Error, Result};

/// Bench configuration for `variant`, derived from `base` with its context
/// sized to `n`.
pub fn variant_config(variant: Variant, base: &ModelConfig, n: usize) -> ModelConfig {
    ModelConfig {
        max_context: n,
        ..variant.config(base, None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub variant: String,
    pub n: usize,
    pub batch: usize,
    pub ms_per_token: f64,
    pub tokens_per_s: f64,
    /// Predicted cache bytes for the batch after `n` tokens.
    pub cache_bytes: usize,
    /// Measured cache bytes held by the batch at the end of a run.
    pub peak_resident_bytes: usize,
    pub wall_time_s: f64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "variant,n,batch,ms_per_token,tokens_per_s,cache_bytes,peak_resident_bytes,wall_time_s,status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.2},{},{},{:.3},{}",
            self.variant,
            self.n,
            self.batch,
            self.ms_per_token,
            self.tokens_per_s,
            self.cache_bytes,
            self.peak_resident_bytes,
            self.wall_time_s,
            self.status.replace(',', ";")
        )
    }

    fn failed(variant: Variant, n: usize, batch: usize, err: &Error) -> Self {
        Self {
            variant: variant.label().into(),
            n,
            batch,
            ms_per_token: f64::NAN,
            tokens_per_s: f64::NAN,
            cache_bytes: 0,
            peak_resident_bytes: 0,
            wall_time_s: 0.0,
            status: format!("error: {err}"),
        }
    }
}

/// Greedy decode of `n` tokens from `[S]`; returns the final resident bytes.
fn decode_session(weights: &ModelWeights<f32>, n: usize) -> Result<usize> {
    let mut state = InferenceState::new(weights);
    let mut token = QuantizerConfig::new(weights.config.bins)?.start_token();
    for _ in 0..n {
        let logits = process_token(token, &mut state, weights)?;
        token = argmax(&logits);
    }
    Ok(state.resident_bytes().total())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times `runs` warm decodes (after one warm-up) of `n` tokens for `batch`
/// sessions. Failures become a report with an error status.
pub fn run_decode_bench(variant: Variant, base: &ModelConfig, n: usize, batch: usize, runs: usize, seed: u64) -> BenchReport {
    match try_bench(variant, base, n, batch, runs, seed) {
        Ok(r) => r,
        Err(e) => BenchReport::failed(variant, n, batch, &e),
    }
}

fn try_bench(variant: Variant, base: &ModelConfig, n: usize, batch: usize, runs: usize, seed: u64) -> Result<BenchReport> {
    if n == 0 || batch == 0 || runs == 0 {
        return Err(Error::Config("n, batch and runs must be positive".into()));
    }
    let cfg = variant_config(variant, base, n);
    let weights = ModelWeights::<f32>::random(&cfg, seed)?;
    let mut times = Vec::new();
    let mut resident = 0;
    let mut wall = Duration::ZERO;
    for run in 0..=runs {
        let start = Instant::now();
        let results: Vec<Result<usize>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..batch)
                .map(|_| scope.spawn(|| decode_session(&weights, n)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench session panicked")).collect()
        });
        let elapsed = start.elapsed();
        resident = results.into_iter().sum::<Result<usize>>()?;
        if run > 0 {
            times.push(elapsed.as_secs_f64() * 1e3 / n as f64);
            wall += elapsed;
        }
    }
    let ms = median(times);
    Ok(BenchReport {
        variant: variant.label().into(),
        n,
        batch,
        ms_per_token: ms,
        tokens_per_s: batch as f64 * 1000.0 / ms,
        cache_bytes: batch * cache_bytes(&cfg, variant.label(), n, 4).total_bytes(),
        peak_resident_bytes: resident,
        wall_time_s: wall.as_secs_f64(),
        status: "ok".into(),
    })
}

/// Per-step wall time spent in full and in linear attention layers, summed
/// over blocks of nine steps so every block has the same stage schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StepProfile {
    pub full_ns: Vec<f64>,
    pub linear_ns: Vec<f64>,
}

impl StepProfile {
    /// Median block time over `[from, to)` as a fraction of the sequence.
    fn window(xs: &[f64], from: f64, to: f64) -> f64 {
        let a = (xs.len() as f64 * from) as usize;
        let b = ((xs.len() as f64 * to) as usize).max(a + 1);
        median(xs[a..b].to_vec())
    }

    /// Late over early median block time for full layers.
    pub fn full_growth(&self) -> f64 {
        Self::window(&self.full_ns, 0.75, 1.0) / Self::window(&self.full_ns, 0.05, 0.25)
    }

    /// Late over early median block time for linear layers.
    pub fn linear_growth(&self) -> f64 {
        Self::window(&self.linear_ns, 0.75, 1.0) / Self::window(&self.linear_ns, 0.05, 0.25)
    }
}

/// Decodes `n` greedy tokens with per-layer timing switched on, `repeats`
/// times, keeping the fastest time seen for each 9-step block.
pub fn profile_steps(
    variant: Variant,
    base: &ModelConfig,
    n: usize,
    seed: u64,
    repeats: usize,
) -> Result<StepProfile> {
    let cfg = variant_config(variant, base, n);
    let weights = ModelWeights::<f32>::random(&cfg, seed)?;
    let mut best: Option<StepProfile> = None;
    for _ in 0..repeats.max(1) {
        let run = profile_once(&cfg, &weights, n)?;
        best = Some(match best {
            None => run,
            Some(b) => StepProfile {
                full_ns: b.full_ns.iter().zip(&run.full_ns).map(|(a, c)| a.min(*c)).collect(),
                linear_ns: b.linear_ns.iter().zip(&run.linear_ns).map(|(a, c)| a.min(*c)).collect(),
            },
        });
    }
    Ok(best.expect("at least one repeat"))
}

fn profile_once(cfg: &ModelConfig, weights: &ModelWeights<f32>, n: usize) -> Result<StepProfile> {
    let mut state = InferenceState::new(weights);
    state.set_timing(true);
    let mut token = QuantizerConfig::new(cfg.bins)?.start_token();
    let mut full = Vec::new();
    let mut linear = Vec::new();
    let (mut f, mut l) = (0.0, 0.0);
    for t in 0..n {
        let logits = process_token(token, &mut state, weights)?;
        token = argmax(&logits);
        let s = state.last_step();
        f += s.full_layer_time.as_nanos() as f64;
        l += s.linear_layer_time.as_nanos() as f64;
        if (t + 1) % 9 == 0 {
            full.push(std::mem::take(&mut f));
            linear.push(std::mem::take(&mut l));
        }
    }
    Ok(StepProfile {
        full_ns: full,
        linear_ns: linear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::micro(32, 4, [1, 1, 2, 1, 1], 64)
    }

    #[test]
    fn report_fields_and_accounting() {
        for v in Variant::ALL {
            let r = run_decode_bench(v, &tiny(), 45, 2, 1, 0);
            assert_eq!(r.status, "ok");
            assert_eq!(r.cache_bytes, r.peak_resident_bytes, "{v}");
            assert!((r.tokens_per_s - 2.0 * 1000.0 / r.ms_per_token).abs() < 1e-6);
            assert_eq!(r.csv_row().split(',').count(), BenchReport::CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn failures_become_rows() {
        let r = run_decode_bench(Variant::Full, &tiny(), 0, 1, 1, 0);
        assert!(r.status.starts_with("error"));
        assert!(r.csv_row().ends_with(&r.status.replace(',', ";")));
    }

    #[test]
    fn profile_has_one_entry_per_block() {
        let base = ModelConfig::micro(32, 4, [4, 4, 4, 4, 4], 64);
        let p = profile_steps(Variant::InterleavedSimplifiedHourglass, &base, 90, 0, 2).unwrap();
        assert_eq!(p.full_ns.len(), 10);
        assert!(p.full_ns.iter().all(|&x| x > 0.0));
        assert!(p.full_growth().is_finite() && p.linear_growth().is_finite());
    }
}
