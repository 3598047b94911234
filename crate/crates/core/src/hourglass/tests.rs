use ndarray::{array, Array2};

use super::*;
use crate::iblock::block_forward;
use crate::nn::rms_norm;

fn micro() -> ModelConfig {
    ModelConfig::micro(16, 2, [1, 1, 2, 1, 1], 64)
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    (0..n as u64).map(|i| ((i * 37 + seed * 11) % 128) as u32).collect()
}

#[test]
fn closed_form_count_matches_allocation() {
    let mut configs = vec![micro(), ModelConfig::micro(24, 4, [2, 1, 3, 1, 2], 32)];
    let mut tied = micro();
    tied.tie_embeddings = true;
    tied.learned_pad = true;
    configs.push(tied);
    for v in Variant::ALL {
        configs.push(v.config(&micro(), None));
    }
    for c in configs {
        let w = ModelWeights::<f32>::random(&c, 1).unwrap();
        assert_eq!(w.param_count(), c.param_count(), "{c:?}");
    }
}

#[test]
fn reference_size_is_about_76m() {
    let c = ModelConfig::shapenet();
    assert_eq!(c.hidden(), 1344);
    let n = c.param_count() as f64;
    assert!((n - 76.0e6).abs() / 76.0e6 < 0.10, "{n}");
}

#[test]
fn stage_lengths_follow_the_pool_factor() {
    let w = ModelWeights::<f64>::random(&micro(), 2).unwrap();
    let (logits, trace) = model_forward_traced(&tokens(29, 0), &w).unwrap();
    assert_eq!(logits.dim(), (29, 131));
    assert_eq!(trace.positions(Stage::Enc0), Some(29));
    assert_eq!(trace.positions(Stage::Enc1), Some(9));
    assert_eq!(trace.positions(Stage::Core), Some(3));
    assert_eq!(trace.positions(Stage::Dec0), Some(9));
    assert_eq!(trace.positions(Stage::Dec1), Some(29));
    assert!(logits.iter().all(|v| v.is_finite()));
}

#[test]
fn short_sequences_run_with_empty_coarse_stages() {
    let w = ModelWeights::<f64>::random(&micro(), 3).unwrap();
    for n in 1..10 {
        let (logits, trace) = model_forward_traced(&tokens(n, 1), &w).unwrap();
        assert_eq!(logits.nrows(), n);
        assert_eq!(trace.positions(Stage::Core), Some(n / 9));
    }
}

#[test]
fn hourglass_is_causal() {
    let mut cfg = micro();
    cfg.learned_pad = true;
    let w = ModelWeights::<f64>::random(&cfg, 4).unwrap();
    let base = tokens(40, 2);
    let out = model_forward(&base, &w).unwrap();
    for t in [0, 2, 3, 8, 9, 17, 26, 39] {
        let mut changed = base.clone();
        changed[t] = (changed[t] + 5) % 131;
        let out2 = model_forward(&changed, &w).unwrap();
        for r in 0..40 {
            let diff = (&out.row(r) - &out2.row(r)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if r < t {
                assert_eq!(diff, 0.0, "row {r} saw token {t}");
            } else if r == t {
                assert!(diff > 0.0, "row {r} ignored its own token");
            }
        }
    }
}

#[test]
fn zero_upsample_reduces_to_outer_stacks() {
    let cfg = ModelConfig::micro(16, 2, [2, 1, 1, 1, 2], 64);
    let mut w = ModelWeights::<f64>::random(&cfg, 5).unwrap();
    let up0 = w.layout.up.unwrap()[0];
    w.store.get_mut(up0).fill(0.0);
    let toks = tokens(31, 3);
    let got = model_forward(&toks, &w).unwrap();

    let ctx = w.context();
    let table = w.store.get(w.layout.embed);
    let mut x = Array2::from_shape_fn((toks.len(), 16), |(t, j)| table[[toks[t] as usize, j]]);
    for stage in [Stage::Enc0, Stage::Dec1] {
        for layer in &w.layout.stage(stage).layers {
            x = block_forward(x.view(), layer, &w.store, &ctx);
        }
    }
    let gain = w.store.get(w.layout.final_norm).row(0).to_owned();
    let head = w.store.get(w.layout.head_id());
    let mut want = Array2::zeros(got.dim());
    for t in 0..toks.len() {
        let h = rms_norm(x.row(t), gain.view(), 1e-6);
        want.row_mut(t).assign(&head.dot(&h));
    }
    let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-10, "{err}");
}

#[test]
fn downsample_and_shifted_upsample_by_hand() {
    let fine = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0]];
    let w_down = array![[1.0, 10.0, 100.0]];
    let coarse = downsample(fine.view(), w_down.view(), 3);
    assert_eq!(coarse, array![[321.0], [654.0]]);

    let w_up = array![[2.0]];
    let up = upsample_shifted(coarse.view(), w_up.view(), 3, 8);
    assert_eq!(
        up.column(0).to_vec(),
        vec![0.0, 0.0, 642.0, 642.0, 642.0, 1308.0, 1308.0, 1308.0]
    );
}

#[test]
fn variants_parse_and_configure() {
    for v in Variant::ALL {
        assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        let c = v.config(&ModelConfig::shapenet(), None);
        assert_eq!(c.total_layers(), 24);
        assert_eq!(c.d_model, 512);
    }
    assert!("hourglass".parse::<Variant>().is_err());
    let c = Variant::Full.config(&ModelConfig::shapenet(), None);
    assert!((0..24).all(|i| c.attention_kind(i) == AttentionKind::Full));
    let c = Variant::Linear.config(&ModelConfig::shapenet(), None);
    assert!((0..24).all(|i| c.attention_kind(i).is_linear()));
    let c = Variant::InterleavedSimplified.config(&ModelConfig::shapenet(), None);
    let full: Vec<usize> = (0..24).filter(|&i| c.attention_kind(i) == AttentionKind::Full).collect();
    assert_eq!(full, vec![3, 7, 11, 15, 19, 23]);
    assert_eq!(c.attention_kind(0), AttentionKind::SimplifiedLinear);
    let c = Variant::Interleaved.config(&ModelConfig::shapenet(), None);
    assert_eq!(c.attention_kind(0), AttentionKind::GatedLinear);
}

#[test]
fn rejects_bad_inputs() {
    let w = ModelWeights::<f32>::random(&micro(), 6).unwrap();
    assert!(matches!(model_forward(&[], &w), Err(Error::Shape(_))));
    assert!(matches!(model_forward(&[131], &w), Err(Error::Shape(_))));
    assert!(matches!(
        model_forward(&tokens(65, 0), &w),
        Err(Error::ContextOverflow { .. })
    ));
    let mut c = micro();
    c.heads = 3;
    assert!(ModelWeights::<f32>::random(&c, 0).is_err());
}

#[test]
fn initialization_is_seeded() {
    let a = ModelWeights::<f32>::random(&micro(), 9).unwrap();
    let b = ModelWeights::<f32>::random(&micro(), 9).unwrap();
    let c = ModelWeights::<f32>::random(&micro(), 10).unwrap();
    let same = a.store.iter().zip(b.store.iter()).all(|(x, y)| x.value == y.value);
    let differs = a.store.iter().zip(c.store.iter()).any(|(x, y)| x.value != y.value);
    assert!(same && differs);
}

#[test]
fn config_round_trips_through_toml() {
    let mut c = micro();
    c.learned_pad = true;
    let text = toml::to_string(&c).unwrap();
    let back: ModelConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, c);
    let partial: ModelConfig = toml::from_str("d_model = 64\nheads = 4\n").unwrap();
    assert_eq!(partial.depths, [4, 4, 8, 4, 4]);
}
