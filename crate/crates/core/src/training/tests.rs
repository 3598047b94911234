use ndarray::{array, Array2};

use super::*;
use crate::hourglass::ModelConfig;
use crate::iblock::FullPosition;
use crate::mesh_codec::parse_obj;

const ICOSAHEDRON: &str = include_str!("../../../../assets/meshes/icosahedron.obj");

fn one_hot(targets: &[u32], vocab: usize) -> Array2<f64> {
    let mut l = Array2::zeros((targets.len(), vocab));
    for (i, &t) in targets.iter().enumerate() {
        l[[i, t as usize]] = 1.0;
    }
    l
}

#[test]
fn schedule_shape() {
    let cfg = TrainConfig {
        epochs: 10,
        warmup_epochs: 2,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    let s = LrSchedule::new(&cfg, 5);
    assert_eq!(s.lr_at(0), 0.0);
    assert_eq!(s.lr_at(10), 1e-3);
    assert!((s.lr_at(30) - 5e-4).abs() < 1e-15);
    assert!(s.lr_at(50).abs() < 1e-15);
    assert!((1..50).all(|i| i <= 10 || s.lr_at(i) <= s.lr_at(i - 1)));
    assert_eq!(lr_at(5, &cfg, 5), 5e-4);
}

#[test]
fn accuracy_examples() {
    let targets = [3u32, 1, 4];
    let l = one_hot(&targets, 5);
    assert_eq!(token_accuracy(l.view(), &targets, &[true; 3]), 1.0);
    assert_eq!(token_accuracy(l.view(), &[3, 1, 0], &[true; 3]), 2.0 / 3.0);
    assert_eq!(token_accuracy(l.view(), &[0, 1, 0], &[false, true, false]), 1.0);
    let ties = array![[1.0, 1.0, 0.0]];
    assert_eq!(token_accuracy(ties.view(), &[0], &[true]), 1.0);
    assert_eq!(token_accuracy(ties.view(), &[1], &[true]), 0.0);
}

#[test]
fn face_accuracy_examples() {
    let bins = 128;
    let mut tokens = vec![128];
    tokens.extend((0..90).map(|i| (i * 7 % 128) as u32));
    tokens.push(129);
    let targets = &tokens[1..];
    let mut logits = one_hot(targets, 131);
    assert_eq!(face_accuracy(logits.view(), &tokens, bins), 1.0);
    let row = 40;
    logits[[row, targets[row] as usize]] = 0.0;
    logits[[row, 130]] = 1.0;
    assert!((face_accuracy(logits.view(), &tokens, bins) - 0.9).abs() < 1e-12);
    let tok = token_accuracy(logits.view(), targets, &vec![true; targets.len()]);
    assert!(face_accuracy(logits.view(), &tokens, bins) <= tok);
}

fn icosahedron_data(bins: u32) -> Dataset {
    let mesh = parse_obj(ICOSAHEDRON).unwrap();
    Dataset::from_meshes(vec![mesh], QuantizerConfig::new(bins).unwrap(), 800).unwrap()
}

#[test]
fn initial_loss_is_near_uniform() {
    let data = icosahedron_data(128);
    let w = ModelWeights::<f32>::random(&ModelConfig::micro(32, 4, [1, 1, 2, 1, 1], 256), 0).unwrap();
    let (loss, _) = loss_and_gradients(&w, &pad_batch(&data.sequences)).unwrap();
    assert!((loss - 131f32.ln()).abs() < 0.3, "{loss}");
}

#[test]
fn batch_loss_ignores_padding() {
    let w = ModelWeights::<f64>::random(&ModelConfig::micro(16, 2, [1, 1, 1, 1, 1], 64), 1).unwrap();
    let a = TokenSequence::new(128, [vec![128], (0..18).collect(), vec![129]].concat());
    let b = TokenSequence::new(128, [vec![128], (20..29).collect(), vec![129]].concat());
    let padded = pad_batch(&[a.clone(), b.clone()]);
    assert_eq!(padded[1].len(), padded[0].len());
    let (both, _) = loss_and_gradients(&w, &padded).unwrap();
    let (la, _) = loss_and_gradients(&w, &[a.tokens.clone()]).unwrap();
    let (lb, _) = loss_and_gradients(&w, &[b.tokens.clone()]).unwrap();
    let (na, nb) = (19.0, 10.0);
    assert!((both - (la * na + lb * nb) / (na + nb)).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut cfg = ModelConfig::micro(8, 2, [1, 1, 2, 1, 1], 64);
    cfg.full_position = FullPosition::First;
    cfg.learned_pad = true;
    cfg.bins = 8;
    let mut w = ModelWeights::<f64>::random(&cfg, 2).unwrap();
    let pad = w.layout.pad.unwrap();
    w.store.get_mut(pad[0]).fill(0.1);
    let batch = vec![
        [vec![8], (0..27).map(|i| i % 8).collect::<Vec<_>>(), vec![9]].concat(),
        [vec![8], (0..18).map(|i| (i * 3) % 8).collect::<Vec<_>>(), vec![9, 10, 10]].concat(),
    ];
    let (_, grads) = loss_and_gradients(&w, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..60 {
        let p = rng.gen_range(0..w.store.len());
        let id = crate::params::ParamId(p);
        let (r, c) = w.store.get(id).dim();
        let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let orig = w.store.get(id)[[i, j]];
        w.store.get_mut(id)[[i, j]] = orig + h;
        let (lp, _) = loss_and_gradients(&w, &batch).unwrap();
        w.store.get_mut(id)[[i, j]] = orig - h;
        let (lm, _) = loss_and_gradients(&w, &batch).unwrap();
        w.store.get_mut(id)[[i, j]] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads[p][[i, j]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        assert!(rel < 1e-3, "{} [{i},{j}]: {analytic} vs {numeric}", w.store.iter().nth(p).unwrap().name);
    }
}

#[test]
fn perplexity_is_exp_of_cross_entropy() {
    let data = icosahedron_data(128);
    let w = ModelWeights::<f64>::random(&ModelConfig::micro(16, 2, [1, 1, 1, 1, 1], 256), 4).unwrap();
    let report = evaluate(&w, &data.sequences).unwrap();
    let seq = &data.sequences[0];
    let logits = model_forward(&seq.tokens[..seq.len() - 1], &w).unwrap();
    let ce = cross_entropy(logits.view(), &seq.tokens[1..], &vec![true; seq.len() - 1]).unwrap();
    assert_eq!(report.perplexity, perplexity(ce));
    assert!(report.face_accuracy <= report.token_accuracy);
}

fn overfit_run(steps: usize, seed: u64) -> (Vec<f64>, Trainer<f32>, Dataset) {
    let data = icosahedron_data(128);
    let mut model = ModelConfig::micro(48, 4, [1, 1, 2, 1, 1], 256);
    model.ffn_hidden = Some(96);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: steps,
        warmup_epochs: 5,
        peak_lr: 6e-3,
        augment: false,
        seed,
        ..TrainConfig::default()
    };
    let w = ModelWeights::random(&model, seed).unwrap();
    let mut trainer = Trainer::new(w, cfg, data.len()).unwrap();
    let mut losses = Vec::new();
    trainer.fit(&data, &mut |l| losses.push(l.loss)).unwrap();
    (losses, trainer, data)
}

#[test]
fn memorizes_one_mesh_and_is_deterministic() {
    let (losses, trainer, data) = overfit_run(100, 5);
    assert_eq!(losses.len(), 100);
    assert!(*losses.last().unwrap() < 0.1, "{:?}", &losses[90..]);
    let window = |i: usize| losses[i..i + 20].iter().sum::<f64>();
    assert!((0..4).all(|k| window(20 * (k + 1)) < window(20 * k)));
    let report = evaluate(&trainer.weights, &data.sequences).unwrap();
    assert!(report.token_accuracy > 0.95);

    let (again, _, _) = overfit_run(100, 5);
    assert_eq!(losses, again);
}

#[test]
fn augmented_samples_stay_grammatical() {
    let data = icosahedron_data(128);
    for seed in 0..50 {
        let s = data.sample(0, Some(seed)).unwrap();
        s.check_complete().unwrap();
    }
}

#[test]
fn rejects_bad_configs() {
    let w = ModelWeights::<f32>::random(&ModelConfig::micro(16, 2, [1, 1, 1, 1, 1], 64), 0).unwrap();
    let bad = TrainConfig {
        warmup_epochs: 5,
        epochs: 2,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(w.clone(), bad, 1).is_err());
    assert!(Trainer::new(w, TrainConfig::default(), 0).is_err());
}
