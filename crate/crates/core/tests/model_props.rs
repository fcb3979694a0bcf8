mod common;

use common::{random_ids, random_model_config};
use posenet_core::data::{make_batch, EOS};
use posenet_core::tensor::{Graph, Tensor};
use posenet_core::{Model, ModelConfig, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(model: &Model, params: &Parameters, pairs: &[(Vec<usize>, Vec<usize>)]) -> Tensor {
    let batch = make_batch(pairs, model.config().max_length).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&params.bind(&mut g, false)).unwrap();
    let out = model.forward_batch(&mut g, &vars, &batch).unwrap();
    g.value(out).clone()
}

fn row(t: &Tensor, b: usize, i: usize) -> &[f64] {
    let (m, v) = (t.shape()[1], t.shape()[2]);
    &t.data()[(b * m + i) * v..(b * m + i + 1) * v]
}

#[test]
fn later_targets_never_change_earlier_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let cfg = random_model_config(&mut rng);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_parameters(trial).unwrap();
        let m = rng.gen_range(2..8);
        let n = rng.gen_range(1..8);
        let src = random_ids(&mut rng, n, cfg.vocab_size);
        let tgt = random_ids(&mut rng, m, cfg.vocab_size);
        let j = rng.gen_range(0..m);
        let mut changed = tgt.clone();
        changed[j] = 4 + (changed[j] - 4 + 1) % (cfg.vocab_size - 4);
        let a = logits(&model, &params, &[(src.clone(), tgt)]);
        let b = logits(&model, &params, &[(src, changed)]);
        for i in 0..=j {
            assert_eq!(
                row(&a, 0, i),
                row(&b, 0, i),
                "trial {trial}: position {i} saw target {j}"
            );
        }
    }
}

#[test]
fn padding_a_batch_leaves_real_positions_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let cfg = random_model_config(&mut rng);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_parameters(trial).unwrap();
        let short = (
            random_ids(&mut rng, 3, cfg.vocab_size),
            random_ids(&mut rng, 2, cfg.vocab_size),
        );
        let long = (
            random_ids(&mut rng, 9, cfg.vocab_size),
            random_ids(&mut rng, 10, cfg.vocab_size),
        );
        let alone = logits(&model, &params, std::slice::from_ref(&short));
        let padded = logits(&model, &params, &[short.clone(), long]);
        for i in 0..=short.1.len() {
            for (a, b) in row(&alone, 0, i).iter().zip(row(&padded, 0, i)) {
                assert!((a - b).abs() < 1e-9, "trial {trial}, position {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let pairs = vec![(vec![4, 5, 6, 7], vec![4, 5, 6, 7]), (vec![8, 9], vec![8, 9])];
    let a = logits(&model, &model.init_parameters(5).unwrap(), &pairs);
    let b = logits(&model, &model.init_parameters(5).unwrap(), &pairs);
    assert_eq!(a, b);
    let c = logits(&model, &model.init_parameters(6).unwrap(), &pairs);
    assert_ne!(a, c);
}

#[test]
fn greedy_output_agrees_with_teacher_forcing_on_its_own_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..10 {
        let cfg = random_model_config(&mut rng);
        let model = Model::new(cfg.clone()).unwrap();
        let params = model.init_parameters(trial).unwrap();
        let sources: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let n = rng.gen_range(1..6);
                random_ids(&mut rng, n, cfg.vocab_size)
            })
            .collect();
        let first = model.greedy_generate(&params, &sources, 8).unwrap();
        assert_eq!(first, model.greedy_generate(&params, &sources, 8).unwrap());
        for (src, out) in sources.iter().zip(&first) {
            assert!(out.len() <= 8);
            let body: Vec<usize> = out.iter().copied().filter(|&id| id != EOS).collect();
            assert!(body.len() + 1 >= out.len());
            // Teacher forcing the generated sequence reproduces each argmax.
            let forced = logits(&model, &params, &[(src.clone(), body.clone())]);
            let width = forced.shape()[1];
            for (i, &id) in out.iter().enumerate().take(width) {
                assert_eq!(
                    posenet_core::model::argmax(row(&forced, 0, i)),
                    id,
                    "trial {trial}, step {i}"
                );
            }
        }
    }
}

#[test]
fn initial_weights_have_the_uniform_spread() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let params = model.init_parameters(0).unwrap();
    let w = params.get("encoder.0.ffn.0.weight").unwrap();
    assert_eq!(w.shape(), &[64, 256]);
    let n = w.data().len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expected = (1.0 / 8.0) / 3f64.sqrt();
    assert!((std - expected).abs() < 0.2 * expected, "std {std} vs {expected}");
    for (name, t) in params.iter() {
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&x| x == 1.0));
        }
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let cfg = ModelConfig {
        vocab_size: 16,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).unwrap();
    let params = model.init_parameters(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..100)
        .map(|_| {
            let s = random_ids(&mut rng, 9, 16);
            (s.clone(), s)
        })
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for chunk in pairs.chunks(25) {
        let batch = make_batch(chunk, 64).unwrap();
        let out = logits(&model, &params, chunk);
        for b in 0..batch.size {
            for i in 0..batch.tgt_len {
                total += 1;
                hits += usize::from(posenet_core::model::argmax(row(&out, b, i)) == batch.tgt_row(b)[i]);
            }
        }
    }
    assert_eq!(total, 1000);
    let acc = hits as f64 / total as f64;
    assert!((acc - 1.0 / 16.0).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn parameter_count_matches_inventory() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let params = model.init_parameters(0).unwrap();
    let expected: usize = model
        .inventory()
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    assert_eq!(params.count(), expected);
    assert!(params.get("output.weight").unwrap().shape() == [64, 20]);
}
