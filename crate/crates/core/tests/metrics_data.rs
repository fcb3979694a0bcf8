use posenet_core::data::{generate_corpus, overlap_rate, transduce, TaskKind, TaskSpec};
use posenet_core::metrics::{approx_bleu, in_top_k, token_accuracy};
use posenet_core::tensor::{Mask, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward BLEU: every n-gram occurrence is counted by scanning the
/// reference, clipped by comparing occurrence counts directly.
fn brute_force_bleu(cands: &[Vec<usize>], refs: &[Vec<usize>], max_order: usize) -> f64 {
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return 0.0;
    }
    let occurrences = |seq: &[usize], gram: &[usize]| {
        if seq.len() < gram.len() {
            return 0;
        }
        (0..=seq.len() - gram.len())
            .filter(|&i| &seq[i..i + gram.len()] == gram)
            .count()
    };
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<&[usize]> = Vec::new();
            for i in 0..=c.len() - n {
                total += 1;
                let gram = &c[i..i + n];
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                matched += occurrences(c, gram).min(occurrences(r, gram));
            }
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_sum / max_order as f64).exp()
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let size = rng.gen_range(1..6);
    let vocab = rng.gen_range(2..=8);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(0..=10);
        (0..len).map(|_| rng.gen_range(0..vocab)).collect()
    };
    let cands = (0..size).map(|_| seq(rng)).collect();
    let refs = (0..size).map(|_| seq(rng)).collect();
    (cands, refs)
}

#[test]
fn bleu_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let (cands, refs) = random_corpus(&mut rng);
        let fast = approx_bleu(&cands, &refs, 4).unwrap();
        let slow = brute_force_bleu(&cands, &refs, 4);
        assert!((fast - slow).abs() < 1e-9, "trial {trial}: {fast} vs {slow}");
    }
}

#[test]
fn bleu_ignores_sentence_order_and_scores_identity_as_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let (mut cands, mut refs) = random_corpus(&mut rng);
        let before = approx_bleu(&cands, &refs, 4).unwrap();
        cands.reverse();
        refs.reverse();
        assert!((approx_bleu(&cands, &refs, 4).unwrap() - before).abs() < 1e-12);
        if cands.iter().map(Vec::len).sum::<usize>() > 0 {
            assert_eq!(approx_bleu(&cands, &cands, 4).unwrap(), 1.0);
        }
    }
}

proptest! {
    #[test]
    fn accuracy_grows_with_k(values in prop::collection::vec(-3.0f64..3.0, 24), targets in prop::collection::vec(0usize..6, 4)) {
        let logits = Tensor::new(vec![4, 6], values).unwrap();
        let mask = Mask::all(vec![4]);
        let mut prev = 0.0;
        for k in 1..=6 {
            let acc = token_accuracy(&logits, &targets, &mask, k).unwrap();
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn exactly_k_entries_rank_in_the_top_k(row in prop::collection::vec(-2i32..2, 1..9), k in 1usize..9) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let inside = (0..row.len()).filter(|&t| in_top_k(&row, t, k)).count();
        prop_assert_eq!(inside, k.min(row.len()));
    }

    #[test]
    fn reverse_is_an_involution(src in prop::collection::vec(4usize..20, 0..20)) {
        let once = transduce(TaskKind::Reverse, 16, &src);
        prop_assert_eq!(transduce(TaskKind::Reverse, 16, &once), src);
    }

    #[test]
    fn rotation_composes(src in prop::collection::vec(4usize..20, 0..20), a in 0usize..16, b in 0usize..16) {
        let twice = transduce(TaskKind::Rotate(b), 16, &transduce(TaskKind::Rotate(a), 16, &src));
        prop_assert_eq!(twice, transduce(TaskKind::Rotate((a + b) % 16), 16, &src));
    }
}

#[test]
fn corpora_are_seeded_and_well_formed() {
    let spec = TaskSpec {
        kind: TaskKind::Reverse,
        ..Default::default()
    };
    let a = generate_corpus(&spec, 300, 5);
    assert_eq!(a, generate_corpus(&spec, 300, 5));
    assert_ne!(a, generate_corpus(&spec, 300, 6));
    let other_seed = TaskSpec {
        seed: 1,
        ..spec.clone()
    };
    assert_ne!(a, generate_corpus(&other_seed, 300, 5));
    for (src, tgt) in &a {
        assert!((spec.min_len..=spec.max_len).contains(&src.len()));
        assert!(src.iter().all(|&id| (4..20).contains(&id)));
        assert_eq!(tgt, &transduce(spec.kind, spec.symbols, src));
    }
    let lengths: std::collections::BTreeSet<usize> = a.iter().map(|p| p.0.len()).collect();
    assert_eq!(lengths.len(), spec.max_len - spec.min_len + 1);
}

#[test]
fn overlap_rate_counts_shared_sources() {
    let train = vec![(vec![4, 5], vec![4, 5]), (vec![6], vec![6])];
    let held = vec![
        (vec![4, 5], vec![4, 5]),
        (vec![7], vec![7]),
        (vec![6], vec![6]),
        (vec![8], vec![8]),
    ];
    assert_eq!(overlap_rate(&train, &held), 0.5);
    let spec = TaskSpec::default();
    let rate = overlap_rate(&generate_corpus(&spec, 1000, 1), &generate_corpus(&spec, 200, 2));
    assert!(rate < 0.05, "{rate}");
}
