use std::collections::BTreeSet;

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use ulmfit::corpus::{chunk_documents, kfold_split, stratified_split, Document, Sample};
use ulmfit::eval::{compute_metrics, kfold_summary, perplexity};
use ulmfit::model::{softmax_rows, variational_mask, LstmState, Model, ModelConfig};
use ulmfit::optim::{AdamConfig, AdamState};
use ulmfit::pipeline::{
    classifier_train_step, lm_train_step, make_lm_batches, new_optimizer, unfreeze_steps, LabeledIds, TrainConfig,
};
use ulmfit::schedules::{discriminative_lrs, momentum_for, sgdr, stlr, unfreeze_plan, DISCRIMINATIVE_DIVISOR};
use ulmfit::tokenize::{Mode, SubwordModel, Tokenizer};
use ulmfit::{Rng, Tensor};

fn samples(counts: &[usize]) -> Vec<Sample> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(a, &n)| {
            (0..n).map(move |i| Sample {
                tokens: vec![format!("w{i}")],
                author: format!("author{a}"),
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stlr_is_a_triangle(total in 10usize..400, cut_frac in 0.05f64..0.9, ratio in 1.5f64..64.0, lr in 1e-4f64..1.0) {
        let cut = (total as f64 * cut_frac).floor() as usize;
        prop_assume!(cut >= 1 && cut < total);
        let v: Vec<f64> = (0..=total).map(|t| stlr(t, total, cut_frac, ratio, lr).unwrap()).collect();
        prop_assert!((v[cut] - lr).abs() <= 1e-15 * lr);
        prop_assert!(v.iter().all(|&x| x <= v[cut]));
        prop_assert!((v[0] - lr / ratio).abs() <= 1e-15 * lr);
        prop_assert!((v[total] - lr / ratio).abs() <= 1e-15 * lr);
        // Linear on each side of the peak.
        for t in 1..total {
            if t != cut {
                let second = v[t + 1] - 2.0 * v[t] + v[t - 1];
                prop_assert!(second.abs() <= 1e-12 * lr, "t {} second difference {}", t, second);
            }
        }
    }

    #[test]
    fn sgdr_decreases_continuously(total in 1usize..500, lr_max in 1e-4f64..1.0, frac in 0.0f64..0.9) {
        let lr_min = lr_max * frac;
        let v: Vec<f64> = (0..=total).map(|t| sgdr(t, total, lr_max, lr_min).unwrap()).collect();
        prop_assert!((v[0] - lr_max).abs() <= 1e-15);
        prop_assert!((v[total] - lr_min).abs() <= 1e-15);
        let max_jump = std::f64::consts::PI * (lr_max - lr_min) / (2.0 * total as f64) + 1e-15;
        for w in v.windows(2) {
            prop_assert!(w[1] <= w[0]);
            prop_assert!(w[0] - w[1] <= max_jump);
        }
    }

    #[test]
    fn discriminative_rates_increase_towards_the_head(lr in 1e-5f64..1.0, n in 2usize..10) {
        let lrs = discriminative_lrs(lr, n, DISCRIMINATIVE_DIVISOR).unwrap();
        prop_assert_eq!(lrs.len(), n);
        prop_assert!(lrs.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(lrs[n - 1], lr);
        prop_assert!((lrs[n - 1] / lrs[0] - DISCRIMINATIVE_DIVISOR).abs() <= 1e-12 * DISCRIMINATIVE_DIVISOR);
    }

    #[test]
    fn momentum_moves_against_the_rate(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let m_lo = momentum_for(1e-3 + lo * 1e-2, 1e-3, 1.1e-2, (0.8, 0.7));
        let m_hi = momentum_for(1e-3 + hi * 1e-2, 1e-3, 1.1e-2, (0.8, 0.7));
        prop_assert!(m_hi <= m_lo);
        prop_assert!((0.7..=0.8).contains(&m_lo) && (0.7..=0.8).contains(&m_hi));
    }

    #[test]
    fn metrics_are_permutation_equivariant(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = compute_metrics(&preds, &labels, 5).unwrap();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let q = compute_metrics(&pp, &pl, 5).unwrap();
        prop_assert_eq!(m.accuracy, q.accuracy);
        prop_assert!((m.macro_f1 - q.macro_f1).abs() <= 1e-15);
        for c in 0..5 {
            prop_assert_eq!(&m.per_class[c], &q.per_class[perm[c]]);
            prop_assert!((0.0..=1.0).contains(&m.per_class[c].f1));
            for d in 0..5 {
                prop_assert_eq!(m.confusion[c][d], q.confusion[perm[c]][perm[d]]);
            }
        }
    }

    #[test]
    fn margin_is_t_times_s_over_root_k(scores in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let s = kfold_summary(&scores, 0.95).unwrap();
        prop_assert!(s.margin_of_error >= 0.0);
        let k = scores.len() as f64;
        let t = StudentsT::new(0.0, 1.0, k - 1.0).unwrap().inverse_cdf(0.975);
        prop_assert!((s.margin_of_error - t * s.std_dev / k.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn doubling_folds_at_fixed_spread(k in 2usize..10, spread in 0.001f64..0.2) {
        // Alternating ±a has sample deviation a·√(k/(k−1)); choose a so that
        // s is the same for k and 2k.
        let make = |k: usize| -> Vec<f64> {
            let a = spread * ((k as f64 - 1.0) / k as f64).sqrt();
            (0..k).map(|i| 0.5 + if i % 2 == 0 { a } else { -a }).collect()
        };
        let (k1, k2) = (2 * k, 4 * k);
        let s1 = kfold_summary(&make(k1), 0.95).unwrap();
        let s2 = kfold_summary(&make(k2), 0.95).unwrap();
        prop_assert!((s1.std_dev - spread).abs() <= 1e-12 && (s2.std_dev - spread).abs() <= 1e-12);
        let t = |k: usize| StudentsT::new(0.0, 1.0, k as f64 - 1.0).unwrap().inverse_cdf(0.975);
        let ratio = (s2.margin_of_error / t(k2)) / (s1.margin_of_error / t(k1));
        prop_assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12);
    }

    #[test]
    fn perplexity_is_monotone(a in 0.0f64..20.0, b in 0.0f64..20.0) {
        if a < b {
            prop_assert!(perplexity(a) < perplexity(b));
        }
    }

    #[test]
    fn stratified_split_is_pure_exact_and_seeded(counts in prop::collection::vec(2usize..40, 1..6), frac in 0.05f64..0.6, seed in any::<u64>()) {
        let s = samples(&counts);
        let split = stratified_split(&s, frac, seed).unwrap();
        prop_assert_eq!(&split, &stratified_split(&s, frac, seed).unwrap());
        let train: BTreeSet<usize> = split.train.iter().copied().collect();
        let test: BTreeSet<usize> = split.test.iter().copied().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), s.len());
        for (a, &n) in counts.iter().enumerate() {
            let name = format!("author{a}");
            let held = split.test.iter().filter(|&&i| s[i].author == name).count();
            prop_assert_eq!(held, ((n as f64 * frac).floor() as usize).max(1));
        }
    }

    #[test]
    fn kfold_partitions_are_disjoint_and_balanced(counts in prop::collection::vec(5usize..30, 1..5), k in 2usize..6, seed in any::<u64>()) {
        let s = samples(&counts);
        let folds = kfold_split(&s, k, seed).unwrap();
        prop_assert_eq!(&folds, &kfold_split(&s, k, seed).unwrap());
        let mut seen = vec![0usize; s.len()];
        for f in &folds {
            let train: BTreeSet<usize> = f.train.iter().copied().collect();
            prop_assert!(f.test.iter().all(|i| !train.contains(i)));
            prop_assert_eq!(f.train.len() + f.test.len(), s.len());
            for &i in &f.test {
                seen[i] += 1;
            }
            for (a, &n) in counts.iter().enumerate() {
                let name = format!("author{a}");
                let held = f.test.iter().filter(|&&i| s[i].author == name).count();
                prop_assert!(held == n / k || held == n / k + 1);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn chunk_count_is_sum_of_floors(lens in prop::collection::vec(0usize..60, 1..6), chunk in 1usize..12) {
        let docs: Vec<Document> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| Document {
                text: (0..n).map(|j| format!("w{j}")).collect::<Vec<_>>().join(" "),
                author: Some(format!("a{}", i % 2)),
                source_id: i.to_string(),
            })
            .collect();
        let out = chunk_documents(&docs, chunk).unwrap();
        prop_assert_eq!(out.len(), lens.iter().map(|n| n / chunk).sum::<usize>());
        prop_assert!(out.iter().all(|s| s.tokens.len() == chunk));
    }

    #[test]
    fn adam_without_gradient_or_decay_is_identity(seed in any::<u64>(), n in 1usize..20, lr in 1e-5f64..1.0) {
        let mut rng = Rng::new(seed);
        let mut p = Tensor::uniform(&[n], 1.0, &mut rng);
        let before = p.clone();
        let mut opt = AdamState::new([("p", n)], AdamConfig::default());
        let zeros = vec![0.0; n];
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Some(&zeros)], &[lr]).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn lm_targets_are_shifted_inputs(len in 20usize..300, b in 1usize..5, bptt in 1usize..10) {
        prop_assume!(len >= b * (bptt + 1));
        let ids: Vec<usize> = (0..len).collect();
        let batches = make_lm_batches(&ids, b, bptt).unwrap();
        prop_assert_eq!(batches.len(), (len / b - 1) / bptt);
        for batch in &batches {
            for i in 0..batch.input.len() {
                prop_assert_eq!(batch.target[i], batch.input[i] + 1);
            }
        }
    }

    #[test]
    fn argmax_ignores_constant_logit_shift(seed in any::<u64>(), classes in 2usize..8, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let logits = Tensor::uniform(&[3, classes], 5.0, &mut rng);
        let shifted = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|x| x + shift).collect()).unwrap();
        let argmax = |t: &Tensor| -> Vec<usize> {
            (0..3)
                .map(|r| {
                    let row = t.row(r);
                    (0..classes).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect()
        };
        prop_assert_eq!(argmax(&softmax_rows(&logits)), argmax(&softmax_rows(&shifted)));
    }

    #[test]
    fn any_text_segments(text in "\\PC{0,40}") {
        let tok = Tokenizer::train(Mode::Char, "abc def").unwrap();
        let ids = tok.encode(&text);
        prop_assert!(ids.iter().all(|&i| i < tok.vocab_size()));
        let model = SubwordModel::new(vec![("▁a".into(), -1.0), ("b".into(), -2.0)]).unwrap();
        for w in text.split_whitespace() {
            prop_assert!(!model.segment_viterbi(w).is_empty());
        }
    }
}

/// Best log-probability over all ways of cutting `word` into model pieces,
/// by enumeration of the `2^(L-1)` cut sets.
fn brute_force(model: &SubwordModel, word: &str) -> Option<f64> {
    let chars: Vec<char> = word.chars().collect();
    let l = chars.len();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << (l - 1)) {
        let mut score = 0.0;
        let mut start = 0;
        let mut ok = true;
        for end in 1..=l {
            if end == l || mask & (1 << (end - 1)) != 0 {
                let piece: String = chars[start..end].iter().collect();
                match model.log_prob(&piece) {
                    Some(lp) => score += lp,
                    None => {
                        ok = false;
                        break;
                    }
                }
                start = end;
            }
        }
        if ok && best.is_none_or(|b| score > b) {
            best = Some(score);
        }
    }
    best
}

fn toy_subword_model(seed: u64) -> SubwordModel {
    let mut rng = Rng::new(seed);
    let alphabet = ['a', 'b', 'c', 'd', 'e'];
    let mut pieces: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    while pieces.len() < 50 {
        let len = 2 + rng.below(3);
        let p: String = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
        if !pieces.contains(&p) {
            pieces.push(p);
        }
    }
    SubwordModel::new(pieces.into_iter().map(|p| (p, -0.1 - 5.0 * rng.next_f64())).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn viterbi_matches_exhaustive_search(seed in 0u64..20, word in "[a-e]{1,8}") {
        let model = toy_subword_model(seed);
        let best = brute_force(&model, &word).expect("single characters are pieces");
        prop_assert!((model.viterbi_score(&word) - best).abs() <= 1e-12);
        let pieces = model.segment_pieces(&word);
        prop_assert_eq!(pieces.concat(), word);
    }
}

#[test]
fn vocabulary_files_are_deterministic() {
    let corpus = "the cat sat on the mat . the cat ran , the dog sat .\n".repeat(20);
    for mode in [Mode::Word, Mode::Char] {
        let a = Tokenizer::train(mode, &corpus).unwrap().to_file_string();
        let b = Tokenizer::train(mode, &corpus).unwrap().to_file_string();
        assert_eq!(a, b);
    }
}

#[test]
fn dropout_masks_preserve_expectation() {
    let n = 100_000;
    for p in [0.05, 0.2, 0.5] {
        let mask = variational_mask(&[n], p, &mut Rng::new(9)).unwrap();
        let mean = mask.data().iter().sum::<f64>() / n as f64;
        // Each entry is 0 or 1/(1-p): variance p/(1-p).
        let sigma = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "p {p}: mean {mean}");
    }
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        embedding_size: 6,
        hidden_size: 8,
        head_hidden: 5,
        ..ModelConfig::new(vocab)
    }
}

fn group_snapshot(model: &Model) -> Vec<(usize, Vec<u64>)> {
    model
        .params()
        .iter()
        .map(|p| (p.group, p.tensor.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn assert_frozen_unchanged(before: &[(usize, Vec<u64>)], after: &[(usize, Vec<u64>)], trainable: &[bool]) {
    let mut moved = vec![false; trainable.len()];
    for ((g, a), (_, b)) in before.iter().zip(after) {
        if !trainable[*g] {
            assert_eq!(a, b, "frozen group {g} changed");
        } else if a != b {
            moved[*g] = true;
        }
    }
    for (g, &t) in trainable.iter().enumerate() {
        if t {
            assert!(moved[g], "trainable group {g} did not move");
        }
    }
}

#[test]
fn frozen_groups_are_bitwise_unchanged_by_a_classifier_step() {
    let mut rng = Rng::new(4);
    let mut model = Model::new_lm(tiny(12), &mut rng).unwrap().into_classifier(3, &mut rng).unwrap();
    let data: Vec<LabeledIds> = (0..6)
        .map(|i| LabeledIds {
            ids: (0..4 + i).map(|j| 4 + (i + j) % 8).collect(),
            label: i % 3,
        })
        .collect();
    let chunk: Vec<&LabeledIds> = data.iter().collect();
    let config = TrainConfig::default();
    let n = model.config.n_groups();
    for step in unfreeze_steps(n) {
        let trainable = unfreeze_plan(n, step);
        let mut opt = new_optimizer(&model, &config);
        let before = group_snapshot(&model);
        classifier_train_step(&mut model, &mut opt, &chunk, &trainable, &vec![1e-2; n], 0.8, &mut rng).unwrap();
        assert_frozen_unchanged(&before, &group_snapshot(&model), &trainable);
    }
}

#[test]
fn frozen_groups_are_bitwise_unchanged_by_an_lm_step() {
    let mut rng = Rng::new(5);
    let mut model = Model::new_lm(tiny(12), &mut rng).unwrap();
    let ids: Vec<usize> = (0..200).map(|i| 4 + (i * 7) % 8).collect();
    let batches = make_lm_batches(&ids, 2, 5).unwrap();
    let config = TrainConfig::default();
    let n = model.config.n_groups();
    for step in unfreeze_steps(n) {
        let trainable = unfreeze_plan(n, step);
        let mut opt = new_optimizer(&model, &config);
        let before = group_snapshot(&model);
        let state = LstmState::zeros(&model.config, 2);
        lm_train_step(&mut model, &mut opt, &batches[0], 2, &state, &trainable, &vec![1e-2; n], 0.8, &mut rng).unwrap();
        assert_frozen_unchanged(&before, &group_snapshot(&model), &trainable);
    }
}

#[test]
fn encoder_shapes_survive_the_head_swap() {
    let mut rng = Rng::new(6);
    let lm = Model::new_lm(tiny(12), &mut rng).unwrap();
    let shapes = |m: &Model| -> Vec<(String, Vec<usize>)> {
        m.params().iter().filter(|p| !p.name.starts_with("head")).map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect()
    };
    let lm_shapes = shapes(&lm);
    let cls = lm.clone().into_classifier(4, &mut rng).unwrap();
    assert_eq!(shapes(&cls), lm_shapes);
    assert_eq!(cls.encoder, lm.encoder);
}
