//! Randomized invariants over the public API.

use proptest::prelude::*;

use divatt::autodiff::{Tape, Tensor, ValueId};
use divatt::corpus::{self, EncodedCorpus, Origin, RawExample};
use divatt::{losses, tritrain};

fn tensor() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..7).prop_flat_map(|(rows, cols)| {
        proptest::collection::vec(-8.0f64..8.0, rows * cols)
            .prop_map(move |data| Tensor::new(rows, cols, data).unwrap())
    })
}

fn stack(t_y: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Tensor>> {
    (t_y, 1usize..4, 2usize..7).prop_flat_map(|(heads, b, t)| {
        proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, b * t)
                .prop_map(move |data| Tensor::new(b, t, data).unwrap()),
            heads,
        )
    })
}

fn put(tape: &mut Tape, stack: &[Tensor]) -> Vec<ValueId> {
    stack.iter().map(|h| tape.constant(h.clone())).collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor()) {
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let sm = tape.softmax_rows(id).unwrap();
        let out = tape.value(sm);
        for r in 0..x.rows() {
            let row = out.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn masked_softmax_respects_the_mask(
        x in tensor(),
        mask_seed in proptest::collection::vec(any::<bool>(), 4 * 6),
    ) {
        let mask: Vec<bool> = mask_seed.iter().copied().take(x.len()).collect();
        prop_assume!(mask.len() == x.len());
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let sm = tape.masked_softmax_rows(id, &mask).unwrap();
        let out = tape.value(sm);
        for r in 0..x.rows() {
            let row = out.row(r);
            let row_mask = &mask[r * x.cols()..(r + 1) * x.cols()];
            if row_mask.iter().any(|&m| m) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (p, &m) in row.iter().zip(row_mask) {
                    prop_assert!(m || *p == 0.0, "masked position got mass {p}");
                }
            } else {
                // a fully masked row degrades to attending position zero
                prop_assert_eq!(row[0], 1.0);
                prop_assert!(row[1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn bce_matches_the_formula(
        probs in proptest::collection::vec(0.01f64..0.99, 1..12),
        target_bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let targets: Vec<f64> = target_bits.iter().take(probs.len()).map(|&b| f64::from(b)).collect();
        let expected = -probs
            .iter()
            .zip(&targets)
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / probs.len() as f64;
        let mut tape = Tape::new();
        let yhat = tape.constant(Tensor::new(probs.len(), 1, probs.clone()).unwrap());
        let loss = tape.bce(yhat, &targets).unwrap();
        let got = tape.value(loss).item();
        prop_assert!(got >= 0.0);
        prop_assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn diversity_loss_ignores_the_free_head(heads in stack(3usize..6), swap in 0.0f64..1.0) {
        let mut tape = Tape::new();
        let ids = put(&mut tape, &heads);
        let ld = losses::diversity_loss(&mut tape, &ids).unwrap();
        let base = tape.value(ld).item();
        prop_assert!(base >= 0.0);

        let mut other = heads.clone();
        let last = other.last_mut().unwrap();
        *last = Tensor::full(last.rows(), last.cols(), swap);
        let mut tape = Tape::new();
        let ids = put(&mut tape, &other);
        let ld = losses::diversity_loss(&mut tape, &ids).unwrap();
        prop_assert_eq!(tape.value(ld).item(), base, "free head changed the loss");
    }

    #[test]
    fn cross_orthogonality_is_nonnegative_and_symmetric(pair in stack(1usize..5).prop_flat_map(|s1| {
        let (heads, b, t) = (s1.len(), s1[0].rows(), s1[0].cols());
        (Just(s1), proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, b * t)
                .prop_map(move |data| Tensor::new(b, t, data).unwrap()),
            heads,
        ))
    })) {
        let (s1, s2) = pair;
        let mut tape = Tape::new();
        let ids1 = put(&mut tape, &s1);
        let ids2 = put(&mut tape, &s2);
        let ab = losses::cross_orthogonality_loss(&mut tape, &ids1, &ids2).unwrap();
        let ba = losses::cross_orthogonality_loss(&mut tape, &ids2, &ids1).unwrap();
        let ab = tape.value(ab).item();
        let ba = tape.value(ba).item();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12, "{ab} vs {ba}");
    }

    #[test]
    fn accept_is_label_consistent_and_monotone_in_tau(
        p in 0.0f64..1.0,
        q in 0.0f64..1.0,
        lo in 0.5f64..1.0,
        hi in 0.5f64..1.0,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        match tritrain::accept(p, q, hi) {
            Some(label) => {
                prop_assert_eq!(label, u8::from(p > 0.5));
                prop_assert_eq!(label, u8::from(q > 0.5));
                // anything accepted at a strict threshold passes a looser one
                prop_assert_eq!(tritrain::accept(p, q, lo), Some(label));
            }
            None => prop_assert!(
                u8::from(p > 0.5) != u8::from(q > 0.5) || p.max(1.0 - p).max(q.max(1.0 - q)) <= hi
            ),
        }
    }

    #[test]
    fn encode_pads_truncates_and_stays_in_vocabulary(
        vocab_tokens in proptest::collection::hash_set("[a-z]{2,6}", 2..20),
        texts in proptest::collection::vec(proptest::collection::vec("[a-z]{1,8}", 1..20), 1..8),
        max_len in 1usize..12,
        seed in any::<u64>(),
    ) {
        let dim = 3;
        let rows: Vec<(String, Vec<f64>)> =
            vocab_tokens.iter().map(|t| (t.clone(), vec![0.1; dim])).collect();
        let vocab = corpus::Vocabulary::from_rows(rows, dim, seed).unwrap();
        let examples: Vec<RawExample> = texts
            .iter()
            .map(|words| RawExample { text: words.join(" "), label: Some(0) })
            .collect();
        let encoded = corpus::encode(&examples, &vocab, max_len, Origin::SourceLabeled).unwrap();
        let again = corpus::encode(&examples, &vocab, max_len, Origin::SourceLabeled).unwrap();
        prop_assert_eq!(&encoded, &again, "encoding is not deterministic");
        prop_assert_eq!(encoded.len(), texts.len());
        prop_assert_eq!(encoded.max_len(), max_len);
        for (i, words) in texts.iter().enumerate() {
            let row = encoded.id_rows(i, 1);
            let real = words.len().min(max_len);
            // tokens (known or UNK) first, PAD fill after
            prop_assert!(row[..real].iter().all(|&id| id >= 1 && id < vocab.size()));
            prop_assert!(row[real..].iter().all(|&id| id == 0));
        }
    }

    #[test]
    fn split_partitions_the_corpus(
        n in 4usize..40,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        // row i holds the single id i+2 so rows stay identifiable
        let ids: Vec<usize> = (0..n).map(|i| i + 2).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let corpus = EncodedCorpus::from_rows(ids, 1, Some(labels), Origin::SourceLabeled).unwrap();
        let (train, val) = corpus::train_val_split(&corpus, fraction, seed).unwrap();
        prop_assert!(!train.is_empty() && !val.is_empty());
        prop_assert_eq!(train.len() + val.len(), n);
        let mut seen: Vec<usize> = train
            .id_rows(0, train.len())
            .iter()
            .chain(val.id_rows(0, val.len()))
            .copied()
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (2..n + 2).collect::<Vec<_>>());
        let (train2, val2) = corpus::train_val_split(&corpus, fraction, seed).unwrap();
        prop_assert!(train == train2 && val == val2, "split is not seed-deterministic");
    }

    #[test]
    fn balance_equalizes_class_counts(
        labels in proptest::collection::vec(any::<bool>(), 2..40),
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let n = labels.len();
        let ids: Vec<usize> = (0..n).map(|i| i + 2).collect();
        let labels: Vec<u8> = labels.iter().map(|&l| u8::from(l)).collect();
        let minority = labels.iter().filter(|&&l| l == 1).count().min(labels.iter().filter(|&&l| l == 0).count());
        let corpus = EncodedCorpus::from_rows(ids, 1, Some(labels), Origin::SourceLabeled).unwrap();
        let balanced = corpus::balance(&corpus, seed).unwrap();
        let kept = balanced.labels().unwrap();
        let pos = kept.iter().filter(|&&l| l == 1).count();
        let neg = kept.len() - pos;
        prop_assert_eq!((pos, neg), (minority, minority));
        // every balanced row is one of the original rows
        prop_assert!(balanced.id_rows(0, balanced.len()).iter().all(|&id| (2..n + 2).contains(&id)));
    }

    #[test]
    fn tokenize_yields_words_or_single_punctuation_marks(text in ".{0,60}") {
        for token in corpus::tokenize(&text) {
            prop_assert!(!token.is_empty());
            prop_assert!(token.chars().all(|c| !c.is_whitespace()));
            let is_word = token.chars().all(char::is_alphanumeric);
            let is_mark = token.chars().count() == 1 && !token.chars().next().unwrap().is_alphanumeric();
            prop_assert!(is_word || is_mark, "mixed token {token:?}");
        }
    }
}
