use approx::assert_relative_eq;
use num_rational::Ratio;
use proptest::prelude::*;

use ssc_core::attention::{scaled_dot_product_attention, AttentionInputs};
use ssc_core::corpus::{compute_stats, parse_pubmed_rct, Abstract, Corpus, Label, LabelSet, Sentence, Split};
use ssc_core::features::{encode_stats, DEFAULT_STAT_CAPS};
use ssc_core::fusion::{decode, fuse, PredictionMatrix};
use ssc_core::losses::kl_loss;
use ssc_core::metrics::evaluate;
use ssc_core::seg_model::{aggregate_to_sentences, segment_soft_label, Aggregation};
use ssc_core::Tensor;

const WORDS: &[&str] = &["aspirin", "reduced", "pain", "in", "adults", "the", "trial", "was", "blinded", "12", "mg"];

fn sentence_text() -> impl Strategy<Value = String> {
    (prop::collection::vec(prop::sample::select(WORDS), 1..10), prop::bool::ANY)
        .prop_map(|(w, comma)| {
            let mut s = w.join(" ");
            if comma {
                s.push_str(", and more");
            }
            s.push('.');
            s
        })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec((sentence_text(), 0..5usize), 1..12), 1..6).prop_map(|docs| {
        let abstracts = docs
            .into_iter()
            .enumerate()
            .map(|(i, sents)| {
                compute_stats(Abstract {
                    id: format!("{}", 1000 + i),
                    sentences: sents
                        .into_iter()
                        .map(|(t, l)| Sentence::new(&t, Label(l)).unwrap())
                        .collect(),
                })
            })
            .collect();
        Corpus {
            split: Split::Train,
            labels: LabelSet::pubmed(),
            abstracts,
        }
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0..4.0f64, cols), rows)
}

fn tensor(rows: Vec<Vec<f64>>) -> Tensor<f64> {
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn corpus_round_trips_and_counts(c in corpus()) {
        let mut text = Vec::new();
        c.write_pubmed(&mut text).unwrap();
        let back = parse_pubmed_rct(text.as_slice(), Split::Train).unwrap();
        prop_assert_eq!(&back, &c);
        let total: usize = back.abstracts.iter().map(|a| a.len()).sum();
        prop_assert_eq!(total, back.num_sentences());
        for a in &back.abstracts {
            for s in &a.sentences {
                prop_assert!(s.stats.t2 < s.stats.t1);
                prop_assert_eq!(s.stats.t1, a.len());
                prop_assert!(s.stats.t3 >= 1);
            }
        }
    }

    #[test]
    fn stat_encoding_is_one_hot(t1 in 1..200usize, t2 in 0..200usize, t3 in 1..400usize) {
        let s = ssc_core::corpus::SentenceStats { t1, t2, t3 };
        let e = encode_stats(s, DEFAULT_STAT_CAPS);
        for (v, cap) in [(&e.t1, 35), (&e.t2, 35), (&e.t3, 100)] {
            prop_assert_eq!(v.len(), cap);
            prop_assert_eq!(v.iter().map(|&x| x as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn attention_rows_are_distributions((nq, nk, d, dv) in (1..8usize, 1..8usize, 1..8usize, 1..8usize),
                                        seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
        };
        let (q, k, v) = (m(nq, d), m(nk, d), m(nk, dv));
        let a = scaled_dot_product_attention(
            &AttentionInputs::new(tensor(q), tensor(k), tensor(v.clone())).unwrap()).unwrap();
        for row in a.weights.rows() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
        for i in 0..nq {
            for c in 0..dv {
                let col = v.iter().map(|r| r[c]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                let o = a.output.at2(i, c);
                prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn fusion_is_linear_in_weights(
        a in prop::collection::vec(prop::collection::vec(0..50i64, 4), 1..6),
        s in prop::collection::vec(prop::collection::vec(0..50i64, 4), 1..6),
        (la, ls, c) in (1..20i64, 0..20i64, 1..9i64),
    ) {
        let n = a.len().min(s.len());
        let r = |m: &[Vec<i64>]| PredictionMatrix::new("x", m[..n].iter()
            .map(|row| row.iter().map(|&v| Ratio::new(v, 50)).collect()).collect());
        let (ma, ms) = (r(&a), r(&s));
        let one = fuse(&ma, &ms, Ratio::from_integer(la), Ratio::from_integer(ls)).unwrap();
        let scaled = fuse(&ma, &ms, Ratio::from_integer(la * c), Ratio::from_integer(ls * c)).unwrap();
        for (x, y) in one.rows.iter().zip(&scaled.rows) {
            for (&u, &v) in x.iter().zip(y) {
                prop_assert_eq!(u * Ratio::from_integer(c), v);
            }
        }
        prop_assert_eq!(decode(&one), decode(&scaled));
    }

    #[test]
    fn evaluation_matches_counting_oracle(
        pairs in prop::collection::vec((0..4usize, 0..4usize), 1..80),
    ) {
        let names: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let pred: Vec<Label> = pairs.iter().map(|p| Label(p.0)).collect();
        let gold: Vec<Label> = pairs.iter().map(|p| Label(p.1)).collect();
        let r = evaluate(&pred, &gold, &names).unwrap();
        let mut weighted = 0.0;
        for l in 0..4 {
            let tp = pairs.iter().filter(|p| p.0 == l && p.1 == l).count() as f64;
            let predicted = pairs.iter().filter(|p| p.0 == l).count() as f64;
            let support = pairs.iter().filter(|p| p.1 == l).count() as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let rc = if support > 0.0 { tp / support } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            assert_relative_eq!(r.per_label[l].precision, p, epsilon = 1e-12);
            assert_relative_eq!(r.per_label[l].recall, rc, epsilon = 1e-12);
            assert_relative_eq!(r.per_label[l].f1, f, epsilon = 1e-12);
            weighted += f * support;
        }
        assert_relative_eq!(r.all.weighted.f1, weighted / pairs.len() as f64, epsilon = 1e-12);
        let correct = pairs.iter().filter(|p| p.0 == p.1).count() as f64;
        assert_relative_eq!(r.all.micro.f1, correct / pairs.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn kl_of_target_with_itself_is_the_penalty(
        logits in matrix(3, 5),
        w in prop::collection::vec(-2.0..2.0f64, 6),
        lambda in 0.0..1.0f64,
    ) {
        let y = tensor(logits).softmax_rows();
        let wt = Tensor::from_vec(&[2, 3], w.clone()).unwrap();
        let loss = kl_loss(&y, &y, &[&wt], lambda).unwrap();
        let penalty = lambda / 2.0 * w.iter().map(|x| x * x).sum::<f64>();
        assert_relative_eq!(loss, penalty, epsilon = 1e-10);
        prop_assert!(kl_loss(&y, &y, &[], 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn soft_labels_are_exact_distributions(labels in prop::collection::vec(prop::option::of(0..6usize), 1..6)) {
        prop_assume!(labels.iter().any(Option::is_some));
        let rows: Vec<Vec<Ratio<i64>>> = labels.iter().map(|l| (0..6)
            .map(|j| Ratio::from_integer((*l == Some(j)) as i64)).collect()).collect();
        let y = segment_soft_label(&rows).unwrap();
        prop_assert_eq!(y.iter().sum::<Ratio<i64>>(), Ratio::from_integer(1));
        let real = labels.iter().filter(|l| l.is_some()).count() as i64;
        for (j, v) in y.iter().enumerate() {
            let n = labels.iter().filter(|l| **l == Some(j)).count() as i64;
            prop_assert_eq!(*v, Ratio::new(n, real));
        }
    }

    #[test]
    fn aggregation_ignores_prediction_order(
        n in 3..12usize,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = 3;
        let preds: Vec<(usize, Vec<f64>)> = (0..=n - q)
            .map(|s| (s, (0..5).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        for agg in [Aggregation::Mean, Aggregation::Max] {
            let a = aggregate_to_sentences("x", n, q, &preds, agg).unwrap();
            let b = aggregate_to_sentences("x", n, q, &shuffled, agg).unwrap();
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_relative_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }
}
