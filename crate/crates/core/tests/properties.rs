use proptest::prelude::*;

use insertion_core::canvas::{apply_insertion, concat_pair, ops_from_order, slot_spans, split_pair, Canvas, InsertionOp, PairedExample};
use insertion_core::order::{binary_tree_span_weights, next_step_weights, OrderPrior};
use insertion_core::scorer::checkpoint::{from_bytes, to_bytes};
use insertion_core::scorer::{Parameters, ScorerConfig};
use insertion_core::vocab::{TokenId, Vocab};

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec((6u32..12).prop_map(TokenId), 0..=max_len)
}

fn seq_and_order(max_len: usize) -> impl Strategy<Value = (Vec<TokenId>, Vec<usize>)> {
    tokens(max_len).prop_flat_map(|x| {
        let n = x.len();
        (Just(x), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    })
}

fn seq_and_subset(max_len: usize) -> impl Strategy<Value = (Vec<TokenId>, Vec<usize>)> {
    tokens(max_len).prop_flat_map(|x| {
        let n = x.len();
        (Just(x), prop::collection::vec(any::<bool>(), n))
            .prop_map(|(x, mask)| (x, mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()))
    })
}

fn build(x: &[TokenId], order: &[usize], steps: usize) -> Canvas {
    let ops = ops_from_order(x, order).unwrap();
    ops[..steps].iter().fold(Canvas::empty(), |c, &op| apply_insertion(&c, op).unwrap())
}

proptest! {
    #[test]
    fn insertion_round_trip((x, order) in seq_and_order(8)) {
        prop_assert_eq!(build(&x, &order, x.len()).kept().to_vec(), x);
    }

    #[test]
    fn canvases_depend_only_on_the_inserted_set((x, order) in seq_and_order(8), i in 0usize..=8, seed in any::<u64>()) {
        let i = i.min(x.len());
        // another order with the same first-i set: shuffle within both halves
        let mut other = order.clone();
        let mut r = seed;
        let mut shuffle = |v: &mut [usize]| {
            for k in (1..v.len()).rev() {
                r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(k, (r >> 33) as usize % (k + 1));
            }
        };
        shuffle(&mut other[..i]);
        shuffle(&mut other[i..]);
        prop_assert_eq!(build(&x, &order, i), build(&x, &other, i));
        let mut kept: Vec<usize> = order[..i].to_vec();
        kept.sort();
        let expect: Vec<TokenId> = kept.iter().map(|&k| x[k]).collect();
        prop_assert_eq!(build(&x, &order, i).kept().to_vec(), expect);
    }

    #[test]
    fn spans_interleave_back_to_the_sequence((x, kept) in seq_and_subset(12)) {
        let (canvas, spans) = slot_spans(&x, &kept).unwrap();
        prop_assert_eq!(spans.len(), canvas.num_slots());
        let mut rebuilt = Vec::new();
        for (s, span) in spans.iter().enumerate() {
            rebuilt.extend_from_slice(span);
            if let Some(&t) = canvas.kept().get(s) {
                rebuilt.push(t);
            }
        }
        prop_assert_eq!(rebuilt, x);
    }

    #[test]
    fn split_inverts_concat(x in tokens(6), y in tokens(6), has_x in any::<bool>(), has_y in any::<bool>()) {
        prop_assume!(has_x || has_y);
        let vocab = Vocab::synthetic(6);
        let ex = PairedExample::build(has_x.then_some(x), has_y.then_some(y)).unwrap();
        let seq = concat_pair(&ex, &vocab).unwrap();
        prop_assert_eq!(split_pair(seq.ids(), &vocab).unwrap(), ex);
    }

    #[test]
    fn simultaneous_insertions_match_sequential_ones(x in tokens(6), picks in prop::collection::vec((any::<prop::sample::Index>(), 6u32..12), 0..6)) {
        let canvas = Canvas::new(x.clone());
        let mut ops: Vec<InsertionOp> = Vec::new();
        for (idx, tok) in picks {
            let slot = idx.index(canvas.num_slots());
            if ops.iter().all(|o| o.slot != slot) {
                ops.push(InsertionOp::new(TokenId(tok), slot));
            }
        }
        let mut together = canvas.clone();
        together.apply_simultaneous(&ops).unwrap();
        // oracle: insert right to left, so earlier snapshot indices stay valid
        let mut sorted = ops.clone();
        sorted.sort_by_key(|o| std::cmp::Reverse(o.slot));
        let one_by_one = sorted.iter().fold(canvas, |c, &op| apply_insertion(&c, op).unwrap());
        prop_assert_eq!(together.kept(), one_by_one.kept());
    }

    #[test]
    fn targets_are_normalized((x, kept) in seq_and_subset(14), tau in 0.05f64..4.0) {
        let (_, spans) = slot_spans(&x, &kept).unwrap();
        let missing = x.len() - kept.len();
        for prior in [OrderPrior::Uniform, OrderPrior::BinaryTree { tau }] {
            let t = next_step_weights(&spans, prior);
            if missing == 0 {
                prop_assert_eq!(t.num_targets(), 0);
                prop_assert_eq!(t.finish_slots.len(), spans.len());
            } else {
                prop_assert!((t.total_mass() - 1.0).abs() < 1e-12);
                prop_assert!((t.location_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(t.tokens.iter().flatten().all(|&(_, w)| w >= 0.0));
            }
            for (s, span) in spans.iter().enumerate() {
                let listed: Vec<TokenId> = t.tokens[s].iter().map(|&(tok, _)| tok).collect();
                prop_assert_eq!(&listed, span);
            }
            if prior == OrderPrior::Uniform && missing > 0 {
                for &(_, w) in t.tokens.iter().flatten() {
                    prop_assert!((w - 1.0 / missing as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn span_weights_are_palindromic(m in 1usize..40, tau in 0.01f64..10.0) {
        let w = binary_tree_span_weights(m, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..m {
            prop_assert!((w[k] - w[m - 1 - k]).abs() < 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), d in 1usize..4, layers in 1usize..3, vocab in 7usize..12) {
        let cfg = ScorerConfig {
            vocab_size: vocab,
            d_model: 4 * d,
            n_layers: layers,
            n_heads: 2,
            d_ff: 8,
            max_len: 16,
            dropout: 0.0,
        };
        let p = Parameters::init(&cfg, seed).unwrap();
        let back = from_bytes(&to_bytes(&p)).unwrap();
        prop_assert_eq!(back.config(), p.config());
        prop_assert!(back.as_slice().iter().zip(p.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
