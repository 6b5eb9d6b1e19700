use insertion_core::canvas::Canvas;
use insertion_core::objective::{
    continuation_prob, estimate_elbo, estimate_elbo_samples, estimator_expectation_terms, exact_elbo, exact_elbo_terms,
    exact_log_likelihood, generation_log_prob,
};
use insertion_core::oracle::{ConstantScorer, RandomScorer};
use insertion_core::order::OrderPrior;
use insertion_core::rng;
use insertion_core::scorer::Scorer;
use insertion_core::vocab::TokenId;

const PRIORS: [OrderPrior; 2] = [OrderPrior::Uniform, OrderPrior::BinaryTree { tau: 1.0 }];

fn t(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().map(|&i| TokenId(i)).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - z).collect()
}

/// log p((c, l) | canvas) straight from the scorer outputs.
fn log_op(scorer: &impl Scorer, kept: &[TokenId], c: TokenId, l: usize) -> f64 {
    let out = scorer.score(&Canvas::new(kept.to_vec())).unwrap();
    let row: Vec<f64> = out.content.row(l).to_vec();
    let loc: Vec<f64> = out.location.to_vec();
    log_softmax(&row)[c.index()] + log_softmax(&loc)[l]
}

fn scorer(seed: u64) -> RandomScorer {
    RandomScorer {
        seed,
        vocab_size: 11,
        scale: 1.5,
    }
}

#[test]
fn single_token_bound_is_one_log_prob() {
    let s = scorer(3);
    let x = t(&[8]);
    let direct = log_op(&s, &[], x[0], 0);
    for prior in PRIORS {
        assert!((exact_elbo(&x, &s, prior).unwrap() - direct).abs() < 1e-12);
        assert!((exact_log_likelihood(&x, &s, prior).unwrap() - direct).abs() < 1e-12);
        let mut r = rng::seeded(1);
        for v in estimate_elbo_samples(&x, &s, prior, 20, &mut r).unwrap() {
            assert!((v - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn two_token_bound_by_hand() {
    let s = scorer(5);
    let x = t(&[7, 9]);
    // first A then B at slot 1, or first B then A at slot 0
    let a_first = log_op(&s, &[], x[0], 0) + log_op(&s, &x[..1], x[1], 1);
    let b_first = log_op(&s, &[], x[1], 0) + log_op(&s, &x[1..], x[0], 0);
    let elbo = 0.5 * (a_first + b_first);
    assert!((exact_elbo(&x, &s, OrderPrior::Uniform).unwrap() - elbo).abs() < 1e-12);
    let ll = (0.5 * a_first.exp() + 0.5 * b_first.exp()).ln();
    assert!((exact_log_likelihood(&x, &s, OrderPrior::Uniform).unwrap() - ll).abs() < 1e-12);
    // with two tokens both spans of length 2 weigh their centers equally
    assert!((exact_elbo(&x, &s, OrderPrior::BinaryTree { tau: 1.0 }).unwrap() - elbo).abs() < 1e-12);
}

#[test]
fn canvas_independent_scorer_has_closed_form() {
    let content = vec![0.3, -1.0, 0.0, 0.5, 0.1, 0.0, 1.2, -0.4, 0.7, 0.2];
    let s = ConstantScorer { content: content.clone() };
    let lp = log_softmax(&content);
    for x in [t(&[6, 7, 8]), t(&[6, 6, 9, 8]), t(&[9, 7, 7, 6, 8])] {
        let n = x.len();
        // every order has prob prod p(c) * prod_k 1/(k+1) = prod p(c) / n!
        let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
        let closed: f64 = x.iter().map(|c| lp[c.index()]).sum::<f64>() - log_fact;
        let ll = exact_log_likelihood(&x, &s, OrderPrior::Uniform).unwrap();
        assert!((ll - closed).abs() < 1e-10, "{ll} vs {closed}");
        assert!((exact_elbo(&x, &s, OrderPrior::Uniform).unwrap() - closed).abs() < 1e-10);
    }
}

#[test]
fn bound_never_exceeds_likelihood() {
    let mut r = rng::seeded(77);
    for case in 0..200u64 {
        use rand::Rng as _;
        let n = r.random_range(1..=5);
        let x: Vec<TokenId> = (0..n).map(|_| TokenId(r.random_range(6..11))).collect();
        let s = scorer(1000 + case);
        for prior in PRIORS {
            let elbo = exact_elbo(&x, &s, prior).unwrap();
            let ll = exact_log_likelihood(&x, &s, prior).unwrap();
            assert!(ll - elbo >= -1e-12, "case {case}: {elbo} > {ll}");
        }
    }
}

#[test]
fn grouped_estimator_expectation_matches_bound_terms() {
    for case in 0..20u64 {
        let x = t(&[6, 9, 7, 9, 10][..1 + case as usize % 5]);
        let s = scorer(case);
        for prior in PRIORS {
            let exact = exact_elbo_terms(&x, &s, prior).unwrap();
            let est = estimator_expectation_terms(&x, &s, prior).unwrap();
            for (a, b) in exact.iter().zip(&est) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn sampled_estimate_is_unbiased() {
    let s = scorer(11);
    let x = t(&[6, 8, 7, 8]);
    let n = 100_000;
    for prior in PRIORS {
        let exact = exact_elbo(&x, &s, prior).unwrap();
        let samples = estimate_elbo_samples(&x, &s, prior, n, &mut rng::seeded(4)).unwrap();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{prior}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn estimates_are_seeded() {
    let s = scorer(2);
    let x = t(&[6, 7, 8]);
    let a = estimate_elbo(&x, &s, OrderPrior::Uniform, 1, &mut rng::seeded(9)).unwrap();
    let b = estimate_elbo(&x, &s, OrderPrior::Uniform, 1, &mut rng::seeded(9)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(estimate_elbo_samples(&x, &s, OrderPrior::Uniform, 1, &mut rng::seeded(9)).unwrap().len(), 1);
    assert!(estimate_elbo(&x, &s, OrderPrior::Uniform, 0, &mut rng::seeded(9)).is_err());
}

#[test]
fn generation_mass_sums_to_one_with_continuation() {
    // two content tokens (ids 6 and 7) so the support up to length 4 is small
    let s = RandomScorer {
        seed: 21,
        vocab_size: 8,
        scale: 1.0,
    };
    let max_len = 4;
    let mut total = 0.0;
    let mut seqs: Vec<Vec<TokenId>> = vec![Vec::new()];
    for len in 0..=max_len {
        for x in &seqs {
            total += generation_log_prob(x, &s).unwrap().exp();
            if len == max_len {
                total += continuation_prob(x, &s).unwrap();
            }
        }
        seqs = seqs
            .iter()
            .flat_map(|x| [6u32, 7].map(|c| x.iter().copied().chain([TokenId(c)]).collect::<Vec<_>>()))
            .collect();
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    assert!(generation_log_prob(&t(&[6, 3]), &s).is_err());
}

#[test]
fn enumeration_refuses_long_sequences() {
    let x = vec![TokenId(6); 9];
    assert!(exact_elbo(&x, &scorer(0), OrderPrior::Uniform).is_err());
}
