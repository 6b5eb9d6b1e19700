//! Exact enumeration oracles for short sequences.
//!
//! Every function here treats `x` as a single unpaired sequence built from the
//! empty canvas with all slots insertable; `log p((c, l) | canvas)` is
//! `log softmax(content[l])[c] + log softmax(location)[l]`.

use std::collections::HashMap;

use crate::canvas::{slot_spans, Canvas};
use crate::error::{Error, Result};
use crate::order::{
    binary_tree_span_weights, enumerate_partial_orders, next_step_weights, sample_partial_order,
    sample_step, OrderPrior, MAX_ENUMERATION_LEN,
};
use crate::rng::Rng;
use crate::scorer::{log_softmax, Scorer, SlotLogits};
use crate::vocab::{TokenId, NUM_RESERVED};

use super::loss;

fn guard(n: usize) -> Result<()> {
    if n > MAX_ENUMERATION_LEN {
        return Err(Error::SizeLimit {
            what: "sequence length",
            got: n,
            limit: MAX_ENUMERATION_LEN,
        });
    }
    Ok(())
}

fn kept_of(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|&p| mask & (1 << p) != 0).collect()
}

/// Scorer outputs memoized by kept-position set.
struct CanvasCache<'a, S: Scorer + ?Sized> {
    x: &'a [TokenId],
    scorer: &'a S,
    logits: HashMap<u32, SlotLogits>,
}

impl<'a, S: Scorer + ?Sized> CanvasCache<'a, S> {
    fn new(x: &'a [TokenId], scorer: &'a S) -> Self {
        Self {
            x,
            scorer,
            logits: HashMap::new(),
        }
    }

    fn get(&mut self, mask: u32) -> Result<&SlotLogits> {
        if !self.logits.contains_key(&mask) {
            let kept: Vec<TokenId> = kept_of(mask, self.x.len()).into_iter().map(|p| self.x[p]).collect();
            let l = self.scorer.score(&Canvas::new(kept))?;
            self.logits.insert(mask, l);
        }
        Ok(&self.logits[&mask])
    }

    /// `log p((x[pos], slot) | canvas(mask))`.
    fn log_op(&mut self, mask: u32, pos: usize) -> Result<f64> {
        let slot = (mask & ((1u32 << pos) - 1)).count_ones() as usize;
        let tok = self.x[pos];
        let l = self.get(mask)?;
        let all: Vec<usize> = (0..l.num_slots()).collect();
        Ok(l.content_log_probs(slot)[tok.index()] + l.location_log_probs(&all)[slot])
    }
}

/// Prior weight of inserting `pos` next, computed straight from the
/// definition of each prior.
fn prior_conditional(n: usize, mask: u32, pos: usize, prior: OrderPrior) -> f64 {
    let missing = (0..n).filter(|&p| mask & (1 << p) == 0).count();
    match prior {
        OrderPrior::Uniform => 1.0 / missing as f64,
        OrderPrior::BinaryTree { tau } => {
            let mut start = pos;
            while start > 0 && mask & (1 << (start - 1)) == 0 {
                start -= 1;
            }
            let mut end = pos + 1;
            while end < n && mask & (1 << end) == 0 {
                end += 1;
            }
            let mut runs = 0;
            let mut in_run = false;
            for p in 0..n {
                let gap = mask & (1 << p) == 0;
                if gap && !in_run {
                    runs += 1;
                }
                in_run = gap;
            }
            let w = binary_tree_span_weights(end - start, tau).expect("non-empty run");
            w[pos - start] / runs as f64
        }
    }
}

/// Visits every permutation with its prior log-probability and per-step
/// insertion log-probabilities.
fn for_each_order<S: Scorer + ?Sized>(
    x: &[TokenId],
    scorer: &S,
    prior: OrderPrior,
    mut visit: impl FnMut(f64, &[f64]),
) -> Result<()> {
    let n = x.len();
    let mut cache = CanvasCache::new(x, scorer);
    let mut steps = Vec::with_capacity(n);
    fn rec<S: Scorer + ?Sized>(
        n: usize,
        mask: u32,
        log_prior: f64,
        steps: &mut Vec<f64>,
        cache: &mut CanvasCache<'_, S>,
        prior: OrderPrior,
        visit: &mut dyn FnMut(f64, &[f64]),
    ) -> Result<()> {
        if steps.len() == n {
            visit(log_prior, steps);
            return Ok(());
        }
        for pos in 0..n {
            if mask & (1 << pos) != 0 {
                continue;
            }
            let w = prior_conditional(n, mask, pos, prior);
            let lp = cache.log_op(mask, pos)?;
            steps.push(lp);
            rec(n, mask | (1 << pos), log_prior + w.ln(), steps, cache, prior, visit)?;
            steps.pop();
        }
        Ok(())
    }
    rec(n, 0, 0.0, &mut steps, &mut cache, prior, &mut visit)
}

/// Per-step terms of the lower bound: term `i` is
/// `sum_z p(z) log p((c_i, l_i) | canvas_{i-1})`, summed over all orders.
pub fn exact_elbo_terms<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S, prior: OrderPrior) -> Result<Vec<f64>> {
    guard(x.len())?;
    prior.validate()?;
    let mut terms = vec![0.0; x.len()];
    for_each_order(x, scorer, prior, |log_prior, steps| {
        let p = log_prior.exp();
        for (t, s) in terms.iter_mut().zip(steps) {
            *t += p * s;
        }
    })?;
    Ok(terms)
}

/// `sum_z p(z) log p(x | z)`, the Jensen lower bound on `log p(x)`.
pub fn exact_elbo<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S, prior: OrderPrior) -> Result<f64> {
    Ok(exact_elbo_terms(x, scorer, prior)?.iter().sum())
}

/// `log sum_z p(z) prod_i p((c_i, l_i) | canvas_{i-1})`.
pub fn exact_log_likelihood<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S, prior: OrderPrior) -> Result<f64> {
    guard(x.len())?;
    prior.validate()?;
    let mut logs = Vec::new();
    for_each_order(x, scorer, prior, |log_prior, steps| {
        logs.push(log_prior + steps.iter().sum::<f64>());
    })?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Analytic expectation of the sampled estimator given step `i`, divided by
/// `n`: `sum_{kept sets} p(set) * sum_targets w log p(c, l | canvas)`.
/// Built from the partial-order enumeration and the training targets, so it
/// checks the sampling path against [`exact_elbo_terms`].
pub fn estimator_expectation_terms<S: Scorer + ?Sized>(
    x: &[TokenId],
    scorer: &S,
    prior: OrderPrior,
) -> Result<Vec<f64>> {
    let n = x.len();
    guard(n)?;
    let mut terms = Vec::with_capacity(n);
    for i in 1..=n {
        let mut term = 0.0;
        for (kept, p) in enumerate_partial_orders(n, i, prior)? {
            let (canvas, spans) = slot_spans(x, &kept)?;
            let targets = next_step_weights(&spans, prior);
            let logits = scorer.score(&canvas)?;
            let b = loss(&logits, &targets, &vec![true; canvas.num_slots()], 0.0, 1)?;
            term -= p * (b.content_nll + b.location_nll);
        }
        terms.push(term);
    }
    Ok(terms)
}

/// Independent draws of the single-sample lower-bound estimator:
/// `i ~ U[1, n]`, a partial order from the prior, then
/// `-n * weighted next-step loss`.
pub fn estimate_elbo_samples<S: Scorer + ?Sized>(
    x: &[TokenId],
    scorer: &S,
    prior: OrderPrior,
    num_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if num_samples == 0 {
        return Err(Error::InvalidInput("num_samples must be at least 1".into()));
    }
    let n = x.len();
    (0..num_samples)
        .map(|_| {
            let i = sample_step(n, rng)?;
            let kept = sample_partial_order(n, i, prior, rng)?;
            let (canvas, spans) = slot_spans(x, &kept)?;
            let targets = next_step_weights(&spans, prior);
            let logits = scorer.score(&canvas)?;
            let b = loss(&logits, &targets, &vec![true; canvas.num_slots()], 0.0, n)?;
            Ok(-b.total)
        })
        .collect()
}

pub fn estimate_elbo<S: Scorer + ?Sized>(
    x: &[TokenId],
    scorer: &S,
    prior: OrderPrior,
    num_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let samples = estimate_elbo_samples(x, scorer, prior, num_samples, rng)?;
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Stop probability of a canvas: every slot predicts `NO_INSERT`.
fn stop_prob(l: &SlotLogits) -> f64 {
    (0..l.num_slots())
        .map(|s| l.content_log_probs(s)[TokenId::NO_INSERT.index()].exp())
        .product()
}

/// Log-probability of inserting content token `tok` at `slot` in the
/// terminating generative process: `(1 - p_stop) * p(l) * p(c | l, content)`
/// with the content softmax restricted to non-reserved tokens.
fn log_insert(l: &SlotLogits, slot: usize, tok: TokenId) -> f64 {
    let all: Vec<usize> = (0..l.num_slots()).collect();
    let content = log_softmax(l.content.row(slot).iter().skip(NUM_RESERVED).copied());
    (1.0 - stop_prob(l)).ln() + l.location_log_probs(&all)[slot] + content[tok.index() - NUM_RESERVED]
}

/// Probability mass of all insertion histories that build `x`, without
/// stopping, summed over orders (no prior weighting).
fn history_mass<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S) -> Result<(f64, SlotLogits)> {
    let n = x.len();
    guard(n)?;
    if x.iter().any(|t| t.is_reserved()) {
        return Err(Error::InvalidInput("reserved token in sequence".into()));
    }
    let mut cache = CanvasCache::new(x, scorer);
    let full = (1u32 << n) - 1;
    let mut mass: HashMap<u32, f64> = HashMap::new();
    mass.insert(0, 1.0);
    for size in 0..n {
        let layer: Vec<(u32, f64)> = mass
            .iter()
            .filter(|(m, _)| m.count_ones() as usize == size)
            .map(|(&m, &p)| (m, p))
            .collect();
        for (mask, p) in layer {
            for pos in (0..n).filter(|&q| mask & (1 << q) == 0) {
                let slot = (mask & ((1u32 << pos) - 1)).count_ones() as usize;
                let lp = log_insert(cache.get(mask)?, slot, x[pos]);
                *mass.entry(mask | (1 << pos)).or_insert(0.0) += p * lp.exp();
            }
        }
    }
    let final_logits = cache.get(full)?.clone();
    Ok((mass[&full], final_logits))
}

/// Log-probability that the terminating insertion process (stop when every
/// slot predicts `NO_INSERT`) produces exactly `x`.
pub fn generation_log_prob<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S) -> Result<f64> {
    let (mass, l) = history_mass(x, scorer)?;
    Ok((mass * stop_prob(&l)).ln())
}

/// Probability of reaching `x` and then continuing to insert.
pub fn continuation_prob<S: Scorer + ?Sized>(x: &[TokenId], scorer: &S) -> Result<f64> {
    let (mass, l) = history_mass(x, scorer)?;
    Ok(mass * (1.0 - stop_prob(&l)))
}
