//! Generation-order priors.
//!
//! A prior is only ever used through its next-insertion conditionals: given
//! which positions are already on the canvas, how much weight each missing
//! position gets as the next insertion. Partial orders are sampled by chaining
//! those conditionals; the uniform prior also has a closed form.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::TokenId;

/// Largest sequence length accepted by the enumeration oracles.
pub const MAX_ENUMERATION_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderPrior {
    Uniform,
    /// Uniform over non-empty slots, then `softmax(-|k - center| / tau)`
    /// within the chosen slot's span.
    BinaryTree { tau: f64 },
}

impl Default for OrderPrior {
    fn default() -> Self {
        OrderPrior::BinaryTree { tau: 1.0 }
    }
}

impl OrderPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OrderPrior::Uniform => Ok(()),
            OrderPrior::BinaryTree { tau } if tau > 0.0 && tau.is_finite() => Ok(()),
            OrderPrior::BinaryTree { tau } => {
                Err(Error::Config(format!("binary-tree tau must be positive, got {tau}")))
            }
        }
    }

    /// Parses `uniform`, `binary_tree` or `binary_tree:<tau>`.
    pub fn parse(s: &str) -> Result<Self> {
        let prior = match s {
            "uniform" => OrderPrior::Uniform,
            "binary_tree" => OrderPrior::BinaryTree { tau: 1.0 },
            other => match other.strip_prefix("binary_tree:") {
                Some(t) => OrderPrior::BinaryTree {
                    tau: t
                        .parse()
                        .map_err(|_| Error::Config(format!("bad tau in prior {other:?}")))?,
                },
                None => return Err(Error::Config(format!("unknown order prior {other:?}"))),
            },
        };
        prior.validate()?;
        Ok(prior)
    }
}

impl std::fmt::Display for OrderPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderPrior::Uniform => write!(f, "uniform"),
            OrderPrior::BinaryTree { tau } => write!(f, "binary_tree:{tau}"),
        }
    }
}

/// Weighted next-insertion targets for every slot of a canvas.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotTargets {
    /// Per slot, the missing span's tokens in span order with their weights.
    pub tokens: Vec<Vec<(TokenId, f64)>>,
    /// Per slot, the total token weight in that slot.
    pub location_weights: Vec<f64>,
    /// Slots whose span is empty.
    pub finish_slots: Vec<usize>,
}

impl SlotTargets {
    pub fn num_slots(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.tokens.iter().flatten().map(|&(_, w)| w).sum()
    }

    pub fn num_targets(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    pub fn scale(&mut self, alpha: f64) {
        for slot in &mut self.tokens {
            for entry in slot.iter_mut() {
                entry.1 *= alpha;
            }
        }
        for w in &mut self.location_weights {
            *w *= alpha;
        }
    }
}

/// Draws a generation step uniformly from `1..=n`.
pub fn sample_step(n: usize, rng: &mut Rng) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot sample a step for an empty sequence".into()));
    }
    Ok(rng.random_range(1..=n))
}

/// Weights `softmax(-|k - (m-1)/2| / tau)` for `k = 0..m`.
pub fn binary_tree_span_weights(m: usize, tau: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("span length must be positive".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    let center = (m as f64 - 1.0) / 2.0;
    let scores: Vec<f64> = (0..m).map(|k| -(k as f64 - center).abs() / tau).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Within-span weights for a span of length `m` under `prior`, before the
/// slot-level factor is applied.
fn within_span(prior: OrderPrior, m: usize) -> Vec<f64> {
    match prior {
        OrderPrior::Uniform => vec![1.0; m],
        OrderPrior::BinaryTree { tau } => {
            binary_tree_span_weights(m, tau).expect("m > 0 and tau validated")
        }
    }
}

/// Next-insertion weighting distribution over the missing tokens of each slot.
pub fn next_step_weights(spans: &[Vec<TokenId>], prior: OrderPrior) -> SlotTargets {
    let total: usize = spans.iter().map(Vec::len).sum();
    let nonempty = spans.iter().filter(|s| !s.is_empty()).count();
    let mut targets = SlotTargets {
        tokens: Vec::with_capacity(spans.len()),
        location_weights: vec![0.0; spans.len()],
        finish_slots: Vec::new(),
    };
    for (s, span) in spans.iter().enumerate() {
        if span.is_empty() {
            targets.finish_slots.push(s);
            targets.tokens.push(Vec::new());
            continue;
        }
        let weights: Vec<f64> = match prior {
            OrderPrior::Uniform => vec![1.0 / total as f64; span.len()],
            OrderPrior::BinaryTree { .. } => within_span(prior, span.len())
                .into_iter()
                .map(|w| w / nonempty as f64)
                .collect(),
        };
        targets.location_weights[s] = weights.iter().sum();
        targets.tokens.push(span.iter().copied().zip(weights).collect());
    }
    targets
}

/// Next-insertion distribution over missing positions of a length-`n`
/// sequence given the sorted `kept` positions. Entries are `(position, weight)`
/// in increasing position order.
pub fn next_index_weights(n: usize, kept: &[usize], prior: OrderPrior) -> Vec<(usize, f64)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for &k in kept.iter().chain(std::iter::once(&n)) {
        if k > start {
            runs.push((start, k));
        }
        start = k + 1;
    }
    let total: usize = runs.iter().map(|(a, b)| b - a).sum();
    let mut out = Vec::with_capacity(total);
    for &(a, b) in &runs {
        match prior {
            OrderPrior::Uniform => out.extend((a..b).map(|p| (p, 1.0 / total as f64))),
            OrderPrior::BinaryTree { .. } => {
                let w = within_span(prior, b - a);
                out.extend((a..b).zip(w).map(|(p, w)| (p, w / runs.len() as f64)));
            }
        }
    }
    out
}

/// Draws the positions already on the canvas at generation step `i`
/// (a set of size `i - 1`), returned sorted.
pub fn sample_partial_order(n: usize, i: usize, prior: OrderPrior, rng: &mut Rng) -> Result<Vec<usize>> {
    if i == 0 || i > n {
        return Err(Error::InvalidInput(format!("step {i} outside 1..={n}")));
    }
    sample_kept_set(n, i - 1, prior, rng)
}

/// Draws a kept set of exactly `count` positions out of `n`.
pub fn sample_kept_set(n: usize, count: usize, prior: OrderPrior, rng: &mut Rng) -> Result<Vec<usize>> {
    extend_kept_set(n, Vec::new(), count, prior, rng)
}

/// Grows the sorted set `kept` by `count` further positions drawn from the
/// prior's conditionals. Positions already kept act as fixed anchors that
/// split the missing runs.
pub fn extend_kept_set(
    n: usize,
    mut kept: Vec<usize>,
    count: usize,
    prior: OrderPrior,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if kept.len() + count > n {
        return Err(Error::InvalidInput(format!(
            "cannot keep {} of {n} positions",
            kept.len() + count
        )));
    }
    match prior {
        OrderPrior::Uniform => {
            let missing: Vec<usize> = (0..n).filter(|p| kept.binary_search(p).is_err()).collect();
            let picks = index::sample(rng, missing.len(), count);
            kept.extend(picks.into_iter().map(|j| missing[j]));
            kept.sort_unstable();
            Ok(kept)
        }
        OrderPrior::BinaryTree { .. } => {
            for _ in 0..count {
                let weights = next_index_weights(n, &kept, prior);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = weights.last().expect("missing positions remain").0;
                for &(p, w) in &weights {
                    acc += w;
                    if u < acc {
                        pick = p;
                        break;
                    }
                }
                let at = kept.partition_point(|&k| k < pick);
                kept.insert(at, pick);
            }
            Ok(kept)
        }
    }
}

/// All kept sets reachable at step `i` with their probabilities, sorted by
/// kept set.
pub fn enumerate_partial_orders(n: usize, i: usize, prior: OrderPrior) -> Result<Vec<(Vec<usize>, f64)>> {
    if n > MAX_ENUMERATION_LEN {
        return Err(Error::SizeLimit {
            what: "sequence length",
            got: n,
            limit: MAX_ENUMERATION_LEN,
        });
    }
    if i == 0 || i > n + 1 {
        return Err(Error::InvalidInput(format!("step {i} outside 1..={}", n + 1)));
    }
    let count = i - 1;
    match prior {
        OrderPrior::Uniform => {
            let sets = subsets_of_size(n, count);
            let p = 1.0 / sets.len() as f64;
            Ok(sets.into_iter().map(|s| (s, p)).collect())
        }
        OrderPrior::BinaryTree { .. } => {
            let mut layer: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            layer.insert(Vec::new(), 1.0);
            for _ in 0..count {
                let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
                for (kept, p) in &layer {
                    for (pos, w) in next_index_weights(n, kept, prior) {
                        let mut grown = kept.clone();
                        let at = grown.partition_point(|&k| k < pos);
                        grown.insert(at, pos);
                        *next.entry(grown).or_insert(0.0) += p * w;
                    }
                }
                layer = next;
            }
            Ok(layer.into_iter().collect())
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            if n - v < k - cur.len() {
                break;
            }
            cur.push(v);
            rec(v + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}
