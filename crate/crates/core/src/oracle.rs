//! Reference scorers and the self-check suites built on the exact
//! enumeration and finite-difference oracles.

use std::fmt;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::canvas::{slot_spans, Canvas};
use crate::error::{Error, Result};
use crate::objective::{
    build_training_instance, estimator_expectation_terms, exact_elbo_terms, exact_log_likelihood, TrainingInstance,
    TrainingMode,
};
use crate::order::{binary_tree_span_weights, enumerate_partial_orders, next_step_weights, OrderPrior};
use crate::rng::{self, Rng};
use crate::canvas::PairedExample;
use crate::scorer::{batch_loss, loss_and_gradients, Parameters, Scorer, ScorerConfig, SlotLogits};
use crate::exec::Exec;
use crate::vocab::{TokenId, NUM_RESERVED};

/// A fixed random function of the canvas: logits are standard normal draws
/// (times `scale`) from a stream keyed by the kept tokens.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    pub seed: u64,
    pub vocab_size: usize,
    pub scale: f64,
}

impl Scorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits> {
        let path: Vec<u64> = canvas.kept().iter().map(|t| t.0 as u64).collect();
        let mut r = rng::stream(self.seed, &path);
        let slots = canvas.num_slots();
        let mut draw = || -> f64 { let z: f64 = StandardNormal.sample(&mut r); self.scale * z };
        let content = Array2::from_shape_simple_fn((slots, self.vocab_size), &mut draw);
        let location = Array1::from_shape_simple_fn(slots, &mut draw);
        Ok(SlotLogits { content, location })
    }
}

/// Same content logits in every slot of every canvas, flat location logits.
#[derive(Clone, Debug)]
pub struct ConstantScorer {
    pub content: Vec<f64>,
}

impl Scorer for ConstantScorer {
    fn vocab_size(&self) -> usize {
        self.content.len()
    }

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits> {
        let slots = canvas.num_slots();
        let content = Array2::from_shape_fn((slots, self.content.len()), |(_, v)| self.content[v]);
        Ok(SlotLogits {
            content,
            location: Array1::zeros(slots),
        })
    }
}

/// Ideal center-first scorer for a known target: each slot predicts the
/// middle token of its missing span (the left one for even spans), or
/// `NO_INSERT` when the span is empty. The canvas must be a subsequence of
/// the target; alignment is greedy left to right.
#[derive(Clone, Debug)]
pub struct CenterOracle {
    pub target: Vec<TokenId>,
    pub vocab_size: usize,
}

impl CenterOracle {
    pub fn new(target: Vec<TokenId>) -> Self {
        let vocab_size = target.iter().map(|t| t.index() + 1).max().unwrap_or(0).max(NUM_RESERVED + 1);
        Self { target, vocab_size }
    }
}

impl Scorer for CenterOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits> {
        let mut kept = Vec::with_capacity(canvas.len());
        let mut pos = 0;
        for &t in canvas.kept() {
            while pos < self.target.len() && self.target[pos] != t {
                pos += 1;
            }
            if pos == self.target.len() {
                return Err(Error::InvalidInput("canvas is not a subsequence of the target".into()));
            }
            kept.push(pos);
            pos += 1;
        }
        let (_, spans) = slot_spans(&self.target, &kept)?;
        let slots = canvas.num_slots();
        let mut content = Array2::zeros((slots, self.vocab_size));
        let mut location = Array1::zeros(slots);
        for (s, span) in spans.iter().enumerate() {
            if span.is_empty() {
                content[[s, TokenId::NO_INSERT.index()]] = 10.0;
                location[s] = -10.0;
            } else {
                content[[s, span[(span.len() - 1) / 2].index()]] = 10.0;
            }
        }
        Ok(SlotLogits { content, location })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            rows: Vec::new(),
        }
    }

    /// Records a deviation that must stay at or below `tolerance`.
    fn at_most(&mut self, name: &str, value: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    /// The failing row with the largest value-to-tolerance ratio.
    pub fn worst(&self) -> Option<&CheckRow> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .max_by(|a, b| (a.value / a.tolerance).total_cmp(&(b.value / b.tolerance)))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite)?;
        writeln!(f, "{:<36} {:>14} {:>12}  result", "check", "max deviation", "tolerance")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<36} {:>14.3e} {:>12.1e}  {}",
                r.name,
                r.value,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn random_sequence(rng: &mut Rng, n: usize, content_tokens: usize) -> Vec<TokenId> {
    (0..n)
        .map(|_| TokenId((NUM_RESERVED + rng.random_range(0..content_tokens)) as u32))
        .collect()
}

/// Per-term agreement between the estimator's analytic expectation and the
/// permutation-sum bound, plus the Jensen gap, for random frozen scorers.
pub fn elbo_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("elbo");
    let content_tokens = 5;
    let mut rng = rng::stream(seed, &[0xE1B0]);
    for prior in [OrderPrior::Uniform, OrderPrior::BinaryTree { tau: 1.0 }] {
        let mut max_term = 0.0f64;
        let mut min_gap = f64::INFINITY;
        let mut max_n1_gap = 0.0f64;
        for case in 0..cases {
            let scorer = RandomScorer {
                seed: rng.random(),
                vocab_size: NUM_RESERVED + content_tokens,
                scale: 1.0,
            };
            let n = 1 + case % 5;
            let x = random_sequence(&mut rng, n, content_tokens);
            let est = estimator_expectation_terms(&x, &scorer, prior)?;
            let exact = exact_elbo_terms(&x, &scorer, prior)?;
            for (a, b) in est.iter().zip(&exact) {
                max_term = max_term.max((a - b).abs());
            }
            let elbo: f64 = exact.iter().sum();
            let gap = exact_log_likelihood(&x, &scorer, prior)? - elbo;
            min_gap = min_gap.min(gap);
            if n == 1 {
                max_n1_gap = max_n1_gap.max(gap.abs());
            }
        }
        let tag = match prior {
            OrderPrior::Uniform => "uniform",
            OrderPrior::BinaryTree { .. } => "binary_tree",
        };
        report.at_most(&format!("{tag}: estimator vs exact per step"), max_term, 1e-9);
        report.at_most(&format!("{tag}: negative Jensen gap"), (-min_gap).max(0.0), 1e-12);
        report.at_most(&format!("{tag}: gap at n=1"), max_n1_gap, 1e-12);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic gradients of the summed batch loss with central
/// differences at `coords_per_tensor` random coordinates of every tensor.
/// Coordinates are drawn among those with `|gradient| > 1e-8`; this skips
/// parameters the batch never reaches and the key biases, whose gradient is
/// identically zero because a softmax ignores a per-row shift. `perturb` is
/// added to each analytic value before comparison.
pub fn gradient_check(
    params: &Parameters,
    instances: &[TrainingInstance],
    lambda_finish: f64,
    coords_per_tensor: usize,
    h: f64,
    perturb: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_gradients(params, instances, lambda_finish, Exec::Sequential)?;
    let mut p = params.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for spec in params.layout().tensors().to_vec() {
        let touched: Vec<usize> = spec.range().filter(|&i| grads.data[i].abs() > 1e-8).collect();
        if touched.is_empty() {
            continue;
        }
        for _ in 0..coords_per_tensor {
            let i = touched[rng.random_range(0..touched.len())];
            let orig = p.as_slice()[i];
            p.as_mut_slice()[i] = orig + h;
            let up = batch_loss(&p, instances, lambda_finish)?;
            p.as_mut_slice()[i] = orig - h;
            let down = batch_loss(&p, instances, lambda_finish)?;
            p.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data[i] + perturb;
            let err = relative_error(analytic, numeric);
            out.checked += 1;
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(err);
                out.worst = Some((spec.name.clone(), i - spec.offset, analytic, numeric));
            }
        }
    }
    Ok(out)
}

/// Small random model configurations used by the gradient suite.
pub fn grad_check_configs() -> Vec<ScorerConfig> {
    vec![
        ScorerConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 24,
            ..ScorerConfig::new(NUM_RESERVED + 5)
        },
        ScorerConfig {
            d_model: 12,
            n_layers: 2,
            n_heads: 3,
            d_ff: 8,
            max_len: 24,
            ..ScorerConfig::new(NUM_RESERVED + 4)
        },
        ScorerConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 24,
            max_len: 32,
            ..ScorerConfig::new(NUM_RESERVED + 7)
        },
    ]
}

/// A few training instances over random pairs, one per mode.
pub fn random_instances(cfg: &ScorerConfig, rng: &mut Rng) -> Result<Vec<TrainingInstance>> {
    let content = cfg.vocab_size - NUM_RESERVED;
    let prior = OrderPrior::BinaryTree { tau: 1.0 };
    TrainingMode::ALL
        .iter()
        .map(|&mode| {
            let nx = rng.random_range(1..5);
            let ny = rng.random_range(1..5);
            let ex = PairedExample::paired(random_sequence(rng, nx, content), random_sequence(rng, ny, content))?;
            build_training_instance(&ex, mode, prior, Some(0.0), rng)
        })
        .collect()
}

pub fn grad_suite(seed: u64, perturb: f64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("grad");
    let mut rng = rng::stream(seed, &[0x62AD]);
    for (k, cfg) in grad_check_configs().iter().enumerate() {
        let params = Parameters::init(cfg, rng.random())?;
        let instances = random_instances(cfg, &mut rng)?;
        let check = gradient_check(&params, &instances, 1.0, 4, 1e-5, perturb, &mut rng)?;
        report.at_most(
            &format!("config {k}: max relative error ({} coords)", check.checked),
            check.max_rel_error,
            1e-4,
        );
    }
    Ok(report)
}

pub fn order_suite(seed: u64, canvases: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("order");
    let mut rng = rng::stream(seed, &[0x0DE5]);
    let mut mass_err = 0.0f64;
    let mut loc_err = 0.0f64;
    let mut palindrome = 0.0f64;
    for _ in 0..canvases {
        let n = rng.random_range(1..20);
        let x = random_sequence(&mut rng, n, 8);
        let keep: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
        if keep.len() == n {
            continue;
        }
        let (_, spans) = slot_spans(&x, &keep)?;
        let tau = 0.1 + 3.0 * rng.random::<f64>();
        for prior in [OrderPrior::Uniform, OrderPrior::BinaryTree { tau }] {
            let t = next_step_weights(&spans, prior);
            mass_err = mass_err.max((t.total_mass() - 1.0).abs());
            loc_err = loc_err.max((t.location_weights.iter().sum::<f64>() - 1.0).abs());
        }
        let m = rng.random_range(1..30);
        let w = binary_tree_span_weights(m, tau)?;
        for k in 0..m {
            palindrome = palindrome.max((w[k] - w[m - 1 - k]).abs());
        }
    }
    report.at_most("target mass - 1", mass_err, 1e-12);
    report.at_most("location mass - 1", loc_err, 1e-12);
    report.at_most("span weights palindrome", palindrome, 1e-12);

    let e1 = (-1.0f64).exp();
    let e2 = (-2.0f64).exp();
    let z = 1.0 + 2.0 * e1 + 2.0 * e2;
    let closed = [e2 / z, e1 / z, 1.0 / z, e1 / z, e2 / z];
    let w = binary_tree_span_weights(5, 1.0)?;
    let dev = w.iter().zip(closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    report.at_most("m=5 tau=1 closed form", dev, 1e-12);

    let mut enum_err = 0.0f64;
    for n in 0..=crate::order::MAX_ENUMERATION_LEN {
        for i in 1..=n.max(1) {
            for prior in [OrderPrior::Uniform, OrderPrior::BinaryTree { tau: 1.0 }] {
                let total: f64 = enumerate_partial_orders(n, i, prior)?.iter().map(|(_, p)| p).sum();
                enum_err = enum_err.max((total - 1.0).abs());
            }
        }
    }
    report.at_most("enumeration mass - 1", enum_err, 1e-12);
    Ok(report)
}
