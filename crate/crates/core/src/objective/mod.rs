//! Training objective: sampled (canvas, weighted targets) instances and the
//! factorized insertion loss, plus exact enumeration oracles.

pub mod exact;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::canvas::{slot_spans, Canvas, PairedExample};
use crate::error::{Error, Result};
use crate::order::{extend_kept_set, next_step_weights, sample_step, OrderPrior, SlotTargets};
use crate::rng::Rng;
use crate::scorer::SlotLogits;
use crate::vocab::TokenId;

pub use exact::{
    estimate_elbo, estimate_elbo_samples, estimator_expectation_terms, exact_elbo, exact_elbo_terms,
    exact_log_likelihood, generation_log_prob, continuation_prob,
};

/// Which part of a pair is hidden (and therefore supervised).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Joint,
    CondYGivenX,
    CondXGivenY,
    MarginalX,
    MarginalY,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        TrainingMode::Joint,
        TrainingMode::CondYGivenX,
        TrainingMode::CondXGivenY,
        TrainingMode::MarginalX,
        TrainingMode::MarginalY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Joint => "joint",
            TrainingMode::CondYGivenX => "cond_y_given_x",
            TrainingMode::CondXGivenY => "cond_x_given_y",
            TrainingMode::MarginalX => "marginal_x",
            TrainingMode::MarginalY => "marginal_y",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }

    pub fn compatible(self, ex: &PairedExample) -> bool {
        match self {
            TrainingMode::Joint | TrainingMode::CondYGivenX | TrainingMode::CondXGivenY => {
                ex.is_paired()
            }
            TrainingMode::MarginalX => ex.has_x,
            TrainingMode::MarginalY => ex.has_y,
        }
    }
}

/// One sampled training canvas with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub canvas: Canvas,
    pub targets: SlotTargets,
    /// Size of the loss region (the tokens that may be hidden).
    pub n_loss: usize,
}

/// Sequence layout for a mode: the token sequence, which positions are in
/// the loss region, and the insertion zones as `(after, before)` marker
/// positions.
pub(crate) struct ModeLayout {
    pub seq: Vec<TokenId>,
    pub loss: Vec<usize>,
    pub zones: Vec<(Option<usize>, usize)>,
}

pub(crate) fn mode_layout(ex: &PairedExample, mode: TrainingMode) -> Result<ModeLayout> {
    if !mode.compatible(ex) {
        return Err(Error::InvalidInput(format!(
            "example lacks the side required by mode {}",
            mode.name()
        )));
    }
    let (x, y) = (ex.x.ids(), ex.y.ids());
    let mut seq = Vec::with_capacity(x.len() + y.len() + 2);
    let mut loss = Vec::new();
    let mut zones = Vec::new();
    let use_x = !matches!(mode, TrainingMode::MarginalY);
    let use_y = !matches!(mode, TrainingMode::MarginalX);
    let mut eos_x = None;
    if use_x {
        seq.extend_from_slice(x);
        seq.push(TokenId::EOS_X);
        eos_x = Some(x.len());
        if mode != TrainingMode::CondYGivenX {
            loss.extend(0..x.len());
            zones.push((None, x.len()));
        }
    }
    if use_y {
        let start = seq.len();
        seq.extend_from_slice(y);
        seq.push(TokenId::EOS_Y);
        if mode != TrainingMode::CondXGivenY {
            loss.extend(start..start + y.len());
            zones.push((eos_x, seq.len() - 1));
        }
    }
    Ok(ModeLayout { seq, loss, zones })
}

/// Frozen flag per slot of the canvas built from the sorted `kept` positions
/// of `layout.seq`.
pub(crate) fn frozen_flags(kept: &[usize], zones: &[(Option<usize>, usize)]) -> Vec<bool> {
    (0..=kept.len())
        .map(|s| {
            let left = if s == 0 { None } else { Some(kept[s - 1]) };
            let right = kept.get(s).copied();
            let open = zones.iter().any(|&(after, before)| {
                let left_ok = match (after, left) {
                    (None, _) => true,
                    (Some(a), Some(l)) => l >= a,
                    (Some(_), None) => false,
                };
                let right_ok = matches!(right, Some(r) if r <= before);
                left_ok && right_ok
            });
            !open
        })
        .collect()
}

/// Samples a training canvas for `ex` under `mode`.
///
/// Observed tokens and end markers are always kept and their slots frozen.
/// With probability `p_complete` (default `1 / (n_loss + 1)`) the canvas is
/// complete and only the finish targets remain; otherwise a step
/// `i ~ U[1, n_loss]` is drawn and `i - 1` loss-region tokens are kept.
pub fn build_training_instance(
    ex: &PairedExample,
    mode: TrainingMode,
    prior: OrderPrior,
    p_complete: Option<f64>,
    rng: &mut Rng,
) -> Result<TrainingInstance> {
    let layout = mode_layout(ex, mode)?;
    let n_loss = layout.loss.len();
    if n_loss == 0 {
        return Err(Error::InvalidInput(format!(
            "mode {} has an empty loss region for this example",
            mode.name()
        )));
    }
    let anchors: Vec<usize> = (0..layout.seq.len())
        .filter(|p| layout.loss.binary_search(p).is_err())
        .collect();
    let p_complete = p_complete.unwrap_or(1.0 / (n_loss as f64 + 1.0));
    let complete = rng.random::<f64>() < p_complete;
    let to_keep = if complete {
        n_loss
    } else {
        sample_step(n_loss, rng)? - 1
    };
    let kept = extend_kept_set(layout.seq.len(), anchors, to_keep, prior, rng)?;
    let (canvas, spans) = slot_spans(&layout.seq, &kept)?;
    let frozen = frozen_flags(&kept, &layout.zones);
    let mut targets = next_step_weights(&spans, prior);
    targets.finish_slots.retain(|&s| !frozen[s]);
    let canvas = Canvas::with_frozen(canvas.kept().to_vec(), frozen)?;
    Ok(TrainingInstance {
        canvas,
        targets,
        n_loss,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content_nll: f64,
    pub location_nll: f64,
    pub finish_nll: f64,
    pub total: f64,
    pub tokens_in_targets: usize,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.content_nll += other.content_nll;
        self.location_nll += other.location_nll;
        self.finish_nll += other.finish_nll;
        self.total += other.total;
        self.tokens_in_targets += other.tokens_in_targets;
    }

    /// Total divided by the loss-region size.
    pub fn per_token(&self) -> f64 {
        self.total / self.tokens_in_targets.max(1) as f64
    }
}

/// Gradient of the loss with respect to the scorer outputs.
pub(crate) struct LogitGrads {
    pub content: Array2<f64>,
    pub location: Array1<f64>,
}

/// Weighted insertion loss for one canvas.
///
/// `total = n_loss * (content_nll + location_nll) + lambda_finish * finish_nll`
/// where the location softmax ranges over insertable slots only.
pub fn loss(
    logits: &SlotLogits,
    targets: &SlotTargets,
    insertable: &[bool],
    lambda_finish: f64,
    n_loss: usize,
) -> Result<LossBreakdown> {
    loss_impl(logits, targets, insertable, lambda_finish, n_loss, false).map(|(b, _)| b)
}

pub(crate) fn loss_impl(
    logits: &SlotLogits,
    targets: &SlotTargets,
    insertable: &[bool],
    lambda_finish: f64,
    n_loss: usize,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LogitGrads>)> {
    let slots = logits.num_slots();
    if targets.num_slots() != slots || insertable.len() != slots {
        return Err(Error::InvalidInput(format!(
            "{} logit slots, {} target slots, {} insertable flags",
            slots,
            targets.num_slots(),
            insertable.len()
        )));
    }
    logits.check_finite()?;
    let n_scale = n_loss as f64;
    let vocab = logits.vocab_size();
    let mut grads = want_grad.then(|| LogitGrads {
        content: Array2::zeros((slots, vocab)),
        location: Array1::zeros(slots),
    });

    let mut content_nll = 0.0;
    for s in 0..slots {
        if targets.tokens[s].is_empty() {
            continue;
        }
        let logp = logits.content_log_probs(s);
        let mut mass = 0.0;
        for &(tok, w) in &targets.tokens[s] {
            content_nll -= w * logp[tok.index()];
            mass += w;
            if let Some(g) = grads.as_mut() {
                g.content[[s, tok.index()]] -= n_scale * w;
            }
        }
        if let Some(g) = grads.as_mut() {
            for (c, lp) in logp.iter().enumerate() {
                g.content[[s, c]] += n_scale * mass * lp.exp();
            }
        }
    }

    let open: Vec<usize> = (0..slots).filter(|&s| insertable[s]).collect();
    let mut location_nll = 0.0;
    for s in 0..slots {
        if !insertable[s] && targets.location_weights[s] != 0.0 {
            return Err(Error::Constraint(format!("target weight on frozen slot {s}")));
        }
    }
    if !open.is_empty() {
        let logq = logits.location_log_probs(&open);
        let mut mass = 0.0;
        for (j, &s) in open.iter().enumerate() {
            let w = targets.location_weights[s];
            location_nll -= w * logq[j];
            mass += w;
        }
        if let Some(g) = grads.as_mut() {
            for (j, &s) in open.iter().enumerate() {
                g.location[s] += n_scale * (mass * logq[j].exp() - targets.location_weights[s]);
            }
        }
    }

    let mut finish_nll = 0.0;
    let finish = &targets.finish_slots;
    if !finish.is_empty() {
        let coef = 1.0 / finish.len() as f64;
        for &s in finish {
            let logp = logits.content_log_probs(s);
            finish_nll -= coef * logp[TokenId::NO_INSERT.index()];
            if let Some(g) = grads.as_mut() {
                let scale = lambda_finish * coef;
                for (c, lp) in logp.iter().enumerate() {
                    g.content[[s, c]] += scale * lp.exp();
                }
                g.content[[s, TokenId::NO_INSERT.index()]] -= scale;
            }
        }
    }

    let total = n_scale * (content_nll + location_nll) + lambda_finish * finish_nll;
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((
        LossBreakdown {
            content_nll,
            location_nll,
            finish_nll,
            total,
            tokens_in_targets: n_loss,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Array1;

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    fn pair(xs: &[u32], ys: &[u32]) -> PairedExample {
        PairedExample::paired(xs.iter().map(|&i| t(i)).collect(), ys.iter().map(|&i| t(i)).collect())
            .unwrap()
    }

    #[test]
    fn conditional_mode_never_drops_observed_side() {
        let ex = pair(&[6, 7, 8, 9], &[10, 11, 12, 13, 14]);
        let mut rng = seeded(3);
        for _ in 0..500 {
            for prior in [OrderPrior::Uniform, OrderPrior::BinaryTree { tau: 1.0 }] {
                let inst = build_training_instance(&ex, TrainingMode::CondYGivenX, prior, None, &mut rng)
                    .unwrap();
                let kept = inst.canvas.kept();
                assert_eq!(&kept[..5], &[t(6), t(7), t(8), t(9), TokenId::EOS_X]);
                assert_eq!(*kept.last().unwrap(), TokenId::EOS_Y);
                // x-side slots and the trailing slot are frozen
                for s in 0..=4 {
                    assert!(inst.canvas.is_frozen(s));
                    assert!(inst.targets.tokens[s].is_empty());
                }
                assert!(inst.canvas.is_frozen(inst.canvas.num_slots() - 1));
                assert!(!inst.canvas.is_frozen(5));
                assert_eq!(inst.n_loss, 5);
            }
        }
    }

    #[test]
    fn marginal_x_omits_y_side() {
        let ex = PairedExample::x_only(vec![t(6), t(7)]).unwrap();
        let mut rng = seeded(1);
        let inst =
            build_training_instance(&ex, TrainingMode::MarginalX, OrderPrior::Uniform, Some(1.0), &mut rng)
                .unwrap();
        assert_eq!(inst.canvas.kept(), &[t(6), t(7), TokenId::EOS_X]);
        assert_eq!(inst.canvas.frozen_flags(), &[false, false, false, true]);
        assert_eq!(inst.targets.finish_slots, vec![0, 1, 2]);
        assert!(build_training_instance(&ex, TrainingMode::Joint, OrderPrior::Uniform, None, &mut rng).is_err());
    }

    #[test]
    fn joint_first_step_keeps_only_markers() {
        let ex = pair(&[6, 7], &[8]);
        let mut rng = seeded(0);
        let mut seen = false;
        for _ in 0..200 {
            let inst =
                build_training_instance(&ex, TrainingMode::Joint, OrderPrior::Uniform, Some(0.0), &mut rng)
                    .unwrap();
            if inst.canvas.len() == 2 {
                seen = true;
                assert_eq!(inst.canvas.kept(), &[TokenId::EOS_X, TokenId::EOS_Y]);
                assert_eq!(inst.targets.tokens[0].len(), 2);
                assert_eq!(inst.targets.tokens[1].len(), 1);
                assert!((inst.targets.total_mass() - 1.0).abs() < 1e-12);
                assert!(inst.canvas.is_frozen(2));
            }
        }
        assert!(seen);
    }

    #[test]
    fn empty_loss_region_is_rejected() {
        let ex = pair(&[6], &[]);
        let mut rng = seeded(0);
        assert!(matches!(
            build_training_instance(&ex, TrainingMode::CondYGivenX, OrderPrior::Uniform, None, &mut rng),
            Err(Error::InvalidInput(_))
        ));
    }

    fn logits(content: Vec<Vec<f64>>, location: Vec<f64>) -> SlotLogits {
        let rows = content.len();
        let cols = content[0].len();
        SlotLogits {
            content: Array2::from_shape_vec((rows, cols), content.concat()).unwrap(),
            location: Array1::from(location),
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 9;
        let l = logits(vec![vec![0.0; v]], vec![0.0]);
        let targets = SlotTargets {
            tokens: vec![vec![(t(6), 1.0)]],
            location_weights: vec![1.0],
            finish_slots: vec![],
        };
        let b = loss(&l, &targets, &[true], 1.0, 1).unwrap();
        assert!((b.content_nll - (v as f64).ln()).abs() < 1e-12);
        assert!(b.location_nll.abs() < 1e-12);
    }

    #[test]
    fn saturated_finish_prediction_costs_nothing() {
        let mut row = vec![0.0; 8];
        row[TokenId::NO_INSERT.index()] = 800.0;
        let l = logits(vec![row.clone(), row], vec![0.0, 0.0]);
        let targets = SlotTargets {
            tokens: vec![vec![], vec![]],
            location_weights: vec![0.0, 0.0],
            finish_slots: vec![0, 1],
        };
        let b = loss(&l, &targets, &[true, true], 1.0, 1).unwrap();
        assert!(b.finish_nll.abs() < 1e-300);
    }

    #[test]
    fn equal_nll_targets_average() {
        let row = vec![0.3, -0.2, 0.1, 0.0, 0.0, 0.0, 1.0, 1.0];
        let l = logits(vec![row], vec![0.0]);
        let q = -l.content_log_probs(0)[6];
        let targets = SlotTargets {
            tokens: vec![vec![(t(6), 0.5), (t(7), 0.5)]],
            location_weights: vec![1.0],
            finish_slots: vec![],
        };
        let b = loss(&l, &targets, &[true], 0.0, 2).unwrap();
        assert!((b.content_nll - q).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let l = logits(
            vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, -0.8], vec![0.9, 0.0, -0.3, 0.2, 0.1, 0.0, 0.5, 0.4]],
            vec![0.2, -0.4],
        );
        let mut targets = SlotTargets {
            tokens: vec![vec![(t(6), 0.25)], vec![(t(7), 0.75)]],
            location_weights: vec![0.25, 0.75],
            finish_slots: vec![],
        };
        let a = loss(&l, &targets, &[true, true], 1.0, 3).unwrap();
        targets.scale(2.0);
        let b = loss(&l, &targets, &[true, true], 1.0, 3).unwrap();
        assert!((b.content_nll - 2.0 * a.content_nll).abs() < 1e-12);
    }

    #[test]
    fn frozen_target_and_nonfinite_logits_error() {
        let l = logits(vec![vec![0.0; 8], vec![0.0; 8]], vec![0.0, 0.0]);
        let targets = SlotTargets {
            tokens: vec![vec![(t(6), 1.0)], vec![]],
            location_weights: vec![1.0, 0.0],
            finish_slots: vec![],
        };
        assert!(matches!(loss(&l, &targets, &[false, true], 1.0, 1), Err(Error::Constraint(_))));
        let bad = logits(vec![vec![f64::NAN; 8], vec![0.0; 8]], vec![0.0, 0.0]);
        assert!(matches!(loss(&bad, &targets, &[true, true], 1.0, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn frozen_flags_for_conditional_pair() {
        // (x0 x1 EOS_X y0 EOS_Y) with y0 dropped: kept = {0,1,2,4}
        let kept = [0, 1, 2, 4];
        let zones = [(Some(2), 4)];
        assert_eq!(frozen_flags(&kept, &zones), vec![true, true, true, false, true]);
    }
}
