//! Mode-mixed training loop, Adam, evaluation and metrics.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::canvas::PairedExample;
use crate::decode::{conditional_canvas, decode_stats, hidden_side, parallel_decode, DecodeLimits, DecodeOutput, Direction};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objective::{build_training_instance, TrainingInstance, TrainingMode};
use crate::order::OrderPrior;
use crate::rng;
use crate::scorer::{loss_and_gradients, loss_and_gradients_with_dropout, Gradients, Parameters, ScorerConfig};

const POOL_CHOICE: u64 = 0x9001;
const PAIRED: u64 = 0x9A1;
const UNPAIRED: u64 = 0x0A1;
const DROPOUT: u64 = 0xD209;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode_mix: Vec<(TrainingMode, f64)>,
    pub prior: OrderPrior,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub lambda_finish: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Share of batch entries drawn from the unpaired pool.
    pub unpaired_fraction: f64,
    /// Probability of a complete-canvas instance; `None` means
    /// `1 / (n_loss + 1)`.
    pub p_complete: Option<f64>,
    pub eval_direction: Direction,
    pub eval_limits: DecodeLimits,
}

/// Joint 0.5, each conditional 0.2, each marginal 0.05.
pub fn default_mode_mix() -> Vec<(TrainingMode, f64)> {
    vec![
        (TrainingMode::Joint, 0.5),
        (TrainingMode::CondYGivenX, 0.2),
        (TrainingMode::CondXGivenY, 0.2),
        (TrainingMode::MarginalX, 0.05),
        (TrainingMode::MarginalY, 0.05),
    ]
}

/// Parses `mode=weight` pairs separated by commas, e.g.
/// `cond_y_given_x=0.5,cond_x_given_y=0.5`.
pub fn parse_mode_mix(s: &str) -> Result<Vec<(TrainingMode, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("mode mix entry {part:?} is not mode=weight")))?;
        let mode = TrainingMode::parse(name.trim())?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad weight in {part:?}")))?;
        if out.iter().any(|(m, _)| *m == mode) {
            return Err(Error::Config(format!("mode {} listed twice", mode.name())));
        }
        out.push((mode, w));
    }
    Ok(out)
}

pub fn format_mode_mix(mix: &[(TrainingMode, f64)]) -> String {
    mix.iter()
        .map(|(m, w)| format!("{}={w}", m.name()))
        .collect::<Vec<_>>()
        .join(",")
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode_mix: default_mode_mix(),
            prior: OrderPrior::default(),
            batch_size: 16,
            steps: 1000,
            learning_rate: 3e-4,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-9,
            grad_clip: 1.0,
            lambda_finish: 1.0,
            seed: 0,
            eval_every: 100,
            unpaired_fraction: 0.1,
            p_complete: None,
            eval_direction: Direction::YGivenX,
            eval_limits: DecodeLimits::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mode_mix.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return bad("mode mix weights must be finite and non-negative".into());
        }
        if !(self.mode_mix.iter().map(|(_, w)| w).sum::<f64>() > 0.0) {
            return bad("mode mix weights must have positive sum".into());
        }
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return bad("batch_size, steps and eval_every must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate, grad_clip and adam_eps must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("adam betas {b1}, {b2} outside [0, 1)"));
        }
        if !(self.lambda_finish >= 0.0) {
            return bad("lambda_finish must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.unpaired_fraction) {
            return bad(format!("unpaired_fraction {} outside [0, 1]", self.unpaired_fraction));
        }
        if let Some(p) = self.p_complete {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("p_complete {p} outside [0, 1]"));
            }
        }
        self.prior.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.eval_limits.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Paired,
    Unpaired,
}

/// A training instance together with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledInstance {
    pub pool: Pool,
    /// Index of this instance within its pool's stream.
    pub counter: u64,
    pub example: usize,
    pub mode: TrainingMode,
    pub instance: TrainingInstance,
}

/// Draws training batches. Paired and unpaired instances come from separate
/// counter-indexed rng streams, so adding or removing unpaired data leaves
/// the sequence of paired instances unchanged.
pub struct BatchSampler<'a> {
    config: &'a TrainConfig,
    paired: Vec<(usize, &'a PairedExample)>,
    unpaired: Vec<(usize, &'a PairedExample)>,
    modes: Vec<TrainingMode>,
    mode_dist: WeightedIndex<f64>,
    paired_count: u64,
    unpaired_count: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a [PairedExample]) -> Result<Self> {
        config.validate()?;
        let (paired, unpaired): (Vec<_>, Vec<_>) = data.iter().enumerate().partition(|(_, e)| e.is_paired());
        if config.unpaired_fraction > 0.0 && unpaired.is_empty() {
            return Err(Error::Config(format!(
                "unpaired_fraction {} but the data has no unpaired examples",
                config.unpaired_fraction
            )));
        }
        if config.unpaired_fraction < 1.0 && paired.is_empty() {
            return Err(Error::Config("the data has no paired examples".into()));
        }
        let modes: Vec<TrainingMode> = config.mode_mix.iter().map(|(m, _)| *m).collect();
        let mode_dist = WeightedIndex::new(config.mode_mix.iter().map(|(_, w)| *w))
            .map_err(|e| Error::Config(format!("mode mix: {e}")))?;
        Ok(Self {
            config,
            paired,
            unpaired,
            modes,
            mode_dist,
            paired_count: 0,
            unpaired_count: 0,
        })
    }

    pub fn counts(&self) -> (u64, u64) {
        (self.paired_count, self.unpaired_count)
    }

    fn build(&self, pool: Pool, counter: u64) -> Result<SampledInstance> {
        let cfg = self.config;
        let (tag, list) = match pool {
            Pool::Paired => (PAIRED, &self.paired),
            Pool::Unpaired => (UNPAIRED, &self.unpaired),
        };
        let mut r = rng::stream(cfg.seed, &[tag, counter]);
        let (example, ex) = list[r.random_range(0..list.len())];
        let mode = match pool {
            Pool::Paired => self.modes[self.mode_dist.sample(&mut r)],
            Pool::Unpaired if ex.has_x => TrainingMode::MarginalX,
            Pool::Unpaired => TrainingMode::MarginalY,
        };
        let instance = build_training_instance(ex, mode, cfg.prior, cfg.p_complete, &mut r)?;
        Ok(SampledInstance {
            pool,
            counter,
            example,
            mode,
            instance,
        })
    }

    /// The batch for `step` (0-based). Must be called for consecutive steps.
    pub fn next_batch(&mut self, step: usize, exec: Exec) -> Result<Vec<SampledInstance>> {
        let cfg = self.config;
        let mut plan = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size {
            let unpaired = cfg.unpaired_fraction > 0.0
                && rng::stream(cfg.seed, &[POOL_CHOICE, step as u64, j as u64]).random::<f64>() < cfg.unpaired_fraction;
            if unpaired {
                plan.push((Pool::Unpaired, self.unpaired_count));
                self.unpaired_count += 1;
            } else {
                plan.push((Pool::Paired, self.paired_count));
                self.paired_count += 1;
            }
        }
        exec.map(&plan, |&(pool, counter)| self.build(pool, counter)).into_iter().collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr,
            betas,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((w, g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grads` to norm at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Per-token loss averaged since the previous row; the three components
    /// below add up to it.
    pub loss: f64,
    pub content_nll: f64,
    pub location_nll: f64,
    pub finish_nll: f64,
    pub eval_exact_match: Option<f64>,
    pub eval_token_accuracy: Option<f64>,
    pub eval_mean_iterations: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "step,loss,content_nll,location_nll,finish_nll,eval_exact_match,eval_token_accuracy,eval_mean_iterations";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.step,
            r.loss,
            r.content_nll,
            r.location_nll,
            r.finish_nll,
            opt(r.eval_exact_match),
            opt(r.eval_token_accuracy),
            opt(r.eval_mean_iterations)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub mean_iterations: f64,
    pub outputs: Vec<DecodeOutput>,
}

/// Fraction of positions that agree, over the longer of the two sequences.
pub fn token_accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    let denom = pred.len().max(gold.len());
    if denom == 0 {
        return 1.0;
    }
    pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / denom as f64
}

/// Conditional parallel decoding of the hidden side for every paired
/// example.
pub fn evaluate(
    params: &Parameters,
    dataset: &[PairedExample],
    direction: Direction,
    limits: &DecodeLimits,
    exec: Exec,
) -> Result<EvalResult> {
    let paired: Vec<&PairedExample> = dataset.iter().filter(|e| e.is_paired()).collect();
    if paired.is_empty() {
        return Err(Error::InvalidInput("evaluation needs paired examples".into()));
    }
    let results = exec.map(&paired, |ex| {
        let (observed, gold) = match direction {
            Direction::YGivenX => (ex.x.ids(), ex.y.ids()),
            Direction::XGivenY => (ex.y.ids(), ex.x.ids()),
        };
        let out = parallel_decode(params, &conditional_canvas(observed, direction), limits)?;
        let pred = hidden_side(out.canvas.kept(), direction)?;
        Ok::<_, Error>((pred == gold, token_accuracy(&pred, gold), out))
    });
    let mut exact = 0usize;
    let mut acc = 0.0;
    let mut outputs = Vec::with_capacity(paired.len());
    for r in results {
        let (hit, a, out) = r?;
        exact += hit as usize;
        acc += a;
        outputs.push(out);
    }
    let traces: Vec<_> = outputs.iter().map(|o| &o.trace).collect();
    let stats = decode_stats(&traces)?;
    let n = paired.len() as f64;
    Ok(EvalResult {
        exact_match: exact as f64 / n,
        token_accuracy: acc / n,
        mean_iterations: stats.mean_iterations,
        outputs,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: Parameters,
    pub metrics: Vec<MetricsRow>,
    /// Per-token loss of every step.
    pub step_losses: Vec<f64>,
    pub paired_instances: u64,
    pub unpaired_instances: u64,
}

/// Runs `config.steps` Adam updates on the per-token objective
/// `sum(total) / sum(n_loss)` over each batch.
pub fn train(
    config: &TrainConfig,
    data: &[PairedExample],
    eval_data: &[PairedExample],
    scorer_config: &ScorerConfig,
    exec: Exec,
) -> Result<TrainOutput> {
    train_with_progress(config, data, eval_data, scorer_config, exec, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    data: &[PairedExample],
    eval_data: &[PairedExample],
    scorer_config: &ScorerConfig,
    exec: Exec,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    let mut sampler = BatchSampler::new(config, data)?;
    let mut params = Parameters::init(scorer_config, config.seed)?;
    let mut adam = Adam::new(params.len(), config.learning_rate, config.adam_betas, config.adam_eps);
    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(config.steps);
    let mut window = [0.0f64; 4];
    let mut window_tokens = 0.0;
    for step in 0..config.steps {
        let batch = sampler.next_batch(step, exec)?;
        let instances: Vec<TrainingInstance> = batch.into_iter().map(|s| s.instance).collect();
        let result = if scorer_config.dropout > 0.0 {
            let seed = rng::stream(config.seed, &[DROPOUT, step as u64]).random();
            loss_and_gradients_with_dropout(&params, &instances, config.lambda_finish, seed, exec)
        } else {
            loss_and_gradients(&params, &instances, config.lambda_finish, exec)
        };
        let (breakdown, mut grads) = result.map_err(|e| match e {
            Error::Numeric(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;
        let tokens = breakdown.tokens as f64;
        let loss = breakdown.total / tokens;
        if !loss.is_finite() || grads.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        step_losses.push(loss);
        window[0] += breakdown.total;
        window[1] += breakdown.content;
        window[2] += breakdown.location;
        window[3] += breakdown.finish;
        window_tokens += tokens;
        grads.scale(1.0 / tokens);
        clip_grad_norm(&mut grads, config.grad_clip);
        adam.step(&mut params, &grads);

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let (em, ta, it) = if eval_data.iter().any(|e| e.is_paired()) {
                let r = evaluate(&params, eval_data, config.eval_direction, &config.eval_limits, exec)?;
                (Some(r.exact_match), Some(r.token_accuracy), Some(r.mean_iterations))
            } else {
                (None, None, None)
            };
            let row = MetricsRow {
                step: done,
                loss: window[0] / window_tokens,
                content_nll: window[1] / window_tokens,
                location_nll: window[2] / window_tokens,
                finish_nll: window[3] / window_tokens,
                eval_exact_match: em,
                eval_token_accuracy: ta,
                eval_mean_iterations: it,
            };
            on_row(&row);
            metrics.push(row);
            window = [0.0; 4];
            window_tokens = 0.0;
        }
    }
    let (paired_instances, unpaired_instances) = sampler.counts();
    Ok(TrainOutput {
        params,
        metrics,
        step_losses,
        paired_instances,
        unpaired_instances,
    })
}
