//! Serial, parallel and sampled insertion decoding, gap infilling and
//! replayable traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::canvas::{Canvas, InsertionOp};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::Rng;
use crate::scorer::{log_softmax, Scorer, SlotLogits};
use crate::vocab::{TokenId, Vocab, GAP_MARKER, NUM_RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_iterations: usize,
    /// Stop once the canvas holds this many tokens; `None` means
    /// `4 * initial length + 16`.
    pub max_len: Option<usize>,
    /// Subtracted from the `NO_INSERT` logit.
    pub eos_penalty: f64,
    /// Sampling temperature (sampling only).
    pub temperature: f64,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self {
            max_iterations: 64,
            max_len: None,
            eos_penalty: 0.0,
            temperature: 1.0,
        }
    }
}

impl DecodeLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.eos_penalty.is_nan() {
            return Err(Error::Config("eos_penalty is NaN".into()));
        }
        Ok(())
    }

    fn len_limit(&self, canvas: &Canvas) -> usize {
        self.max_len.unwrap_or(4 * canvas.len() + 16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllFinished,
    MaxIterations,
    MaxLen,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::AllFinished => "all_finished",
            Termination::MaxIterations => "max_iterations",
            Termination::MaxLen => "max_len",
        }
    }
}

/// One decoding iteration: the tokens it saw, the insertions it made (slot
/// indices relative to that snapshot) and the slots it marked finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub canvas: Vec<TokenId>,
    pub ops: Vec<InsertionOp>,
    pub finished: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub initial: Canvas,
    pub steps: Vec<TraceStep>,
    pub output: Canvas,
    pub terminated: Termination,
}

impl DecodeTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    /// Number of tokens the decode added.
    pub fn inserted(&self) -> usize {
        self.output.len() - self.initial.len()
    }

    /// Re-applies every recorded op to the initial canvas. Fails if a
    /// snapshot disagrees, an op targets a frozen slot, or the result
    /// differs from the recorded output.
    pub fn replay(&self) -> Result<Canvas> {
        let mut canvas = self.initial.clone();
        for (i, step) in self.steps.iter().enumerate() {
            if canvas.kept() != step.canvas.as_slice() {
                return Err(Error::Constraint(format!("iteration {}: snapshot mismatch", i + 1)));
            }
            canvas.apply_simultaneous(&step.ops)?;
        }
        if canvas.kept() != self.output.kept() {
            return Err(Error::Constraint("replayed canvas differs from output".into()));
        }
        Ok(canvas)
    }

    /// Whether any op lands in a slot that is frozen in its snapshot.
    pub fn frozen_violations(&self) -> usize {
        let mut canvas = self.initial.clone();
        let mut bad = 0;
        for step in &self.steps {
            bad += step.ops.iter().filter(|op| op.slot >= canvas.num_slots() || canvas.is_frozen(op.slot)).count();
            if canvas.apply_simultaneous(&step.ops).is_err() {
                break;
            }
        }
        bad
    }

    /// One line per iteration: the canvas after the iteration, inserted
    /// tokens wrapped in «».
    pub fn render(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let name = |t: TokenId| vocab.token(t).unwrap_or("<unk>").to_string();
        for (i, step) in self.steps.iter().enumerate() {
            let mut sorted = step.ops.clone();
            sorted.sort_by_key(|op| op.slot);
            let mut words = Vec::with_capacity(step.canvas.len() + sorted.len());
            let mut next = sorted.iter().peekable();
            for s in 0..=step.canvas.len() {
                if let Some(op) = next.next_if(|op| op.slot == s) {
                    words.push(format!("«{}»", name(op.content)));
                }
                if let Some(&t) = step.canvas.get(s) {
                    words.push(name(t));
                }
            }
            let _ = writeln!(out, "{}\t{}", i + 1, words.join(" "));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub canvas: Canvas,
    pub trace: DecodeTrace,
}

/// Logits of the tokens a decoder may emit: `NO_INSERT` (penalized) and
/// every non-reserved token, in id order.
fn candidates(logits: &SlotLogits, slot: usize, eos_penalty: f64) -> Vec<(TokenId, f64)> {
    let row = logits.content.row(slot);
    std::iter::once((TokenId::NO_INSERT, row[TokenId::NO_INSERT.index()] - eos_penalty))
        .chain((NUM_RESERVED..row.len()).map(|c| (TokenId(c as u32), row[c])))
        .collect()
}

/// Highest-scoring candidate; ties go to the lower id.
fn argmax(c: &[(TokenId, f64)]) -> (TokenId, f64) {
    let mut best = c[0];
    for &(t, v) in &c[1..] {
        if v > best.1 {
            best = (t, v);
        }
    }
    best
}

fn sample(c: &[(TokenId, f64)], temperature: f64, rng: &mut Rng) -> TokenId {
    let probs: Vec<f64> = log_softmax(c.iter().map(|&(_, v)| v / temperature))
        .into_iter()
        .map(f64::exp)
        .collect();
    let mut u = rng.random::<f64>();
    for (&(t, _), p) in c.iter().zip(&probs) {
        if u < *p {
            return t;
        }
        u -= p;
    }
    // rounding left a sliver of mass: take the last candidate with support
    c.iter().zip(&probs).rev().find(|(_, p)| **p > 0.0).map(|(&(t, _), _)| t).unwrap()
}

enum Policy<'a> {
    Argmax,
    Sample(&'a mut Rng),
}

fn check_scorer_limit<S: Scorer + ?Sized>(scorer: &S, canvas: &Canvas) -> Result<()> {
    match scorer.max_canvas_len() {
        Some(m) if canvas.len() > m => Err(Error::Length {
            len: canvas.len() + 2,
            max_len: m + 2,
        }),
        _ => Ok(()),
    }
}

fn effective_limit<S: Scorer + ?Sized>(scorer: &S, canvas: &Canvas, limits: &DecodeLimits) -> usize {
    let l = limits.len_limit(canvas);
    scorer.max_canvas_len().map_or(l, |m| l.min(m))
}

fn parallel_impl<S: Scorer + ?Sized>(
    scorer: &S,
    canvas: &Canvas,
    limits: &DecodeLimits,
    mut policy: Policy<'_>,
) -> Result<DecodeOutput> {
    limits.validate()?;
    check_scorer_limit(scorer, canvas)?;
    let limit = effective_limit(scorer, canvas, limits);
    let mut cur = canvas.clone();
    let mut steps = Vec::new();
    let terminated = loop {
        if cur.open_slots().next().is_none() {
            break Termination::AllFinished;
        }
        if cur.len() >= limit {
            break Termination::MaxLen;
        }
        if steps.len() == limits.max_iterations {
            break Termination::MaxIterations;
        }
        let logits = scorer.score(&cur)?;
        let mut ops = Vec::new();
        let mut finished = Vec::new();
        for s in cur.open_slots() {
            let c = candidates(&logits, s, limits.eos_penalty);
            let tok = match &mut policy {
                Policy::Argmax => argmax(&c).0,
                Policy::Sample(rng) => sample(&c, limits.temperature, rng),
            };
            if tok == TokenId::NO_INSERT {
                finished.push(s);
            } else {
                ops.push(InsertionOp::new(tok, s));
            }
        }
        let snapshot = cur.kept().to_vec();
        for &s in &finished {
            cur.set_finished(s, true);
        }
        cur.apply_simultaneous(&ops)?;
        steps.push(TraceStep {
            canvas: snapshot,
            ops,
            finished,
        });
    };
    Ok(DecodeOutput {
        trace: DecodeTrace {
            initial: canvas.clone(),
            steps,
            output: cur.clone(),
            terminated,
        },
        canvas: cur,
    })
}

/// Partially autoregressive decoding: every open slot inserts its argmax
/// token (or finishes on `NO_INSERT`) in each iteration.
pub fn parallel_decode<S: Scorer + ?Sized>(scorer: &S, canvas: &Canvas, limits: &DecodeLimits) -> Result<DecodeOutput> {
    parallel_impl(scorer, canvas, limits, Policy::Argmax)
}

/// Parallel schedule with each slot's token drawn from
/// `softmax(logits / temperature)`.
pub fn sample_decode<S: Scorer + ?Sized>(
    scorer: &S,
    canvas: &Canvas,
    limits: &DecodeLimits,
    rng: &mut Rng,
) -> Result<DecodeOutput> {
    parallel_impl(scorer, canvas, limits, Policy::Sample(rng))
}

/// One insertion per iteration: the argmax of `log p(c | l) + log p(l)`
/// over open slots whose own argmax is not `NO_INSERT`. Slots whose argmax
/// is `NO_INSERT` are marked finished. Ties go to the lower slot, then the
/// lower token id.
pub fn greedy_serial<S: Scorer + ?Sized>(scorer: &S, canvas: &Canvas, limits: &DecodeLimits) -> Result<DecodeOutput> {
    limits.validate()?;
    check_scorer_limit(scorer, canvas)?;
    let limit = effective_limit(scorer, canvas, limits);
    let mut cur = canvas.clone();
    let mut steps = Vec::new();
    let terminated = loop {
        if cur.open_slots().next().is_none() {
            break Termination::AllFinished;
        }
        if cur.len() >= limit {
            break Termination::MaxLen;
        }
        if steps.len() == limits.max_iterations {
            break Termination::MaxIterations;
        }
        let logits = scorer.score(&cur)?;
        let insertable: Vec<usize> = cur.insertable_slots().collect();
        let loc = logits.location_log_probs(&insertable);
        let mut finished = Vec::new();
        let mut best: Option<(f64, InsertionOp)> = None;
        for s in cur.open_slots() {
            let c = candidates(&logits, s, limits.eos_penalty);
            if argmax(&c).0 == TokenId::NO_INSERT {
                finished.push(s);
                continue;
            }
            let lp = log_softmax(c.iter().map(|&(_, v)| v));
            let lp_loc = loc[insertable.binary_search(&s).expect("open slots are insertable")];
            for (&(t, _), l) in c.iter().zip(&lp).skip(1) {
                let score = l + lp_loc;
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, InsertionOp::new(t, s)));
                }
            }
        }
        let snapshot = cur.kept().to_vec();
        for &s in &finished {
            cur.set_finished(s, true);
        }
        let ops: Vec<InsertionOp> = best.map(|(_, op)| op).into_iter().collect();
        cur.apply_simultaneous(&ops)?;
        steps.push(TraceStep {
            canvas: snapshot,
            ops,
            finished,
        });
    };
    Ok(DecodeOutput {
        trace: DecodeTrace {
            initial: canvas.clone(),
            steps,
            output: cur.clone(),
            terminated,
        },
        canvas: cur,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Serial,
    Parallel,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(DecodeMode::Serial),
            "parallel" => Ok(DecodeMode::Parallel),
            _ => Err(Error::Config(format!("unknown decode mode {s:?} (serial|parallel)"))),
        }
    }
}

pub fn decode<S: Scorer + ?Sized>(scorer: &S, canvas: &Canvas, mode: DecodeMode, limits: &DecodeLimits) -> Result<DecodeOutput> {
    match mode {
        DecodeMode::Serial => greedy_serial(scorer, canvas, limits),
        DecodeMode::Parallel => parallel_decode(scorer, canvas, limits),
    }
}

/// Decodes independent canvases, possibly on several threads. Output order
/// matches input order.
pub fn decode_batch<S: Scorer + ?Sized>(
    scorer: &S,
    canvases: &[Canvas],
    mode: DecodeMode,
    limits: &DecodeLimits,
    exec: Exec,
) -> Vec<Result<DecodeOutput>> {
    exec.map(canvases, |c| decode(scorer, c, mode, limits))
}

/// Which side of a pair is generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    YGivenX,
    XGivenY,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "y_given_x" => Ok(Direction::YGivenX),
            "x_given_y" => Ok(Direction::XGivenY),
            _ => Err(Error::Config(format!("unknown direction {s:?} (y_given_x|x_given_y)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::YGivenX => "y_given_x",
            Direction::XGivenY => "x_given_y",
        }
    }
}

/// Canvas holding the observed side and both end markers, with only the
/// hidden side's slot open.
pub fn conditional_canvas(observed: &[TokenId], direction: Direction) -> Canvas {
    let (kept, open) = match direction {
        Direction::YGivenX => {
            let mut k = observed.to_vec();
            k.push(TokenId::EOS_X);
            k.push(TokenId::EOS_Y);
            (k, observed.len() + 1)
        }
        Direction::XGivenY => {
            let mut k = vec![TokenId::EOS_X];
            k.extend_from_slice(observed);
            k.push(TokenId::EOS_Y);
            (k, 0)
        }
    };
    let frozen = (0..=kept.len()).map(|s| s != open).collect();
    Canvas::with_frozen(kept, frozen).expect("flag count matches")
}

/// Canvas for joint generation from optional seed tokens on each side:
/// every slot before `EOS_Y` is open.
pub fn joint_canvas(seed_x: &[TokenId], seed_y: &[TokenId]) -> Canvas {
    let mut kept = seed_x.to_vec();
    kept.push(TokenId::EOS_X);
    kept.extend_from_slice(seed_y);
    kept.push(TokenId::EOS_Y);
    let last = kept.len();
    let frozen = (0..=last).map(|s| s == last).collect();
    Canvas::with_frozen(kept, frozen).expect("flag count matches")
}

/// Splits a pair canvas at its end markers into `(x, y)`.
pub fn pair_sides(kept: &[TokenId]) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let ex = kept.iter().position(|&t| t == TokenId::EOS_X);
    let ey = kept.iter().position(|&t| t == TokenId::EOS_Y);
    match (ex, ey) {
        (Some(a), Some(b)) if a < b && b == kept.len() - 1 => Ok((kept[..a].to_vec(), kept[a + 1..b].to_vec())),
        _ => Err(Error::Parse("canvas is not an (x, EOS_X, y, EOS_Y) pair".into())),
    }
}

/// The generated side of a conditional decode.
pub fn hidden_side(kept: &[TokenId], direction: Direction) -> Result<Vec<TokenId>> {
    let (x, y) = pair_sides(kept)?;
    Ok(match direction {
        Direction::YGivenX => y,
        Direction::XGivenY => x,
    })
}

/// Canvas in which every slot except `gap` is frozen and finished.
pub fn gap_canvas(kept: Vec<TokenId>, gap: usize) -> Result<Canvas> {
    if gap > kept.len() {
        return Err(Error::InvalidInput(format!("gap slot {gap} beyond {} tokens", kept.len())));
    }
    let slots = kept.len() + 1;
    let mut c = Canvas::with_frozen(kept, (0..slots).map(|s| s != gap).collect())?;
    for s in (0..slots).filter(|&s| s != gap) {
        c.set_finished(s, true);
    }
    Ok(c)
}

/// Splits whitespace-separated text around its single gap marker.
pub fn parse_gap(text: &str, vocab: &Vocab) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let gaps: Vec<usize> = words.iter().enumerate().filter(|(_, w)| **w == GAP_MARKER).map(|(i, _)| i).collect();
    if gaps.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "expected exactly one {GAP_MARKER} gap, found {}",
            gaps.len()
        )));
    }
    let enc = |ws: &[&str]| vocab.encode(&ws.join(" "));
    Ok((enc(&words[..gaps[0]])?, enc(&words[gaps[0] + 1..])?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfillOutput {
    pub span: Vec<TokenId>,
    pub full: Vec<TokenId>,
    pub trace: DecodeTrace,
}

/// Parallel decoding confined to one gap slot of `kept`.
pub fn infill<S: Scorer + ?Sized>(
    scorer: &S,
    kept: Vec<TokenId>,
    gap: usize,
    limits: &DecodeLimits,
) -> Result<InfillOutput> {
    let before = kept.len();
    let canvas = gap_canvas(kept, gap)?;
    let out = parallel_decode(scorer, &canvas, limits)?;
    let added = out.canvas.len() - before;
    let full = out.canvas.kept().to_vec();
    Ok(InfillOutput {
        span: full[gap..gap + added].to_vec(),
        full,
        trace: out.trace,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean_iterations: f64,
    pub median_iterations: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Keyed by number of inserted tokens.
    pub by_length: BTreeMap<usize, LengthStats>,
    pub mean_iterations: f64,
    /// Least-squares fit `iterations ~ slope * log2(length) + intercept`
    /// over outputs with at least one token; zero when undetermined.
    pub slope: f64,
    pub intercept: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

pub fn decode_stats(traces: &[&DecodeTrace]) -> Result<DecodeStats> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.inserted()).or_default().push(t.iterations() as f64);
    }
    let mean_iterations = traces.iter().map(|t| t.iterations() as f64).sum::<f64>() / traces.len() as f64;
    let pts: Vec<(f64, f64)> = traces
        .iter()
        .filter(|t| t.inserted() > 0)
        .map(|t| ((t.inserted() as f64).log2(), t.iterations() as f64))
        .collect();
    let (mut slope, mut intercept) = (0.0, 0.0);
    if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
            intercept = my - slope * mx;
        }
    }
    let by_length = groups
        .into_iter()
        .map(|(len, mut its)| {
            let mean = its.iter().sum::<f64>() / its.len() as f64;
            let stats = LengthStats {
                count: its.len(),
                mean_iterations: mean,
                median_iterations: median(&mut its),
            };
            (len, stats)
        })
        .collect();
    Ok(DecodeStats {
        by_length,
        mean_iterations,
        slope,
        intercept,
    })
}
