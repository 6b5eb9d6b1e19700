use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use insertion_core::canvas::PairedExample;
use insertion_core::data::{self, ToyKind, ToyTask};
use insertion_core::decode::{self, DecodeLimits, DecodeMode, DecodeTrace, Direction};
use insertion_core::exec::Exec;
use insertion_core::order::OrderPrior;
use insertion_core::oracle;
use insertion_core::rng;
use insertion_core::scorer::{self, Parameters, Scorer, ScorerConfig};
use insertion_core::train::{self, TrainConfig};
use insertion_core::vocab::{TokenId, Vocab, GAP_MARKER};
use insertion_core::{Error, Result};

use crate::exit;

/// Separator between the x and y sides in text inputs and outputs.
const PAIR_SEP: &str = "|||";

#[derive(Parser, Debug)]
#[command(name = "insertgen", version, about = "Insertion-based sequence models: train, decode, sample, infill, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a toy task or a JSONL dataset.
    Train(TrainArgs),
    /// Conditionally decode one input per line.
    Decode(DecodeArgs),
    /// Sample pairs from the joint distribution.
    Sample(SampleArgs),
    /// Fill the single `___` gap in each input line.
    Infill(InfillArgs),
    /// Exact match and token accuracy of conditional decoding.
    Eval(EvalArgs),
    /// Run the enumeration, gradient or order-prior oracle suite.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file [default: vocab.txt beside the checkpoint]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LimitArgs {
    /// Iteration cap per decode.
    #[arg(long, default_value_t = 64)]
    pub max_iterations: usize,
    /// Canvas length cap [default: 4 * input tokens + 16, at most the model's limit]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Subtracted from the NO_INSERT logit.
    #[arg(long, default_value_t = 0.0)]
    pub eos_penalty: f64,
}

impl LimitArgs {
    fn limits(&self) -> DecodeLimits {
        DecodeLimits {
            max_iterations: self.max_iterations,
            max_len: self.max_len,
            eos_penalty: self.eos_penalty,
            temperature: 1.0,
        }
    }
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// TOML key/value file of flags; explicit flags win [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Toy task: copy, reverse, cipher_pair or sort [default: none]
    #[arg(long)]
    pub task: Option<String>,
    /// JSONL training data (needs --vocab) [default: none]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Vocabulary file for --data [default: none]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSONL evaluation data [default: none]
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Toy training pairs.
    #[arg(long, default_value_t = 20000)]
    pub train_size: usize,
    /// Toy held-out pairs.
    #[arg(long, default_value_t = 50)]
    pub eval_size: usize,
    /// Toy one-sided examples for marginal refining.
    #[arg(long, default_value_t = 2000)]
    pub unpaired_size: usize,
    /// Toy content vocabulary size.
    #[arg(long, default_value_t = 20)]
    pub toy_vocab: usize,
    /// Shortest toy source.
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    /// Longest toy source.
    #[arg(long, default_value_t = 48)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.98)]
    pub beta2: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    /// Weight of the finish loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_finish: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steps between metrics rows.
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    /// Share of batch entries drawn from one-sided examples.
    #[arg(long, default_value_t = 0.1)]
    pub unpaired_fraction: f64,
    /// Mode weights, e.g. joint=0.5,cond_y_given_x=0.5
    #[arg(long, default_value = "joint=0.5,cond_y_given_x=0.2,cond_x_given_y=0.2,marginal_x=0.05,marginal_y=0.05")]
    pub mode_mix: String,
    /// Order prior: uniform, binary_tree or binary_tree:<tau>
    #[arg(long, default_value = "binary_tree")]
    pub prior: String,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ff: usize,
    /// Longest model input, sentinels included.
    #[arg(long, default_value_t = 128)]
    pub model_max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Direction decoded at evaluation time.
    #[arg(long, default_value = "y_given_x")]
    pub eval_direction: String,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Observed side, one whitespace-tokenized sequence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "y_given_x")]
    pub direction: String,
    /// serial or parallel
    #[arg(long, default_value = "parallel")]
    pub mode: String,
    #[command(flatten)]
    pub limits: LimitArgs,
    /// Write the rendered insertion trace here [default: none]
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the traces as JSON here [default: none]
    #[arg(long)]
    pub trace_json: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Initial tokens as "x tokens ||| y tokens"; either side may be empty.
    #[arg(long, default_value = "")]
    pub seed_canvas: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_iterations: usize,
    /// Canvas length cap [default: the model's limit]
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub eos_penalty: f64,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct InfillArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Lines with exactly one ___ gap, optionally as "x ||| y".
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub limits: LimitArgs,
    /// Write the rendered insertion trace here [default: none]
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL evaluation pairs [default: none]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Toy task to draw evaluation pairs from [default: none]
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub eval_size: usize,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 48)]
    pub max_len_toy: usize,
    /// Seed of the toy evaluation draw.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "y_given_x")]
    pub direction: String,
    #[command(flatten)]
    pub limits: LimitArgs,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct OracleArgs {
    /// elbo, grad or order
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Offset added to every analytic gradient (fault injection).
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    /// Random scorers for the elbo suite.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Random canvases for the order suite.
    #[arg(long, default_value_t = 10000)]
    pub canvases: usize,
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Infill(a) => cmd_infill(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::OracleCheck(a) => cmd_oracle(&a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn toy_task(name: &str, vocab_size: usize, min_len: usize, max_len: usize) -> Result<ToyTask> {
    let task = ToyTask {
        kind: ToyKind::parse(name)?,
        vocab_size,
        len_range: (min_len, max_len),
    };
    task.validate()?;
    Ok(task)
}

struct TrainData {
    vocab: Vocab,
    train: Vec<PairedExample>,
    eval: Vec<PairedExample>,
}

fn train_data(a: &TrainArgs) -> Result<TrainData> {
    match (&a.task, &a.data) {
        (Some(_), Some(_)) => Err(Error::Config("give either --task or --data, not both".into())),
        (None, None) => Err(Error::Config("one of --task or --data is required".into())),
        (Some(name), None) => {
            let task = toy_task(name, a.toy_vocab, a.min_len, a.max_len)?;
            let mut train = data::make_toy_dataset(&task, a.train_size, &mut rng::stream(a.seed, &[0xDA7A, 0]))?;
            train.extend(data::make_unpaired(&task, a.unpaired_size, &mut rng::stream(a.seed, &[0xDA7A, 1]))?);
            let eval = data::make_toy_dataset(&task, a.eval_size, &mut rng::stream(a.seed, &[0xDA7A, 2]))?;
            Ok(TrainData {
                vocab: task.vocab(),
                train,
                eval,
            })
        }
        (None, Some(path)) => {
            let vocab_path = a
                .vocab
                .as_ref()
                .ok_or_else(|| Error::Config("--data needs --vocab".into()))?;
            let vocab = Vocab::load(vocab_path)?;
            let train = data::parse_jsonl(&read_file(path)?, &vocab)?;
            let eval = match &a.eval_data {
                Some(p) => data::parse_jsonl(&read_file(p)?, &vocab)?,
                None => Vec::new(),
            };
            Ok(TrainData { vocab, train, eval })
        }
    }
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let config = TrainConfig {
        mode_mix: train::parse_mode_mix(&a.mode_mix)?,
        prior: OrderPrior::parse(&a.prior)?,
        batch_size: a.batch_size,
        steps: a.steps,
        learning_rate: a.lr,
        adam_betas: (a.beta1, a.beta2),
        grad_clip: a.grad_clip,
        lambda_finish: a.lambda_finish,
        seed: a.seed,
        eval_every: a.eval_every,
        unpaired_fraction: a.unpaired_fraction,
        eval_direction: Direction::parse(&a.eval_direction)?,
        ..TrainConfig::default()
    };
    config.validate()?;
    let d = train_data(a)?;
    let scorer_config = ScorerConfig {
        vocab_size: d.vocab.len(),
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_len: a.model_max_len,
        dropout: a.dropout,
    };
    scorer_config.validate()?;
    let longest = d.train.iter().chain(&d.eval).map(|e| e.x.len() + e.y.len() + 2).max().unwrap_or(0);
    if longest > scorer_config.max_canvas_tokens() {
        return Err(Error::Length {
            len: longest,
            max_len: scorer_config.max_canvas_tokens(),
        });
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io(format!("{}: {e}", a.out.display())))?;

    let out = train::train_with_progress(&config, &d.train, &d.eval, &scorer_config, Exec::Parallel, |r| {
        eprintln!(
            "step {} loss {:.4} content {:.4} location {:.4} finish {:.4}{}",
            r.step,
            r.loss,
            r.content_nll,
            r.location_nll,
            r.finish_nll,
            r.eval_exact_match.map(|e| format!(" exact {e:.3}")).unwrap_or_default()
        )
    })?;

    scorer::save_checkpoint(&out.params, a.out.join("model.ckpt"))?;
    write_file(&a.out.join("metrics.csv"), &train::metrics_csv(&out.metrics))?;
    write_file(&a.out.join("vocab.txt"), &d.vocab.to_file_string())?;
    if !d.eval.is_empty() {
        let mut text = String::new();
        for ex in &d.eval {
            text.push_str(&data::to_jsonl_line(ex, &d.vocab));
            text.push('\n');
        }
        write_file(&a.out.join("eval.jsonl"), &text)?;
    }
    println!("wrote {}", a.out.display());
    Ok(exit::OK)
}

fn load_model(m: &ModelArgs) -> Result<(Parameters, Vocab)> {
    let (params, cfg) = scorer::load_checkpoint(&m.ckpt)?;
    let vocab_path = match &m.vocab {
        Some(p) => p.clone(),
        None => m.ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
    };
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} ids but the checkpoint expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok((params, vocab))
}

fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty())
}

/// Text form of a pair canvas: `x ||| y`, or the plain tokens when the
/// canvas is not a pair.
fn render_pair(kept: &[TokenId], vocab: &Vocab) -> String {
    match decode::pair_sides(kept) {
        Ok((x, y)) => format!("{} {PAIR_SEP} {}", vocab.decode(&x), vocab.decode(&y)).trim().to_string(),
        Err(_) => vocab.decode(kept),
    }
}

fn render_traces(traces: &[&DecodeTrace], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, t) in traces.iter().enumerate() {
        let _ = writeln!(out, "# input {} ({}, {} iterations)", i + 1, t.terminated.name(), t.iterations());
        out.push_str(&t.render(vocab));
        if !out.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

fn traces_json(traces: &[&DecodeTrace]) -> String {
    serde_json::to_string(traces).expect("traces serialize")
}

fn cmd_decode(a: &DecodeArgs) -> Result<u8> {
    let (params, vocab) = load_model(&a.model)?;
    let direction = Direction::parse(&a.direction)?;
    let mode = DecodeMode::parse(&a.mode)?;
    let limits = a.limits.limits();
    limits.validate()?;
    let canvases = lines(&read_file(&a.input)?)
        .map(|l| Ok(decode::conditional_canvas(&vocab.encode(l)?, direction)))
        .collect::<Result<Vec<_>>>()?;
    let outputs = decode::decode_batch(&params, &canvases, mode, &limits, Exec::Parallel)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for o in &outputs {
        text.push_str(&vocab.decode(&decode::hidden_side(o.canvas.kept(), direction)?));
        text.push('\n');
    }
    let traces: Vec<&DecodeTrace> = outputs.iter().map(|o| &o.trace).collect();
    if let Some(p) = &a.trace {
        write_file(p, &render_traces(&traces, &vocab))?;
    }
    if let Some(p) = &a.trace_json {
        write_file(p, &traces_json(&traces))?;
    }
    emit(a.output.as_deref(), &text)?;
    Ok(exit::OK)
}

fn cmd_sample(a: &SampleArgs) -> Result<u8> {
    let (params, vocab) = load_model(&a.model)?;
    let (sx, sy) = match a.seed_canvas.split_once(PAIR_SEP) {
        Some((x, y)) => (vocab.encode(x)?, vocab.encode(y)?),
        None => (vocab.encode(&a.seed_canvas)?, Vec::new()),
    };
    let limits = DecodeLimits {
        max_iterations: a.max_iterations,
        max_len: Some(a.max_len.or(params.max_canvas_len()).unwrap_or(usize::MAX)),
        eos_penalty: a.eos_penalty,
        temperature: a.temperature,
    };
    limits.validate()?;
    let canvas = decode::joint_canvas(&sx, &sy);
    let outputs = Exec::Parallel
        .map_indexed(a.n, |i| {
            decode::sample_decode(&params, &canvas, &limits, &mut rng::stream(a.seed, &[0x5A, i as u64]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for o in &outputs {
        text.push_str(&render_pair(o.canvas.kept(), &vocab));
        text.push('\n');
    }
    emit(a.output.as_deref(), &text)?;
    Ok(exit::OK)
}

/// Parses an infill line into kept tokens and the gap slot. A `|||` turns
/// the line into a pair canvas.
fn parse_infill_line(line: &str, vocab: &Vocab) -> Result<(Vec<TokenId>, usize)> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let gaps = words.iter().filter(|w| **w == GAP_MARKER).count();
    if gaps != 1 {
        return Err(Error::Config(format!(
            "expected exactly one {GAP_MARKER} gap, found {gaps} in {line:?}"
        )));
    }
    let is_pair = words.contains(&PAIR_SEP);
    let mut kept = Vec::with_capacity(words.len() + 1);
    let mut gap = 0;
    for w in &words {
        match *w {
            GAP_MARKER => gap = kept.len(),
            PAIR_SEP => kept.push(TokenId::EOS_X),
            t => match vocab.lookup(t) {
                Some(id) if !id.is_reserved() => kept.push(id),
                _ => return Err(Error::InvalidInput(format!("unknown token {t:?}"))),
            },
        }
    }
    if is_pair {
        if words.iter().filter(|w| **w == PAIR_SEP).count() != 1 {
            return Err(Error::Config(format!("more than one {PAIR_SEP} in {line:?}")));
        }
        kept.push(TokenId::EOS_Y);
    }
    Ok((kept, gap))
}

fn cmd_infill(a: &InfillArgs) -> Result<u8> {
    let (params, vocab) = load_model(&a.model)?;
    let limits = a.limits.limits();
    limits.validate()?;
    let parsed = lines(&read_file(&a.input)?)
        .map(|l| parse_infill_line(l, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let outputs = Exec::Parallel
        .map(&parsed, |(kept, gap)| decode::infill(&params, kept.clone(), *gap, &limits))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for o in &outputs {
        let _ = writeln!(text, "{}\t{}", vocab.decode(&o.span), render_pair(&o.full, &vocab));
    }
    if let Some(p) = &a.trace {
        let traces: Vec<&DecodeTrace> = outputs.iter().map(|o| &o.trace).collect();
        write_file(p, &render_traces(&traces, &vocab))?;
    }
    emit(a.output.as_deref(), &text)?;
    Ok(exit::OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let (params, vocab) = load_model(&a.model)?;
    let direction = Direction::parse(&a.direction)?;
    let limits = a.limits.limits();
    limits.validate()?;
    let dataset = match (&a.task, &a.data) {
        (Some(name), None) => {
            let task = toy_task(name, vocab.num_content(), a.min_len, a.max_len_toy)?;
            if task.vocab() != vocab {
                return Err(Error::Config("checkpoint vocabulary does not match the toy task".into()));
            }
            data::make_toy_dataset(&task, a.eval_size, &mut rng::stream(a.seed, &[0xDA7A, 2]))?
        }
        (None, Some(path)) => data::parse_jsonl(&read_file(path)?, &vocab)?,
        _ => return Err(Error::Config("give exactly one of --task or --data".into())),
    };
    let r = train::evaluate(&params, &dataset, direction, &limits, Exec::Parallel)?;
    println!("direction,examples,exact_match,token_accuracy,mean_iterations");
    println!(
        "{},{},{:.6},{:.6},{:.6}",
        direction.name(),
        r.outputs.len(),
        r.exact_match,
        r.token_accuracy,
        r.mean_iterations
    );
    Ok(exit::OK)
}

fn cmd_oracle(a: &OracleArgs) -> Result<u8> {
    let report = match a.suite.as_str() {
        "elbo" => oracle::elbo_suite(a.seed, a.cases)?,
        "grad" => oracle::grad_suite(a.seed, a.perturb)?,
        "order" => oracle::order_suite(a.seed, a.canvases)?,
        other => return Err(Error::Config(format!("unknown suite {other:?} (elbo|grad|order)"))),
    };
    print!("{report}");
    if let Some(w) = report.worst() {
        println!("worst: {} = {:.3e} (tolerance {:.1e})", w.name, w.value, w.tolerance);
        return Ok(exit::ORACLE);
    }
    Ok(exit::OK)
}
