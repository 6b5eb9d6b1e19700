//! Toy pair tasks and JSONL dataset ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::canvas::PairedExample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab::{TokenId, Vocab, NUM_RESERVED};

/// Seed of the fixed token permutation used by `cipher_pair`.
pub const CIPHER_SEED: u64 = 0xC1_9E5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Copy,
    Reverse,
    CipherPair,
    Sort,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyKind::Copy),
            "reverse" => Ok(ToyKind::Reverse),
            "cipher_pair" => Ok(ToyKind::CipherPair),
            "sort" => Ok(ToyKind::Sort),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (copy|reverse|cipher_pair|sort)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Copy => "copy",
            ToyKind::Reverse => "reverse",
            ToyKind::CipherPair => "cipher_pair",
            ToyKind::Sort => "sort",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: ToyKind,
    /// Number of content tokens.
    pub vocab_size: usize,
    /// Inclusive range of source lengths.
    pub len_range: (usize, usize),
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.len_range;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("bad length range {lo}..={hi}")));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("toy vocabulary must be nonempty".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }

    /// Target side for a source sequence.
    pub fn target(&self, x: &[TokenId]) -> Vec<TokenId> {
        match self.kind {
            ToyKind::Copy => x.to_vec(),
            ToyKind::Reverse => x.iter().rev().copied().collect(),
            ToyKind::Sort => {
                let mut y = x.to_vec();
                y.sort();
                y
            }
            ToyKind::CipherPair => {
                let perm = cipher_permutation(self.vocab_size);
                x.iter().rev().map(|t| perm[t.index() - NUM_RESERVED]).collect()
            }
        }
    }
}

/// The fixed substitution used by `cipher_pair`, as a table from content
/// index to token.
pub fn cipher_permutation(vocab_size: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..vocab_size).map(|i| TokenId((NUM_RESERVED + i) as u32)).collect();
    ids.shuffle(&mut rng::seeded(CIPHER_SEED));
    ids
}

/// Inverse of the `cipher_pair` map: recovers the source from a target.
pub fn cipher_decode(vocab_size: usize, y: &[TokenId]) -> Vec<TokenId> {
    let perm = cipher_permutation(vocab_size);
    let mut inv = vec![TokenId(0); vocab_size];
    for (i, t) in perm.iter().enumerate() {
        inv[t.index() - NUM_RESERVED] = TokenId((NUM_RESERVED + i) as u32);
    }
    y.iter().rev().map(|t| inv[t.index() - NUM_RESERVED]).collect()
}

pub fn make_toy_dataset(task: &ToyTask, count: usize, rng: &mut Rng) -> Result<Vec<PairedExample>> {
    task.validate()?;
    (0..count)
        .map(|_| {
            let n = rng.random_range(task.len_range.0..=task.len_range.1);
            let x: Vec<TokenId> = (0..n)
                .map(|_| TokenId((NUM_RESERVED + rng.random_range(0..task.vocab_size)) as u32))
                .collect();
            let y = task.target(&x);
            PairedExample::paired(x, y)
        })
        .collect()
}

/// Unpaired examples for marginal refining: alternately the source or the
/// target side of fresh task draws.
pub fn make_unpaired(task: &ToyTask, count: usize, rng: &mut Rng) -> Result<Vec<PairedExample>> {
    make_toy_dataset(task, count, rng)?
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            if i % 2 == 0 {
                PairedExample::x_only(ex.x.into_ids())
            } else {
                PairedExample::y_only(ex.y.into_ids())
            }
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    x: Option<Vec<String>>,
    y: Option<Vec<String>>,
}

/// Parses JSONL text: one `{"x": [...], "y": [...]}` object per line, either
/// key optional. Blank lines are skipped.
pub fn parse_jsonl(text: &str, vocab: &Vocab) -> Result<Vec<PairedExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(raw).map_err(|e| Error::Parse(format!("line {line_no}: {e}")))?;
        let enc = |side: Option<Vec<String>>| -> Result<Option<Vec<TokenId>>> {
            side.map(|toks| {
                toks.iter()
                    .map(|t| match vocab.lookup(t) {
                        Some(id) if !id.is_reserved() => Ok(id),
                        _ => Err(Error::Parse(format!("line {line_no}: unknown token {t:?}"))),
                    })
                    .collect()
            })
            .transpose()
        };
        let (x, y) = (enc(line.x)?, enc(line.y)?);
        if x.is_none() && y.is_none() {
            return Err(Error::Parse(format!("line {line_no}: neither \"x\" nor \"y\" present")));
        }
        out.push(PairedExample::build(x, y)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<PairedExample>> {
    parse_jsonl(&std::fs::read_to_string(path)?, vocab)
}

/// One JSONL line for an example.
pub fn to_jsonl_line(ex: &PairedExample, vocab: &Vocab) -> String {
    let names = |ids: &[TokenId]| -> Vec<String> {
        ids.iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_string()).collect()
    };
    let mut obj = serde_json::Map::new();
    if ex.has_x {
        obj.insert("x".into(), names(ex.x.ids()).into());
    }
    if ex.has_y {
        obj.insert("y".into(), names(ex.y.ids()).into());
    }
    serde_json::Value::Object(obj).to_string()
}
