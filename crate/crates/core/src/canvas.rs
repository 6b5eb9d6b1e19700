//! Sequences, canvases and insertion operations.
//!
//! Slots are indexed from 0: slot `s` sits immediately before kept token `s`
//! (so slot 0 is the left boundary and slot `k` the right boundary of a
//! canvas with `k` kept tokens).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// A token sequence. Never contains `PAD` or `NO_INSERT`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(Vec<TokenId>);

impl Sequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if let Some(bad) = ids
            .iter()
            .find(|&&t| t == TokenId::PAD || t == TokenId::NO_INSERT)
        {
            return Err(Error::InvalidInput(format!(
                "sequence contains reserved id {bad}"
            )));
        }
        Ok(Self(ids))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl From<Sequence> for Vec<TokenId> {
    fn from(s: Sequence) -> Self {
        s.0
    }
}

/// A (content, slot) pair applied to a canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InsertionOp {
    pub content: TokenId,
    pub slot: usize,
}

impl InsertionOp {
    pub fn new(content: TokenId, slot: usize) -> Self {
        Self { content, slot }
    }

    /// 1-based location, as used when writing insertion orders by hand.
    pub fn location(&self) -> usize {
        self.slot + 1
    }
}

/// The current partial hypothesis: kept tokens plus per-slot flags.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    kept: Vec<TokenId>,
    frozen: Vec<bool>,
    finished: Vec<bool>,
}

impl Canvas {
    /// Canvas with every slot open.
    pub fn new(kept: Vec<TokenId>) -> Self {
        let slots = kept.len() + 1;
        Self {
            kept,
            frozen: vec![false; slots],
            finished: vec![false; slots],
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn with_frozen(kept: Vec<TokenId>, frozen: Vec<bool>) -> Result<Self> {
        if frozen.len() != kept.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} frozen flags for {} slots",
                frozen.len(),
                kept.len() + 1
            )));
        }
        let finished = vec![false; frozen.len()];
        Ok(Self {
            kept,
            frozen,
            finished,
        })
    }

    pub fn kept(&self) -> &[TokenId] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.kept.len() + 1
    }

    pub fn is_frozen(&self, slot: usize) -> bool {
        self.frozen[slot]
    }

    pub fn is_finished(&self, slot: usize) -> bool {
        self.finished[slot]
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    pub fn finished_flags(&self) -> &[bool] {
        &self.finished
    }

    pub fn frozen_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().enumerate().filter(|(_, &f)| f).map(|(s, _)| s)
    }

    pub fn finished_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.finished.iter().enumerate().filter(|(_, &f)| f).map(|(s, _)| s)
    }

    /// Slots that accept insertions (not frozen).
    pub fn insertable_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().enumerate().filter(|(_, &f)| !f).map(|(s, _)| s)
    }

    /// Insertable slots that have not emitted `NO_INSERT` yet.
    pub fn open_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_slots()).filter(|&s| !self.frozen[s] && !self.finished[s])
    }

    pub fn set_frozen(&mut self, slot: usize, frozen: bool) {
        self.frozen[slot] = frozen;
    }

    pub fn set_finished(&mut self, slot: usize, finished: bool) {
        self.finished[slot] = finished;
    }

    /// Inserts `op.content` at `op.slot`. The target slot splits into two
    /// fresh, unfinished slots; every other slot keeps its flags.
    pub fn apply(&mut self, op: InsertionOp) -> Result<()> {
        if op.slot >= self.num_slots() {
            return Err(Error::InvalidInput(format!(
                "slot {} out of range for canvas with {} slots",
                op.slot,
                self.num_slots()
            )));
        }
        if self.frozen[op.slot] {
            return Err(Error::Constraint(format!(
                "insertion into frozen slot {}",
                op.slot
            )));
        }
        self.kept.insert(op.slot, op.content);
        self.frozen.insert(op.slot, false);
        self.finished[op.slot] = false;
        self.finished.insert(op.slot, false);
        Ok(())
    }

    /// Applies insertions that were all computed against this canvas'
    /// current slot indices. Ops are applied in ascending slot order with the
    /// running offset added to each index.
    pub fn apply_simultaneous(&mut self, ops: &[InsertionOp]) -> Result<()> {
        let mut sorted: Vec<InsertionOp> = ops.to_vec();
        sorted.sort_by_key(|op| op.slot);
        if sorted.windows(2).any(|w| w[0].slot == w[1].slot) {
            return Err(Error::InvalidInput(
                "two simultaneous insertions target the same slot".into(),
            ));
        }
        for (offset, op) in sorted.into_iter().enumerate() {
            self.apply(InsertionOp::new(op.content, op.slot + offset))?;
        }
        Ok(())
    }
}

impl fmt::Display for Canvas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.kept.iter().map(|t| t.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Pure form of [`Canvas::apply`].
pub fn apply_insertion(canvas: &Canvas, op: InsertionOp) -> Result<Canvas> {
    let mut next = canvas.clone();
    next.apply(op)?;
    Ok(next)
}

/// Insertion ops that build `x` in the given generation order.
///
/// `order` is a permutation of `0..x.len()`; element `i` names the original
/// position produced at step `i`.
pub fn ops_from_order(x: &[TokenId], order: &[usize]) -> Result<Vec<InsertionOp>> {
    let n = x.len();
    if order.len() != n {
        return Err(Error::InvalidInput(format!(
            "order has {} entries for a sequence of length {n}",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &z in order {
        if z >= n || seen[z] {
            return Err(Error::InvalidInput(format!("{order:?} is not a permutation")));
        }
        seen[z] = true;
    }
    Ok(order
        .iter()
        .enumerate()
        .map(|(i, &zi)| {
            // 1-based location is 1 + #{j < i : z_j < z_i}
            let location = 1 + order[..i].iter().filter(|&&zj| zj < zi).count();
            InsertionOp::new(x[zi], location - 1)
        })
        .collect())
}

/// Canvas made of `x` restricted to `kept` (sorted, 0-based), plus the run of
/// dropped tokens belonging to each slot.
pub fn slot_spans(x: &[TokenId], kept: &[usize]) -> Result<(Canvas, Vec<Vec<TokenId>>)> {
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("kept indices must be strictly increasing".into()));
    }
    if let Some(&last) = kept.last() {
        if last >= x.len() {
            return Err(Error::InvalidInput(format!(
                "kept index {last} out of range for length {}",
                x.len()
            )));
        }
    }
    let mut spans = Vec::with_capacity(kept.len() + 1);
    let mut start = 0;
    for &k in kept {
        spans.push(x[start..k].to_vec());
        start = k + 1;
    }
    spans.push(x[start..].to_vec());
    let canvas = Canvas::new(kept.iter().map(|&k| x[k]).collect());
    Ok((canvas, spans))
}

/// A sequence pair; either side may be absent (unpaired data).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairedExample {
    pub x: Sequence,
    pub y: Sequence,
    pub has_x: bool,
    pub has_y: bool,
}

impl PairedExample {
    pub fn paired(x: Vec<TokenId>, y: Vec<TokenId>) -> Result<Self> {
        Self::build(Some(x), Some(y))
    }

    pub fn x_only(x: Vec<TokenId>) -> Result<Self> {
        Self::build(Some(x), None)
    }

    pub fn y_only(y: Vec<TokenId>) -> Result<Self> {
        Self::build(None, Some(y))
    }

    pub fn build(x: Option<Vec<TokenId>>, y: Option<Vec<TokenId>>) -> Result<Self> {
        if x.is_none() && y.is_none() {
            return Err(Error::InvalidInput("example has neither side".into()));
        }
        let has_x = x.is_some();
        let has_y = y.is_some();
        Ok(Self {
            x: Sequence::new(x.unwrap_or_default())?,
            y: Sequence::new(y.unwrap_or_default())?,
            has_x,
            has_y,
        })
    }

    pub fn is_paired(&self) -> bool {
        self.has_x && self.has_y
    }
}

fn check_content(side: &[TokenId], vocab: &Vocab) -> Result<()> {
    for &t in side {
        if t.is_reserved() || t.index() >= vocab.len() {
            return Err(Error::InvalidInput(format!(
                "token id {t} collides with reserved ids or is outside the vocabulary"
            )));
        }
    }
    Ok(())
}

/// `(x.., EOS_X, y.., EOS_Y)`, omitting any absent side together with its marker.
pub fn concat_pair(ex: &PairedExample, vocab: &Vocab) -> Result<Sequence> {
    if !ex.has_x && !ex.has_y {
        return Err(Error::InvalidInput("example has neither side".into()));
    }
    let mut out = Vec::with_capacity(ex.x.len() + ex.y.len() + 2);
    if ex.has_x {
        check_content(ex.x.ids(), vocab)?;
        out.extend_from_slice(ex.x.ids());
        out.push(TokenId::EOS_X);
    }
    if ex.has_y {
        check_content(ex.y.ids(), vocab)?;
        out.extend_from_slice(ex.y.ids());
        out.push(TokenId::EOS_Y);
    }
    Sequence::new(out)
}

/// Inverse of [`concat_pair`].
pub fn split_pair(seq: &[TokenId], vocab: &Vocab) -> Result<PairedExample> {
    let eos_x: Vec<usize> = positions(seq, TokenId::EOS_X);
    let eos_y: Vec<usize> = positions(seq, TokenId::EOS_Y);
    if eos_x.len() > 1 || eos_y.len() > 1 {
        return Err(Error::Parse("duplicated end marker".into()));
    }
    let parsed = match (eos_x.first(), eos_y.first()) {
        (Some(&ex), Some(&ey)) => {
            if ey < ex || ey != seq.len() - 1 {
                return Err(Error::Parse("misplaced end marker".into()));
            }
            PairedExample::build(Some(seq[..ex].to_vec()), Some(seq[ex + 1..ey].to_vec()))
        }
        (Some(&ex), None) => {
            if ex != seq.len() - 1 {
                return Err(Error::Parse("tokens after final end marker".into()));
            }
            PairedExample::build(Some(seq[..ex].to_vec()), None)
        }
        (None, Some(&ey)) => {
            if ey != seq.len() - 1 {
                return Err(Error::Parse("tokens after final end marker".into()));
            }
            PairedExample::build(None, Some(seq[..ey].to_vec()))
        }
        (None, None) => return Err(Error::Parse("missing end marker".into())),
    }
    .map_err(|e| Error::Parse(e.to_string()))?;
    check_content(parsed.x.ids(), vocab).map_err(|e| Error::Parse(e.to_string()))?;
    check_content(parsed.y.ids(), vocab).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(parsed)
}

fn positions(seq: &[TokenId], t: TokenId) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter(|(_, &s)| s == t)
        .map(|(i, _)| i)
        .collect()
}
