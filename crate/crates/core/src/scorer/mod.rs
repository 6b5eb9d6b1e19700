//! Canvas scorers: anything that maps a canvas to per-slot content logits and
//! per-slot location logits.

mod backward;
pub mod checkpoint;
mod config;
mod forward;
mod layout;
mod params;

use ndarray::{Array1, Array2};

pub use backward::{batch_loss, BatchLoss, instance_loss_and_gradients, loss_and_gradients, loss_and_gradients_with_dropout};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::ScorerConfig;
pub use layout::{Layout, TensorSpec};
pub use params::{Gradients, Parameters};

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Scorer output for one canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLogits {
    /// `[num_slots, vocab_size]`
    pub content: Array2<f64>,
    /// `[num_slots]`
    pub location: Array1<f64>,
}

impl SlotLogits {
    pub fn num_slots(&self) -> usize {
        self.location.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.content.ncols()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.content.iter().chain(self.location.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite logits".into()))
        }
    }

    /// `log softmax(content[slot])`.
    pub fn content_log_probs(&self, slot: usize) -> Vec<f64> {
        log_softmax(self.content.row(slot).iter().copied())
    }

    /// Log-softmax of the location logits restricted to `slots`, returned in
    /// the order given.
    pub fn location_log_probs(&self, slots: &[usize]) -> Vec<f64> {
        log_softmax(slots.iter().map(|&s| self.location[s]))
    }
}

pub(crate) fn log_softmax(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.clone().map(|v| (v - max).exp()).sum::<f64>().ln();
    values.map(|v| v - lse).collect()
}

pub trait Scorer: Sync {
    /// Number of token ids the content logits range over.
    fn vocab_size(&self) -> usize;

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits>;

    /// Most kept tokens a canvas may hold, if the scorer has a limit.
    fn max_canvas_len(&self) -> Option<usize> {
        None
    }

    fn score_batch(&self, canvases: &[Canvas], exec: Exec) -> Result<Vec<SlotLogits>> {
        exec.map(canvases, |c| self.score(c)).into_iter().collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits> {
        (**self).score(canvas)
    }

    fn max_canvas_len(&self) -> Option<usize> {
        (**self).max_canvas_len()
    }
}
