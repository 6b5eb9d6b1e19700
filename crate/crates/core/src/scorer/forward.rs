//! Forward pass: pre-norm transformer encoder without any attention mask,
//! followed by slot representations built from adjacent hidden states.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng as _;

use super::params::Parameters;
use super::{Scorer, SlotLogits};
use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::TokenId;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub attn: Array2<f64>,
    pub drop_attn: Option<Array2<f64>>,
    pub ln2: LnCache,
    pub b: Array2<f64>,
    pub h1: Array2<f64>,
    pub g: Array2<f64>,
    pub drop_ffn: Option<Array2<f64>>,
}

pub(crate) struct Cache {
    pub inputs: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    pub hf: Array2<f64>,
    pub slot_pre: Array2<f64>,
    pub slot_rep: Array2<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    let y = &xhat * &gain + &bias;
    (y, LnCache { xhat, rstd })
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn check_canvas(params: &Parameters, canvas: &Canvas) -> Result<Vec<usize>> {
    let cfg = params.config();
    let len = canvas.len() + 2;
    if len > cfg.max_len {
        return Err(Error::Length {
            len,
            max_len: cfg.max_len,
        });
    }
    let mut inputs = Vec::with_capacity(canvas.len() + 1);
    inputs.push(TokenId::CLS.index());
    for &t in canvas.kept() {
        if t.index() >= cfg.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        inputs.push(t.index());
    }
    Ok(inputs)
}

/// Runs the network on one canvas. With `dropout_rng`, dropout is applied
/// (when configured) and the activations needed for backprop are kept.
pub(crate) fn forward_one(
    params: &Parameters,
    canvas: &Canvas,
    dropout_rng: Option<&mut Rng>,
    keep_cache: bool,
) -> Result<(SlotLogits, Option<Cache>)> {
    let inputs = check_canvas(params, canvas)?;
    let cfg = params.config();
    let lay = params.layout();
    let ids = &lay.ids;
    let w = params.as_slice();
    let (len, d) = (inputs.len(), cfg.d_model);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let p_drop = cfg.dropout;
    let mut rng = dropout_rng.filter(|_| p_drop > 0.0);

    let tok = lay.mat(w, ids.tok_emb);
    let pos = lay.mat(w, ids.pos_emb);
    let mut x = Array2::<f64>::zeros((len, d));
    for (i, &t) in inputs.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(t));
        row += &pos.row(i);
    }

    let mut layer_caches = Vec::new();
    for l in &ids.layers {
        let (a, ln1) = layer_norm(&x, lay.vec(w, l.ln1_g), lay.vec(w, l.ln1_b));
        let q = a.dot(&lay.mat(w, l.wq)) + &lay.vec(w, l.bq);
        let k = a.dot(&lay.mat(w, l.wk)) + &lay.vec(w, l.bk);
        let v = a.dot(&lay.mat(w, l.wv)) + &lay.vec(w, l.bv);
        let mut attn = Array2::<f64>::zeros((len, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p.mapv_inplace(|v| v * scale);
            softmax_rows(&mut p);
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            if keep_cache {
                probs.push(p);
            }
        }
        let mut y = attn.dot(&lay.mat(w, l.wo)) + &lay.vec(w, l.bo);
        let drop_attn = rng.as_deref_mut().map(|r| dropout_mask(len, d, p_drop, r));
        if let Some(m) = &drop_attn {
            y *= m;
        }
        x += &y;

        let (b, ln2) = layer_norm(&x, lay.vec(w, l.ln2_g), lay.vec(w, l.ln2_b));
        let h1 = b.dot(&lay.mat(w, l.w1)) + &lay.vec(w, l.b1);
        let g = h1.mapv(gelu);
        let mut f = g.dot(&lay.mat(w, l.w2)) + &lay.vec(w, l.b2);
        let drop_ffn = rng.as_deref_mut().map(|r| dropout_mask(len, d, p_drop, r));
        if let Some(m) = &drop_ffn {
            f *= m;
        }
        x += &f;

        if keep_cache {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                drop_attn,
                ln2,
                b,
                h1,
                g,
                drop_ffn,
            });
        }
    }

    let (hf, lnf) = layer_norm(&x, lay.vec(w, ids.lnf_g), lay.vec(w, ids.lnf_b));

    // slot s sits between input positions s and s+1; the last slot's right
    // neighbour is the learned boundary vector
    let slot_w = lay.mat(w, ids.slot_w);
    let w_left = slot_w.slice(s![..d, ..]);
    let w_right = slot_w.slice(s![d.., ..]);
    let mut right = Array2::<f64>::zeros((len, d));
    right.slice_mut(s![..len - 1, ..]).assign(&hf.slice(s![1.., ..]));
    right.row_mut(len - 1).assign(&lay.vec(w, ids.boundary));
    let mut slot_pre = hf.dot(&w_left);
    slot_pre += &right.dot(&w_right);
    slot_pre += &lay.vec(w, ids.slot_b);
    let slot_rep = slot_pre.mapv(gelu);

    let content = slot_rep.dot(&lay.mat(w, ids.content_w)) + &lay.vec(w, ids.content_b);
    let loc_b = w[lay.spec(ids.loc_b).offset];
    let location = slot_rep.dot(&lay.mat(w, ids.loc_w)).column(0).mapv(|v| v + loc_b);

    let logits = SlotLogits { content, location };
    logits.check_finite()?;
    let cache = keep_cache.then(|| Cache {
        inputs,
        layers: layer_caches,
        lnf,
        hf,
        slot_pre,
        slot_rep,
    });
    Ok((logits, cache))
}

impl Scorer for Parameters {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn score(&self, canvas: &Canvas) -> Result<SlotLogits> {
        forward_one(self, canvas, None, false).map(|(l, _)| l)
    }

    fn max_canvas_len(&self) -> Option<usize> {
        Some(self.config().max_canvas_tokens())
    }
}

/// Elementwise product helper used by backprop.
pub(crate) fn hadamard(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|o, &bv| *o *= bv);
    out
}
