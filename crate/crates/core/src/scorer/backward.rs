//! Reverse-mode gradients of the insertion loss through the forward pass.

use ndarray::{s, Array2, ArrayView1, Axis};

use super::forward::{forward_one, gelu_grad, hadamard, Cache, LnCache};
use super::layout::Layout;
use super::params::{Gradients, Parameters};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objective::{loss_impl, LogitGrads, LossBreakdown, TrainingInstance};
use crate::rng::{self, Rng};

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: ArrayView1<f64>,
    lay: &Layout,
    g: &mut [f64],
    gain_id: usize,
    bias_id: usize,
) -> Array2<f64> {
    let mut gg = lay.vec_mut(g, gain_id);
    gg += &(dy * &cache.xhat).sum_axis(Axis(0));
    add_bias(lay, g, bias_id, dy);
    let dxhat = dy * &gain;
    let d = dy.ncols() as f64;
    let mut dx = dxhat.clone();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let xh = cache.xhat.row(i);
        let dh = dxhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        row.zip_mut_with(&xh, |v, &x| *v = r * (*v - m1 - x * m2));
    }
    dx
}

/// Accumulates `a^T b` into the matrix `id`.
fn add_outer(lay: &Layout, g: &mut [f64], id: usize, a: &Array2<f64>, b: &Array2<f64>) {
    let mut m = lay.mat_mut(g, id);
    m += &a.t().dot(b);
}

fn add_bias(lay: &Layout, g: &mut [f64], id: usize, d: &Array2<f64>) {
    let mut v = lay.vec_mut(g, id);
    v += &d.sum_axis(Axis(0));
}

fn backward(params: &Parameters, cache: &Cache, dl: &LogitGrads) -> Gradients {
    let cfg = params.config();
    let lay = params.layout();
    let ids = &lay.ids;
    let w = params.as_slice();
    let mut grads = params.zeros_like();
    let g = grads.data.as_mut_slice();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let len = cache.inputs.len();

    // heads
    let rep = &cache.slot_rep;
    add_outer(lay, g, ids.content_w, rep, &dl.content);
    add_bias(lay, g, ids.content_b, &dl.content);
    let dloc = dl.location.view().insert_axis(Axis(1)).to_owned();
    add_outer(lay, g, ids.loc_w, rep, &dloc);
    g[lay.spec(ids.loc_b).offset] += dl.location.sum();
    let mut drep = dl.content.dot(&lay.mat(w, ids.content_w).t());
    drep += &dloc.dot(&lay.mat(w, ids.loc_w).t());

    // slot projection
    let dpre = hadamard(&drep, &cache.slot_pre.mapv(gelu_grad));
    let hf = &cache.hf;
    let mut right = Array2::<f64>::zeros((len, d));
    right.slice_mut(s![..len - 1, ..]).assign(&hf.slice(s![1.., ..]));
    right.row_mut(len - 1).assign(&lay.vec(w, ids.boundary));
    {
        let mut sw = lay.mat_mut(g, ids.slot_w);
        sw.slice_mut(s![..d, ..]).scaled_add(1.0, &hf.t().dot(&dpre));
        sw.slice_mut(s![d.., ..]).scaled_add(1.0, &right.t().dot(&dpre));
    }
    add_bias(lay, g, ids.slot_b, &dpre);
    let slot_w = lay.mat(w, ids.slot_w);
    let mut dhf = dpre.dot(&slot_w.slice(s![..d, ..]).t());
    let dright = dpre.dot(&slot_w.slice(s![d.., ..]).t());
    {
        let mut tail = dhf.slice_mut(s![1.., ..]);
        tail += &dright.slice(s![..len - 1, ..]);
    }
    {
        let mut b = lay.vec_mut(g, ids.boundary);
        b += &dright.row(len - 1);
    }

    let mut dx = ln_backward(&dhf, &cache.lnf, lay.vec(w, ids.lnf_g), lay, g, ids.lnf_g, ids.lnf_b);

    for (l, lc) in ids.layers.iter().zip(&cache.layers).rev() {
        // feed-forward block
        let df = match &lc.drop_ffn {
            Some(m) => hadamard(&dx, m),
            None => dx.clone(),
        };
        add_outer(lay, g, l.w2, &lc.g, &df);
        add_bias(lay, g, l.b2, &df);
        let dgelu = df.dot(&lay.mat(w, l.w2).t());
        let dh1 = hadamard(&dgelu, &lc.h1.mapv(gelu_grad));
        add_outer(lay, g, l.w1, &lc.b, &dh1);
        add_bias(lay, g, l.b1, &dh1);
        let db = dh1.dot(&lay.mat(w, l.w1).t());
        dx += &ln_backward(&db, &lc.ln2, lay.vec(w, l.ln2_g), lay, g, l.ln2_g, l.ln2_b);

        // attention block
        let dy = match &lc.drop_attn {
            Some(m) => hadamard(&dx, m),
            None => dx.clone(),
        };
        add_outer(lay, g, l.wo, &lc.attn, &dy);
        add_bias(lay, g, l.bo, &dy);
        let dattn = dy.dot(&lay.mat(w, l.wo).t());
        let mut dq = Array2::<f64>::zeros((len, d));
        let mut dk = Array2::<f64>::zeros((len, d));
        let mut dv = Array2::<f64>::zeros((len, d));
        for (h, p) in lc.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dattn.slice(cols);
            let dp = dout.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let mut ds = hadamard(&dp, p);
            let rowsum = ds.sum_axis(Axis(1));
            for (mut row, (prow, rs)) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0)).zip(rowsum.iter())) {
                row.zip_mut_with(&prow, |v, &pv| *v -= pv * rs);
            }
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        add_outer(lay, g, l.wq, &lc.a, &dq);
        add_bias(lay, g, l.bq, &dq);
        add_outer(lay, g, l.wk, &lc.a, &dk);
        add_bias(lay, g, l.bk, &dk);
        add_outer(lay, g, l.wv, &lc.a, &dv);
        add_bias(lay, g, l.bv, &dv);
        let mut da = dq.dot(&lay.mat(w, l.wq).t());
        da += &dk.dot(&lay.mat(w, l.wk).t());
        da += &dv.dot(&lay.mat(w, l.wv).t());
        dx += &ln_backward(&da, &lc.ln1, lay.vec(w, l.ln1_g), lay, g, l.ln1_g, l.ln1_b);
    }

    for (i, &t) in cache.inputs.iter().enumerate() {
        let row = dx.row(i);
        let mut tok = lay.mat_mut(g, ids.tok_emb);
        let mut trow = tok.row_mut(t);
        trow += &row;
        let mut pos = lay.mat_mut(g, ids.pos_emb);
        let mut prow = pos.row_mut(i);
        prow += &row;
    }
    grads
}

/// Loss and exact gradients for a single training instance.
pub fn instance_loss_and_gradients(
    params: &Parameters,
    inst: &TrainingInstance,
    lambda_finish: f64,
    dropout_rng: Option<&mut Rng>,
) -> Result<(LossBreakdown, Gradients)> {
    let (logits, cache) = forward_one(params, &inst.canvas, dropout_rng, true)?;
    let insertable: Vec<bool> = inst.canvas.frozen_flags().iter().map(|f| !f).collect();
    let (breakdown, dl) = loss_impl(&logits, &inst.targets, &insertable, lambda_finish, inst.n_loss, true)?;
    let grads = backward(params, cache.as_ref().expect("cache requested"), dl.as_ref().expect("grads requested"));
    Ok((breakdown, grads))
}

/// Loss terms summed over a batch, each already carrying its weight in the
/// total: `total = content + location + finish`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    /// `sum n_loss * content_nll`
    pub content: f64,
    /// `sum n_loss * location_nll`
    pub location: f64,
    /// `sum lambda_finish * finish_nll`
    pub finish: f64,
    /// `sum n_loss`
    pub tokens: usize,
}

fn reduce(
    results: Vec<Result<(LossBreakdown, Gradients)>>,
    params: &Parameters,
    lambda_finish: f64,
) -> Result<(BatchLoss, Gradients)> {
    let mut total = BatchLoss::default();
    let mut grads = params.zeros_like();
    for (i, r) in results.into_iter().enumerate() {
        let (b, g) = r.map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} (canvas {i})")),
            other => other,
        })?;
        let n = b.tokens_in_targets as f64;
        total.total += b.total;
        total.content += n * b.content_nll;
        total.location += n * b.location_nll;
        total.finish += lambda_finish * b.finish_nll;
        total.tokens += b.tokens_in_targets;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Summed loss and gradients over a batch, without dropout. Per-instance
/// results are reduced in input order, so the outcome does not depend on
/// `exec`.
pub fn loss_and_gradients(
    params: &Parameters,
    instances: &[TrainingInstance],
    lambda_finish: f64,
    exec: Exec,
) -> Result<(BatchLoss, Gradients)> {
    let results = exec.map(instances, |inst| instance_loss_and_gradients(params, inst, lambda_finish, None));
    reduce(results, params, lambda_finish)
}

/// Like [`loss_and_gradients`] but applies the configured dropout, with one
/// rng stream per instance derived from `(seed, index)`.
pub fn loss_and_gradients_with_dropout(
    params: &Parameters,
    instances: &[TrainingInstance],
    lambda_finish: f64,
    seed: u64,
    exec: Exec,
) -> Result<(BatchLoss, Gradients)> {
    let results = exec.map_indexed(instances.len(), |i| {
        let mut r = rng::stream(seed, &[0xD0, i as u64]);
        instance_loss_and_gradients(params, &instances[i], lambda_finish, Some(&mut r))
    });
    reduce(results, params, lambda_finish)
}

/// Total loss only (no gradients), for finite-difference checks.
pub fn batch_loss(params: &Parameters, instances: &[TrainingInstance], lambda_finish: f64) -> Result<f64> {
    let mut total = 0.0;
    for inst in instances {
        let (logits, _) = forward_one(params, &inst.canvas, None, false)?;
        let insertable: Vec<bool> = inst.canvas.frozen_flags().iter().map(|f| !f).collect();
        let (b, _) = loss_impl(&logits, &inst.targets, &insertable, lambda_finish, inst.n_loss, false)?;
        total += b.total;
    }
    Ok(total)
}
