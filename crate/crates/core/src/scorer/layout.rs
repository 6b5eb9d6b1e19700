//! Named tensor layout over one flat parameter buffer.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::config::ScorerConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub boundary: usize,
    pub slot_w: usize,
    pub slot_b: usize,
    pub content_w: usize,
    pub content_b: usize,
    pub loc_w: usize,
    pub loc_b: usize,
}

/// Order, names and shapes of every parameter tensor.
#[derive(Clone, Debug)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) ids: Ids,
}

impl Layout {
    pub fn new(cfg: &ScorerConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                offset: total,
                shape,
            };
            total += spec.len();
            tensors.push(spec);
            tensors.len() - 1
        };
        let tok_emb = add("embed.token".into(), vec![v, d]);
        let pos_emb = add("embed.position".into(), vec![cfg.max_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                ln1_g: add(p("ln1.gain"), vec![d]),
                ln1_b: add(p("ln1.bias"), vec![d]),
                wq: add(p("attn.query.weight"), vec![d, d]),
                bq: add(p("attn.query.bias"), vec![d]),
                wk: add(p("attn.key.weight"), vec![d, d]),
                bk: add(p("attn.key.bias"), vec![d]),
                wv: add(p("attn.value.weight"), vec![d, d]),
                bv: add(p("attn.value.bias"), vec![d]),
                wo: add(p("attn.output.weight"), vec![d, d]),
                bo: add(p("attn.output.bias"), vec![d]),
                ln2_g: add(p("ln2.gain"), vec![d]),
                ln2_b: add(p("ln2.bias"), vec![d]),
                w1: add(p("ffn.in.weight"), vec![d, f]),
                b1: add(p("ffn.in.bias"), vec![f]),
                w2: add(p("ffn.out.weight"), vec![f, d]),
                b2: add(p("ffn.out.bias"), vec![d]),
            });
        }
        let lnf_g = add("final_ln.gain".into(), vec![d]);
        let lnf_b = add("final_ln.bias".into(), vec![d]);
        let boundary = add("slot.boundary".into(), vec![d]);
        let slot_w = add("slot.weight".into(), vec![2 * d, d]);
        let slot_b = add("slot.bias".into(), vec![d]);
        let content_w = add("content.weight".into(), vec![d, v]);
        let content_b = add("content.bias".into(), vec![v]);
        let loc_w = add("location.weight".into(), vec![d, 1]);
        let loc_b = add("location.bias".into(), vec![1]);
        Self {
            tensors,
            total,
            ids: Ids {
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                boundary,
                slot_w,
                slot_b,
                content_w,
                content_b,
                loc_w,
                loc_b,
            },
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn spec(&self, id: usize) -> &TensorSpec {
        &self.tensors[id]
    }

    pub(crate) fn mat<'a>(&self, buf: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let t = &self.tensors[id];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &buf[t.range()]).expect("layout shape")
    }

    pub(crate) fn vec<'a>(&self, buf: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        let t = &self.tensors[id];
        ArrayView1::from(&buf[t.range()])
    }

    pub(crate) fn mat_mut<'a>(&self, buf: &'a mut [f64], id: usize) -> ArrayViewMut2<'a, f64> {
        let t = &self.tensors[id];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut buf[t.range()])
            .expect("layout shape")
    }

    pub(crate) fn vec_mut<'a>(&self, buf: &'a mut [f64], id: usize) -> ArrayViewMut1<'a, f64> {
        let t = &self.tensors[id];
        ArrayViewMut1::from(&mut buf[t.range()])
    }
}
