//! Self-attention over class tokens with an additive prior bias.
//!
//! Every head adds the same transposed difference matrix to its pre-softmax logits:
//! at query row `q` and key column `c` the bias is `delta(c, q)`. Class `j` therefore
//! attends to class `i` in proportion to `delta(i, j)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::layers::{head_cols, softmax_rows, softmax_rows_backward, Linear};
use crate::edge::DeltaEdge;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where the prior bias enters relative to the `1/sqrt(d_k)` scaling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPlacement {
    /// `softmax(Q K^T / sqrt(d_k) + bias)`
    #[default]
    AfterScale,
    /// `softmax((Q K^T + bias) / sqrt(d_k))`
    BeforeScale,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    /// One `K x d_k` output per head.
    pub outputs: Vec<Array2<T>>,
    /// One `K x K` row-stochastic weight matrix per head.
    pub weights: Vec<Array2<T>>,
}

fn head_logits<T: Scalar>(q: ArrayView2<T>, k: ArrayView2<T>, bias: &Array2<T>, placement: BiasPlacement) -> Array2<T> {
    let scale = T::one() / T::lit(q.ncols() as f64).sqrt();
    let qk = q.dot(&k.t());
    match placement {
        BiasPlacement::AfterScale => qk * scale + bias,
        BiasPlacement::BeforeScale => (qk + bias) * scale,
    }
}

/// Biased scaled dot-product attention on per-head query/key/value matrices.
pub fn biased_attention<T: Scalar>(
    queries: &[Array2<T>],
    keys: &[Array2<T>],
    values: &[Array2<T>],
    bias: &DeltaEdge<T>,
) -> Result<AttentionOutput<T>> {
    if queries.len() != keys.len() || queries.len() != values.len() || queries.is_empty() {
        return Err(Error::ShapeMismatch(
            "need the same positive number of query, key and value heads".into(),
        ));
    }
    let k = bias.k();
    let b = bias.attention_bias();
    let mut outputs = Vec::with_capacity(queries.len());
    let mut weights = Vec::with_capacity(queries.len());
    for ((q, kk), v) in queries.iter().zip(keys).zip(values) {
        if q.nrows() != k || kk.nrows() != k || v.nrows() != k || q.ncols() != kk.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "attention over {k} classes got q {:?}, k {:?}, v {:?}",
                q.dim(),
                kk.dim(),
                v.dim()
            )));
        }
        if q.iter().chain(kk.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        let p = softmax_rows(&head_logits(q.view(), kk.view(), &b, BiasPlacement::AfterScale));
        outputs.push(p.dot(v));
        weights.push(p);
    }
    Ok(AttentionOutput { outputs, weights })
}

/// Projection weights of one multi-head attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub(crate) fn forward(
        &self,
        x: ArrayView2<T>,
        bias: &Array2<T>,
        heads: usize,
        placement: BiasPlacement,
    ) -> (Array2<T>, AttentionCache<T>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let head_dim = q.ncols() / heads;
        let mut concat = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = head_cols(h, head_dim);
            let p = softmax_rows(&head_logits(q.slice(cols), k.slice(cols), bias, placement));
            concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.output.forward(concat.view());
        (
            out,
            AttentionCache {
                input: x.to_owned(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &AttentionCache<T>, dout: ArrayView2<T>, grad: &mut AttentionParams<T>) -> Array2<T> {
        let dconcat = self.output.backward(cache.concat.view(), dout, &mut grad.output);
        let heads = cache.probs.len();
        let head_dim = cache.q.ncols() / heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = head_cols(h, head_dim);
            let d_head = dconcat.slice(cols);
            let vh = cache.v.slice(cols);
            let dp = d_head.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_head));
            // Both placements scale the Q K^T term by the same factor.
            let ds = softmax_rows_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.input.view();
        let mut dx = self.query.backward(x, dq.view(), &mut grad.query);
        dx += &self.key.backward(x, dk.view(), &mut grad.key);
        dx += &self.value.backward(x, dv.view(), &mut grad.value);
        dx
    }
}
