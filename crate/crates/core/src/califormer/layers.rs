//! Dense building blocks with hand-written reverse passes.
//!
//! Token matrices are `K x d`: one row per class.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || T::lit(dist.sample(rng)))
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: gaussian(rng, (input, output), (1.0 / input as f64).sqrt()),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub(crate) fn tensors(&self) -> [&[T]; 2] {
        [slice(&self.weight), slice1(&self.bias)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

/// Row-wise layer normalization over the embedding axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub offset: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(d),
            offset: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(d),
            offset: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: ArrayView2<T>, eps: T) -> (Array2<T>, NormCache<T>) {
        let d = T::lit(x.ncols() as f64);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *s = T::one() / (var + eps).sqrt();
            let scale = *s;
            row.mapv_inplace(|v| v * scale);
        }
        let y = &normalized * &self.gain + &self.offset;
        (y, NormCache { normalized, inv_std })
    }

    pub(crate) fn backward(&self, cache: &NormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.offset += &dy.sum_axis(Axis(0));
        let d = T::lit(dy.ncols() as f64);
        let dxhat = &dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = cache.normalized.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            let s = cache.inv_std[r];
            for c in 0..dy.ncols() {
                dx[[r, c]] = s * (g[c] - mean_g - xh[c] * mean_gx);
            }
        }
        dx
    }

    pub(crate) fn tensors(&self) -> [&[T]; 2] {
        [slice1(&self.gain), slice1(&self.offset)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [slice1_mut(&mut self.gain), slice1_mut(&mut self.offset)]
    }
}

/// Softmax of each row, shifted by the row maximum.
pub(crate) fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Reverse pass of a row softmax given its output `p` and upstream gradient `dp`.
pub(crate) fn softmax_rows_backward<T: Scalar>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = Array2::zeros(p.raw_dim());
    for r in 0..p.nrows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let inner = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for c in 0..p.ncols() {
            ds[[r, c]] = pr[c] * (dr[c] - inner);
        }
    }
    ds
}

pub(crate) fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub(crate) fn relu_backward<T: Scalar>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    dx
}

pub(crate) fn head_cols(h: usize, head_dim: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * head_dim..(h + 1) * head_dim]
}

pub(crate) fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("contiguous")
}

pub(crate) fn slice1_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("contiguous")
}

pub(crate) fn all_finite<T: Scalar>(a: ArrayView2<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}
