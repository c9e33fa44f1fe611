//! Conditional-probability edge matrices over object classes.
//!
//! Entry `(i, j)` of an [`EdgeMatrix`] is `P(i | j)`: the probability that class `i`
//! is present in an image given that class `j` is present. Column `j` therefore holds
//! everything known about the companions of class `j`. The matrix is not symmetric.
//!
//! Statistics over any collection of label sets (one image, a mini-batch, a whole
//! split) are produced by [`edge_from_label_sets`]. Classes that never occur keep the
//! flat-prior value `0.5` in their column.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Set of class indices present in one sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(BTreeSet<usize>);

impl LabelSet {
    pub fn new(k: usize, classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = classes.into_iter().collect();
        if let Some(&index) = set.iter().find(|&&c| c >= k) {
            return Err(Error::ClassOutOfRange { index, k });
        }
        Ok(LabelSet(set))
    }

    pub fn empty() -> Self {
        LabelSet::default()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.0.iter().next_back().copied()
    }

    pub(crate) fn insert(&mut self, class: usize) {
        self.0.insert(class);
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        LabelSet(iter.into_iter().collect())
    }
}

/// `K x K` matrix of conditional probabilities `P(i | j)` with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix<T> {
    k: usize,
    class_ids: Vec<u64>,
    values: Vec<T>,
}

/// Difference `E - E0` from the flat prior; the attention bias form of a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEdge<T> {
    k: usize,
    class_ids: Vec<u64>,
    values: Vec<T>,
}

/// On-disk layout shared by edge and delta files.
#[derive(Debug, Serialize, Deserialize)]
struct MatrixFile<T> {
    k: usize,
    class_ids: Vec<u64>,
    values: Vec<Vec<T>>,
}

fn default_ids(k: usize) -> Vec<u64> {
    (0..k as u64).collect()
}

fn check_ids(k: usize, class_ids: &[u64]) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidDimension("class count must be at least 1".into()));
    }
    if class_ids.len() != k {
        return Err(Error::ShapeMismatch(format!("{} class ids for {} classes", class_ids.len(), k)));
    }
    if class_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidEdge("class ids must be strictly increasing".into()));
    }
    Ok(())
}

fn rows_of<T: Copy>(k: usize, values: &[T]) -> Vec<Vec<T>> {
    values.chunks(k).map(|r| r.to_vec()).collect()
}

fn flatten_rows<T: Copy>(k: usize, rows: Vec<Vec<T>>) -> Result<Vec<T>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::ShapeMismatch(format!("values must be {k} x {k}")));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl<T: Scalar> EdgeMatrix<T> {
    /// Builds a matrix from row-major values, validating every invariant.
    pub fn from_values(class_ids: Vec<u64>, values: Vec<T>) -> Result<Self> {
        let k = class_ids.len();
        check_ids(k, &class_ids)?;
        if values.len() != k * k {
            return Err(Error::ShapeMismatch(format!("{} values for a {k} x {k} matrix", values.len())));
        }
        for i in 0..k {
            for j in 0..k {
                let v = values[i * k + j];
                if !v.is_finite() || v < T::zero() || v > T::one() {
                    return Err(Error::InvalidEdge(format!("entry ({i},{j}) = {v} outside [0, 1]")));
                }
                if i == j && v != T::one() {
                    return Err(Error::InvalidEdge(format!("diagonal entry {i} = {v}, expected 1")));
                }
            }
        }
        Ok(EdgeMatrix { k, class_ids, values })
    }

    /// Clips arbitrary finite values into `[0, 1]` and resets the diagonal to 1.
    ///
    /// Non-finite values are rejected rather than clipped.
    pub fn clipped(class_ids: Vec<u64>, mut values: Vec<T>) -> Result<Self> {
        let k = class_ids.len();
        check_ids(k, &class_ids)?;
        if values.len() != k * k {
            return Err(Error::ShapeMismatch(format!("{} values for a {k} x {k} matrix", values.len())));
        }
        for (idx, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("edge entry {idx}")));
            }
            *v = if idx / k == idx % k {
                T::one()
            } else {
                v.max(T::zero()).min(T::one())
            };
        }
        Ok(EdgeMatrix { k, class_ids, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    /// Row-major values.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `P(i | j)`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.k + j]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.k).map(|i| self.get(i, j)).collect()
    }

    pub fn to_array(&self) -> Array2<T> {
        Array2::from_shape_vec((self.k, self.k), self.values.clone()).expect("edge values are k x k")
    }

    /// Same entries under another scalar type.
    pub fn cast<U: Scalar>(&self) -> EdgeMatrix<U> {
        EdgeMatrix {
            k: self.k,
            class_ids: self.class_ids.clone(),
            values: self.values.iter().map(|v| U::lit(v.widen())).collect(),
        }
    }

    /// Same matrix with external ids replaced (length must match).
    pub fn with_class_ids(mut self, class_ids: Vec<u64>) -> Result<Self> {
        check_ids(self.k, &class_ids)?;
        self.class_ids = class_ids;
        Ok(self)
    }

    pub fn same_layout(&self, other: &EdgeMatrix<T>) -> Result<()> {
        if self.k != other.k {
            return Err(Error::ShapeMismatch(format!(
                "edge matrices have {} and {} classes",
                self.k, other.k
            )));
        }
        if self.class_ids != other.class_ids {
            return Err(Error::ShapeMismatch("edge matrices use different class ids".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MatrixFile {
            k: self.k,
            class_ids: self.class_ids.clone(),
            values: rows_of(self.k, &self.values),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MatrixFile<T> = serde_json::from_str(text)?;
        if file.k != file.class_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "k = {} but {} class ids",
                file.k,
                file.class_ids.len()
            )));
        }
        let values = flatten_rows(file.k, file.values)?;
        EdgeMatrix::from_values(file.class_ids, values)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        EdgeMatrix::from_json(&read_file(path.as_ref())?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &(self.to_json()? + "\n"))
    }

    /// Header row of class ids followed by `K` rows of values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.class_ids.iter().map(|c| c.to_string()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in self.values.chunks(self.k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", v.widen())).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

impl<T: Scalar> Serialize for EdgeMatrix<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixFile {
            k: self.k,
            class_ids: self.class_ids.clone(),
            values: rows_of(self.k, &self.values),
        }
        .serialize(serializer)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for EdgeMatrix<T> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = MatrixFile::<T>::deserialize(deserializer)?;
        if file.k != file.class_ids.len() {
            return Err(serde::de::Error::custom(format!(
                "k = {} but {} class ids",
                file.k,
                file.class_ids.len()
            )));
        }
        flatten_rows(file.k, file.values)
            .and_then(|values| EdgeMatrix::from_values(file.class_ids, values))
            .map_err(serde::de::Error::custom)
    }
}

impl<T: Scalar> DeltaEdge<T> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.k + j]
    }

    /// Zero difference: the flat prior's delta.
    pub fn zeros(k: usize) -> Result<Self> {
        check_ids(k, &default_ids(k))?;
        Ok(DeltaEdge {
            k,
            class_ids: default_ids(k),
            values: vec![T::zero(); k * k],
        })
    }

    /// Builds a delta from row-major values; entries must lie in `[-0.5, 0.5]`
    /// with a zero diagonal.
    pub fn from_values(class_ids: Vec<u64>, values: Vec<T>) -> Result<Self> {
        let k = class_ids.len();
        check_ids(k, &class_ids)?;
        if values.len() != k * k {
            return Err(Error::ShapeMismatch(format!("{} values for a {k} x {k} matrix", values.len())));
        }
        for (idx, &v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > T::HALF {
                return Err(Error::InvalidEdge(format!("delta entry {idx} = {v} outside [-0.5, 0.5]")));
            }
            if idx / k == idx % k && v != T::zero() {
                return Err(Error::InvalidEdge(format!("delta diagonal entry {} = {v}", idx / k)));
            }
        }
        Ok(DeltaEdge { k, class_ids, values })
    }

    /// Transposed bias as laid out for attention logits: entry `(q, key)` is `delta(key, q)`.
    pub fn attention_bias(&self) -> Array2<T> {
        Array2::from_shape_fn((self.k, self.k), |(q, key)| self.get(key, q))
    }

    pub fn to_array(&self) -> Array2<T> {
        Array2::from_shape_vec((self.k, self.k), self.values.clone()).expect("delta values are k x k")
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MatrixFile {
            k: self.k,
            class_ids: self.class_ids.clone(),
            values: rows_of(self.k, &self.values),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MatrixFile<T> = serde_json::from_str(text)?;
        if file.k != file.class_ids.len() {
            return Err(Error::ShapeMismatch("k disagrees with class ids".into()));
        }
        let values = flatten_rows(file.k, file.values)?;
        DeltaEdge::from_values(file.class_ids, values)
    }

    /// Permutes class positions: new index `p` holds old class `perm[p]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k;
        let values = (0..k * k).map(|idx| self.get(perm[idx / k], perm[idx % k])).collect();
        DeltaEdge {
            k,
            class_ids: default_ids(k),
            values,
        }
    }
}

/// The no-knowledge prior: unit diagonal, `0.5` elsewhere.
pub fn flat_prior<T: Scalar>(k: usize) -> Result<EdgeMatrix<T>> {
    flat_prior_with_ids(default_ids(k))
}

pub fn flat_prior_with_ids<T: Scalar>(class_ids: Vec<u64>) -> Result<EdgeMatrix<T>> {
    let k = class_ids.len();
    check_ids(k, &class_ids)?;
    let values = (0..k * k).map(|idx| if idx / k == idx % k { T::one() } else { T::HALF }).collect();
    Ok(EdgeMatrix { k, class_ids, values })
}

/// Raw co-occurrence counts: `pair[i * k + j]` samples contain both `i` and `j`,
/// and `single[j]` samples contain `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub k: usize,
    pub pair: Vec<u64>,
    pub single: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn new(k: usize) -> Self {
        CooccurrenceCounts {
            k,
            pair: vec![0; k * k],
            single: vec![0; k],
        }
    }

    pub fn add(&mut self, labels: &LabelSet) -> Result<()> {
        if let Some(max) = labels.max_index() {
            if max >= self.k {
                return Err(Error::ClassOutOfRange { index: max, k: self.k });
            }
        }
        for j in labels.iter() {
            self.single[j] += 1;
            for i in labels.iter() {
                self.pair[i * self.k + j] += 1;
            }
        }
        Ok(())
    }

    /// `count(i, j) / count(j)`, flat `0.5` for unseen `j`, unit diagonal.
    pub fn to_edge<T: Scalar>(&self, class_ids: Vec<u64>) -> Result<EdgeMatrix<T>> {
        let k = self.k;
        check_ids(k, &class_ids)?;
        let mut values = vec![T::HALF; k * k];
        for i in 0..k {
            for j in 0..k {
                let v = if i == j {
                    T::one()
                } else if self.single[j] > 0 {
                    T::lit(self.pair[i * k + j] as f64 / self.single[j] as f64)
                } else {
                    T::HALF
                };
                values[i * k + j] = v;
            }
        }
        Ok(EdgeMatrix { k, class_ids, values })
    }
}

/// Conditional-probability statistics of a collection of label sets.
///
/// One sample gives the single-image edge, a mini-batch gives the batch edge, the whole
/// training split gives the training edge.
pub fn edge_from_label_sets<'a, T: Scalar>(k: usize, samples: impl IntoIterator<Item = &'a LabelSet>) -> Result<EdgeMatrix<T>> {
    edge_from_label_sets_with_ids(default_ids(k), samples)
}

pub fn edge_from_label_sets_with_ids<'a, T: Scalar>(
    class_ids: Vec<u64>,
    samples: impl IntoIterator<Item = &'a LabelSet>,
) -> Result<EdgeMatrix<T>> {
    let k = class_ids.len();
    if k == 0 {
        return Err(Error::InvalidDimension("class count must be at least 1".into()));
    }
    let mut counts = CooccurrenceCounts::new(k);
    for labels in samples {
        counts.add(labels)?;
    }
    counts.to_edge(class_ids)
}

/// Misleading counterpart of a prior: off-diagonal `v -> 1 - v`, diagonal kept.
pub fn flip_edge<T: Scalar>(e: &EdgeMatrix<T>) -> EdgeMatrix<T> {
    let k = e.k;
    let values = e
        .values
        .iter()
        .enumerate()
        .map(|(idx, &v)| if idx / k == idx % k { v } else { T::one() - v })
        .collect();
    EdgeMatrix {
        k,
        class_ids: e.class_ids.clone(),
        values,
    }
}

/// `E - E0`.
pub fn delta<T: Scalar>(e: &EdgeMatrix<T>) -> DeltaEdge<T> {
    let k = e.k;
    let values = e
        .values
        .iter()
        .enumerate()
        .map(|(idx, &v)| if idx / k == idx % k { T::zero() } else { v - T::HALF })
        .collect();
    DeltaEdge {
        k,
        class_ids: e.class_ids.clone(),
        values,
    }
}

/// `sign(E - E0)` entry, with `sign(0) = 0`.
#[inline]
pub fn sign_vs_flat<T: Scalar>(e: &EdgeMatrix<T>, i: usize, j: usize) -> T {
    if i == j {
        return T::zero();
    }
    let d = e.get(i, j) - T::HALF;
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference between two priors, with a percentile summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistance {
    pub mae: f64,
    /// `(percentile, value)` pairs for the 0/50/90/97/100-th percentiles of `|a - b|`.
    pub percentiles: Vec<(f64, f64)>,
}

pub const MAE_PERCENTILES: [f64; 5] = [0.0, 50.0, 90.0, 97.0, 100.0];

/// Linear-interpolated percentile of an ascending slice.
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn edge_mae<T: Scalar>(a: &EdgeMatrix<T>, b: &EdgeMatrix<T>) -> Result<EdgeDistance> {
    a.same_layout(b)?;
    let mut diffs: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x.widen() - y.widen()).abs())
        .collect();
    let mae = diffs.iter().sum::<f64>() / diffs.len() as f64;
    diffs.sort_by(f64::total_cmp);
    let percentiles = MAE_PERCENTILES.iter().map(|&p| (p, percentile_sorted(&diffs, p))).collect();
    Ok(EdgeDistance { mae, percentiles })
}

impl EdgeDistance {
    pub fn summary(&self) -> String {
        let mut s = format!("MAE {:.6}", self.mae);
        for (p, v) in &self.percentiles {
            let _ = write!(s, "  p{p}={v:.6}");
        }
        s
    }
}
