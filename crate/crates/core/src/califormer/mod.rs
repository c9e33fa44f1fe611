//! Calibration network: per-class node embeddings refined by a small encoder whose
//! self-attention is biased by the injected prior, producing calibration vectors that
//! shift the classification head's class centers.
//!
//! Shapes follow the column convention: node embeddings and calibration vectors are
//! `d x K` with one column per class. Internally the encoder works on the transposed
//! `K x d` token matrix. No positional encoding is used, so the map is equivariant
//! under class permutations.

mod attention;
mod cache;
mod checkpoint;
mod layers;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{biased_attention, AttentionOutput, AttentionParams, BiasPlacement};
pub use cache::{cache_calibration, CalibrationCache};
pub use checkpoint::Checkpoint;
pub use layers::{LayerNorm, Linear};

use attention::AttentionCache;
use layers::{all_finite, gaussian, relu, relu_backward, slice, slice1, slice1_mut, slice_mut, NormCache};

use crate::edge::DeltaEdge;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Order of normalization and residual connections inside an encoder layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// norm -> attention -> residual -> norm -> feed-forward -> residual
    #[default]
    PreNorm,
    /// attention -> residual -> norm -> feed-forward -> residual -> norm
    PostNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormerConfig {
    pub d: usize,
    pub head_count: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
    pub norm_order: NormOrder,
    pub bias_placement: BiasPlacement,
    pub norm_eps: f64,
}

impl Default for FormerConfig {
    fn default() -> Self {
        FormerConfig {
            d: 256,
            head_count: 8,
            layers: 3,
            ff_mult: 4,
            norm_order: NormOrder::PreNorm,
            bias_placement: BiasPlacement::AfterScale,
            norm_eps: 1e-5,
        }
    }
}

impl FormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.head_count == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.d.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "embedding dimension {} is not divisible by {} heads",
                self.d, self.head_count
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class embeddings, `d x K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbeddings<T> {
    pub values: Array2<T>,
}

impl<T: Scalar> NodeEmbeddings<T> {
    /// Zero-mean Gaussian initialization with standard deviation 0.01.
    pub fn init<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Self {
        NodeEmbeddings {
            values: gaussian(rng, (d, k), 0.01),
        }
    }

    pub fn zeros(d: usize, k: usize) -> Self {
        NodeEmbeddings {
            values: Array2::zeros((d, k)),
        }
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T> {
    pub attention: AttentionParams<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub norm1: LayerNorm<T>,
    pub norm2: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn init<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        EncoderLayer {
            attention: AttentionParams {
                query: Linear::init(d, d, rng),
                key: Linear::init(d, d, rng),
                value: Linear::init(d, d, rng),
                output: Linear::init(d, d, rng),
            },
            ff_in: Linear::init(d, ff, rng),
            ff_out: Linear::init(ff, d, rng),
            norm1: LayerNorm::identity(d),
            norm2: LayerNorm::identity(d),
        }
    }

    fn zeros(d: usize, ff: usize) -> Self {
        EncoderLayer {
            attention: AttentionParams {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
            },
            ff_in: Linear::zeros(d, ff),
            ff_out: Linear::zeros(ff, d),
            norm1: LayerNorm::zeros(d),
            norm2: LayerNorm::zeros(d),
        }
    }

    fn tensors(&self) -> Vec<&[T]> {
        let a = &self.attention;
        let mut v = Vec::with_capacity(16);
        for lin in [&a.query, &a.key, &a.value, &a.output, &self.ff_in, &self.ff_out] {
            v.extend(lin.tensors());
        }
        v.extend(self.norm1.tensors());
        v.extend(self.norm2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let a = &mut self.attention;
        let mut v = Vec::with_capacity(16);
        for lin in [
            &mut a.query,
            &mut a.key,
            &mut a.value,
            &mut a.output,
            &mut self.ff_in,
            &mut self.ff_out,
        ] {
            v.extend(lin.tensors_mut());
        }
        v.extend(self.norm1.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v
    }
}

/// Encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaliFormerParams<T> {
    pub config: FormerConfig,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Scalar> CaliFormerParams<T> {
    pub fn init<R: Rng + ?Sized>(config: FormerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ff = config.d * config.ff_mult;
        let layers = (0..config.layers).map(|_| EncoderLayer::init(config.d, ff, rng)).collect();
        Ok(CaliFormerParams { config, layers })
    }

    /// All-zero weights for `config`.
    pub fn zeros(config: FormerConfig) -> Self {
        let ff = config.d * config.ff_mult;
        let layers = (0..config.layers).map(|_| EncoderLayer::zeros(config.d, ff)).collect();
        CaliFormerParams { config, layers }
    }

    /// Same shapes, all entries zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let ff = self.config.d * self.config.ff_mult;
        CaliFormerParams {
            config: self.config.clone(),
            layers: (0..self.layers.len()).map(|_| EncoderLayer::zeros(self.config.d, ff)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    /// Checks that every stored array has the shape the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                self.config.layers
            )));
        }
        let reference = self.zeros_like();
        for (idx, (a, b)) in self.layers.iter().zip(&reference.layers).enumerate() {
            let shapes = |l: &EncoderLayer<T>| {
                let at = &l.attention;
                vec![
                    at.query.weight.dim(),
                    at.key.weight.dim(),
                    at.value.weight.dim(),
                    at.output.weight.dim(),
                    l.ff_in.weight.dim(),
                    l.ff_out.weight.dim(),
                    (at.query.bias.len(), at.key.bias.len()),
                    (at.value.bias.len(), at.output.bias.len()),
                    (l.ff_in.bias.len(), l.ff_out.bias.len()),
                    (l.norm1.gain.len(), l.norm1.offset.len()),
                    (l.norm2.gain.len(), l.norm2.offset.len()),
                ]
            };
            if shapes(a) != shapes(b) {
                return Err(Error::ShapeMismatch(format!("encoder layer {idx} has inconsistent shapes")));
            }
            if a.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("encoder layer {idx} parameters")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    input: Array2<T>,
    norm1: NormCache<T>,
    attention: AttentionCache<T>,
    norm2: NormCache<T>,
    ff_input: Array2<T>,
    ff_pre: Array2<T>,
    ff_hidden: Array2<T>,
}

/// Intermediate activations of one encoder pass, needed by the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    layers: Vec<LayerTrace<T>>,
    /// `d x K` calibration vectors.
    pub output: Array2<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn forward(&self, x: ArrayView2<T>, bias: &Array2<T>, cfg: &FormerConfig) -> (Array2<T>, LayerTrace<T>) {
        let eps = T::lit(cfg.norm_eps);
        match cfg.norm_order {
            NormOrder::PreNorm => {
                let (a, norm1) = self.norm1.forward(x, eps);
                let (att, attention) = self.attention.forward(a.view(), bias, cfg.head_count, cfg.bias_placement);
                let mid = &x + &att;
                let (c, norm2) = self.norm2.forward(mid.view(), eps);
                let ff_pre = self.ff_in.forward(c.view());
                let ff_hidden = relu(&ff_pre);
                let out = &mid + &self.ff_out.forward(ff_hidden.view());
                let trace = LayerTrace {
                    input: x.to_owned(),
                    norm1,
                    attention,
                    norm2,
                    ff_input: c,
                    ff_pre,
                    ff_hidden,
                };
                (out, trace)
            }
            NormOrder::PostNorm => {
                let (att, attention) = self.attention.forward(x, bias, cfg.head_count, cfg.bias_placement);
                let (mid, norm1) = self.norm1.forward((&x + &att).view(), eps);
                let ff_pre = self.ff_in.forward(mid.view());
                let ff_hidden = relu(&ff_pre);
                let pre_out = &mid + &self.ff_out.forward(ff_hidden.view());
                let (out, norm2) = self.norm2.forward(pre_out.view(), eps);
                let trace = LayerTrace {
                    input: x.to_owned(),
                    norm1,
                    attention,
                    ff_input: mid,
                    norm2,
                    ff_pre,
                    ff_hidden,
                };
                (out, trace)
            }
        }
    }

    fn backward(&self, t: &LayerTrace<T>, dout: Array2<T>, cfg: &FormerConfig, grad: &mut EncoderLayer<T>) -> Array2<T> {
        match cfg.norm_order {
            NormOrder::PreNorm => {
                let dhidden = self.ff_out.backward(t.ff_hidden.view(), dout.view(), &mut grad.ff_out);
                let dpre = relu_backward(&t.ff_pre, &dhidden);
                let dc = self.ff_in.backward(t.ff_input.view(), dpre.view(), &mut grad.ff_in);
                let dmid = dout + &self.norm2.backward(&t.norm2, dc.view(), &mut grad.norm2);
                let da = self.attention.backward(&t.attention, dmid.view(), &mut grad.attention);
                dmid + &self.norm1.backward(&t.norm1, da.view(), &mut grad.norm1)
            }
            NormOrder::PostNorm => {
                let dpre_out = self.norm2.backward(&t.norm2, dout.view(), &mut grad.norm2);
                let dhidden = self.ff_out.backward(t.ff_hidden.view(), dpre_out.view(), &mut grad.ff_out);
                let dpre = relu_backward(&t.ff_pre, &dhidden);
                let dmid = &dpre_out + &self.ff_in.backward(t.ff_input.view(), dpre.view(), &mut grad.ff_in);
                let dsum = self.norm1.backward(&t.norm1, dmid.view(), &mut grad.norm1);
                let dx_att = self.attention.backward(&t.attention, dsum.view(), &mut grad.attention);
                dsum + &dx_att
            }
        }
    }
}

fn check_encoder_inputs<T: Scalar>(params: &CaliFormerParams<T>, v: &NodeEmbeddings<T>, bias: &DeltaEdge<T>) -> Result<()> {
    if v.d() != params.d() {
        return Err(Error::ShapeMismatch(format!(
            "node embeddings have dimension {}, encoder expects {}",
            v.d(),
            params.d()
        )));
    }
    if v.k() != bias.k() {
        return Err(Error::ShapeMismatch(format!(
            "{} node embeddings but a {}-class prior",
            v.k(),
            bias.k()
        )));
    }
    if !all_finite(v.values.view()) {
        return Err(Error::NonFinite("node embeddings".into()));
    }
    Ok(())
}

/// Runs the encoder and keeps every activation for a later reverse pass.
pub fn encoder_forward_traced<T: Scalar>(
    params: &CaliFormerParams<T>,
    v: &NodeEmbeddings<T>,
    bias: &DeltaEdge<T>,
) -> Result<EncoderTrace<T>> {
    check_encoder_inputs(params, v, bias)?;
    let b = bias.attention_bias();
    let mut x = v.values.t().as_standard_layout().into_owned();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (idx, layer) in params.layers.iter().enumerate() {
        let (next, trace) = layer.forward(x.view(), &b, &params.config);
        if !all_finite(next.view()) {
            return Err(Error::NonFinite(format!("encoder layer {idx} activations")));
        }
        layers.push(trace);
        x = next;
    }
    Ok(EncoderTrace {
        layers,
        output: x.t().as_standard_layout().into_owned(),
    })
}

/// Calibration vectors `V' = g(V, delta)`, shape `d x K`.
pub fn encoder_forward<T: Scalar>(params: &CaliFormerParams<T>, v: &NodeEmbeddings<T>, bias: &DeltaEdge<T>) -> Result<Array2<T>> {
    Ok(encoder_forward_traced(params, v, bias)?.output)
}

/// Reverse pass through the encoder. The prior is a constant input and receives no
/// gradient. Returns gradients for the encoder weights and the node embeddings.
pub fn encoder_backward<T: Scalar>(
    params: &CaliFormerParams<T>,
    trace: &EncoderTrace<T>,
    d_output: ArrayView2<T>,
) -> Result<(CaliFormerParams<T>, NodeEmbeddings<T>)> {
    if trace.layers.len() != params.layers.len() || d_output.dim() != trace.output.dim() {
        return Err(Error::ShapeMismatch("trace does not belong to these encoder weights".into()));
    }
    let mut grad = params.zeros_like();
    let mut dx = d_output.t().as_standard_layout().into_owned();
    for ((layer, t), g) in params.layers.iter().zip(&trace.layers).zip(grad.layers.iter_mut()).rev() {
        debug_assert_eq!(t.input.dim(), dx.dim());
        dx = layer.backward(t, dx, &params.config, g);
    }
    Ok((
        grad,
        NodeEmbeddings {
            values: dx.t().as_standard_layout().into_owned(),
        },
    ))
}

/// Classification head whose class centers are shifted by scaled calibration vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedHead<T> {
    /// `d x K`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub rho: T,
}

impl<T: Scalar> CalibratedHead<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, k: usize, rho: f64, rng: &mut R) -> Self {
        CalibratedHead {
            weight: gaussian(rng, (d, k), (1.0 / d as f64).sqrt()),
            bias: Array1::zeros(k),
            rho: T::lit(rho),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CalibratedHead {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            rho: T::zero(),
        }
    }

    pub fn d(&self) -> usize {
        self.weight.nrows()
    }

    pub fn k(&self) -> usize {
        self.weight.ncols()
    }

    /// Trainable tensors; `rho` is a fixed constant.
    pub fn tensors(&self) -> Vec<&[T]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }

    fn check(&self, v_prime: ArrayView2<T>, d_feature: usize) -> Result<()> {
        if v_prime.dim() != self.weight.dim() || self.bias.len() != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "head weight {:?} vs calibration vectors {:?}",
                self.weight.dim(),
                v_prime.dim()
            )));
        }
        if d_feature != self.d() {
            return Err(Error::ShapeMismatch(format!(
                "feature length {d_feature}, head expects {}",
                self.d()
            )));
        }
        if self.rho < T::zero() || !self.rho.is_finite() {
            return Err(Error::Config("rho must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `(W + rho V')^T h + b` for a single feature vector.
pub fn calibrate_logits<T: Scalar>(head: &CalibratedHead<T>, v_prime: ArrayView2<T>, h: ArrayView1<T>) -> Result<Array1<T>> {
    head.check(v_prime, h.len())?;
    let centers = &head.weight + &(&v_prime * head.rho);
    Ok(centers.t().dot(&h) + &head.bias)
}

/// Batched form: `features` is `n x d`, result is `n x K`.
pub fn calibrate_logits_batch<T: Scalar>(head: &CalibratedHead<T>, v_prime: ArrayView2<T>, features: ArrayView2<T>) -> Result<Array2<T>> {
    head.check(v_prime, features.ncols())?;
    let centers = &head.weight + &(&v_prime * head.rho);
    Ok(features.dot(&centers) + &head.bias)
}

/// Embeddings, encoder and head trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaliDet<T> {
    pub nodes: NodeEmbeddings<T>,
    pub former: CaliFormerParams<T>,
    pub head: CalibratedHead<T>,
}

/// Gradients of a scalar loss with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub nodes: NodeEmbeddings<T>,
    pub former: CaliFormerParams<T>,
    pub head: CalibratedHead<T>,
}

/// Result of a forward pass over one prior and a batch of features.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub encoder: EncoderTrace<T>,
    pub features: Array2<T>,
    /// `n x K`
    pub logits: Array2<T>,
}

impl<T: Scalar> CaliDet<T> {
    pub fn init<R: Rng + ?Sized>(k: usize, config: FormerConfig, rho: f64, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDimension("class count must be at least 1".into()));
        }
        let d = config.d;
        let nodes = NodeEmbeddings::init(d, k, rng);
        let former = CaliFormerParams::init(config, rng)?;
        let head = CalibratedHead::init(d, k, rho, rng);
        Ok(CaliDet { nodes, former, head })
    }

    pub fn k(&self) -> usize {
        self.nodes.k()
    }

    pub fn d(&self) -> usize {
        self.nodes.d()
    }

    pub fn calibration(&self, bias: &DeltaEdge<T>) -> Result<Array2<T>> {
        encoder_forward(&self.former, &self.nodes, bias)
    }

    pub fn forward(&self, bias: &DeltaEdge<T>, features: ArrayView2<T>) -> Result<ForwardPass<T>> {
        let encoder = encoder_forward_traced(&self.former, &self.nodes, bias)?;
        let logits = calibrate_logits_batch(&self.head, encoder.output.view(), features)?;
        Ok(ForwardPass {
            encoder,
            features: features.to_owned(),
            logits,
        })
    }

    /// Gradients given `dL/dlogits` for the batch of a completed forward pass.
    pub fn backward(&self, pass: &ForwardPass<T>, d_logits: ArrayView2<T>) -> Result<ModelGrads<T>> {
        if d_logits.dim() != pass.logits.dim() {
            return Err(Error::ShapeMismatch(format!(
                "logit adjoint {:?} vs logits {:?}",
                d_logits.dim(),
                pass.logits.dim()
            )));
        }
        let mut head = self.head.zeros_like();
        head.weight = pass.features.t().dot(&d_logits);
        head.bias = d_logits.sum_axis(Axis(0));
        let d_vprime = &head.weight * self.head.rho;
        let (former, nodes) = encoder_backward(&self.former, &pass.encoder, d_vprime.view())?;
        Ok(ModelGrads { nodes, former, head })
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            nodes: NodeEmbeddings::zeros(self.d(), self.k()),
            former: self.former.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Trainable tensors in a fixed order: nodes, encoder, head.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![slice(&self.nodes.values)];
        v.extend(self.former.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![slice_mut(&mut self.nodes.values)];
        v.extend(self.former.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn assign(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }
}

impl<T: Scalar> ModelGrads<T> {
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![slice(&self.nodes.values)];
        v.extend(self.former.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![slice_mut(&mut self.nodes.values)];
        v.extend(self.former.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().concat()
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &ModelGrads<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
