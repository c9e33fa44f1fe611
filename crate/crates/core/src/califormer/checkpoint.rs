//! Parameter checkpoints: one JSON document with a shape header per array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BiasPlacement, CaliDet, CaliFormerParams, CalibratedHead, FormerConfig, NodeEmbeddings, NormOrder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "calidet-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub d: usize,
    pub k: usize,
    pub head_count: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub norm_order: NormOrder,
    pub bias_placement: BiasPlacement,
    pub norm_eps: f64,
    pub rho: f64,
    pub tensors: Vec<TensorRecord>,
}

fn tensor_names(layers: usize) -> Vec<String> {
    let mut names = vec!["nodes".to_string()];
    for l in 0..layers {
        for lin in ["query", "key", "value", "output"] {
            names.push(format!("layer{l}.attention.{lin}.weight"));
            names.push(format!("layer{l}.attention.{lin}.bias"));
        }
        for lin in ["ff_in", "ff_out"] {
            names.push(format!("layer{l}.{lin}.weight"));
            names.push(format!("layer{l}.{lin}.bias"));
        }
        for norm in ["norm1", "norm2"] {
            names.push(format!("layer{l}.{norm}.gain"));
            names.push(format!("layer{l}.{norm}.offset"));
        }
    }
    names.push("head.weight".into());
    names.push("head.bias".into());
    names
}

fn shapes<T: Scalar>(model: &CaliDet<T>) -> Vec<Vec<usize>> {
    let mut out = vec![model.nodes.values.shape().to_vec()];
    for layer in &model.former.layers {
        let a = &layer.attention;
        for lin in [&a.query, &a.key, &a.value, &a.output, &layer.ff_in, &layer.ff_out] {
            out.push(lin.weight.shape().to_vec());
            out.push(lin.bias.shape().to_vec());
        }
        for norm in [&layer.norm1, &layer.norm2] {
            out.push(norm.gain.shape().to_vec());
            out.push(norm.offset.shape().to_vec());
        }
    }
    out.push(model.head.weight.shape().to_vec());
    out.push(model.head.bias.shape().to_vec());
    out
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &CaliDet<T>) -> Self {
        let cfg = &model.former.config;
        let names = tensor_names(cfg.layers);
        let tensors = names
            .into_iter()
            .zip(shapes(model))
            .zip(model.tensors())
            .map(|((name, shape), data)| TensorRecord {
                name,
                shape,
                data: data.iter().map(|v| v.widen()).collect(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            d: cfg.d,
            k: model.k(),
            head_count: cfg.head_count,
            layers: cfg.layers,
            ff_mult: cfg.ff_mult,
            norm_order: cfg.norm_order,
            bias_placement: cfg.bias_placement,
            norm_eps: cfg.norm_eps,
            rho: model.head.rho.widen(),
            tensors,
        }
    }

    /// Rebuilds a model, rejecting any tensor whose name or shape disagrees with the header.
    pub fn to_model<T: Scalar>(&self) -> Result<CaliDet<T>> {
        if self.format != FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", self.format)));
        }
        let config = FormerConfig {
            d: self.d,
            head_count: self.head_count,
            layers: self.layers,
            ff_mult: self.ff_mult,
            norm_order: self.norm_order,
            bias_placement: self.bias_placement,
            norm_eps: self.norm_eps,
        };
        config.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidDimension("checkpoint has zero classes".into()));
        }
        let former = CaliFormerParams::zeros(config);
        let mut model = CaliDet {
            nodes: NodeEmbeddings::zeros(self.d, self.k),
            former,
            head: CalibratedHead {
                weight: ndarray::Array2::zeros((self.d, self.k)),
                bias: ndarray::Array1::zeros(self.k),
                rho: T::lit(self.rho),
            },
        };
        let expected_names = tensor_names(self.layers);
        let expected_shapes = shapes(&model);
        if self.tensors.len() != expected_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint stores {} tensors, expected {}",
                self.tensors.len(),
                expected_names.len()
            )));
        }
        for ((rec, name), shape) in self.tensors.iter().zip(&expected_names).zip(&expected_shapes) {
            if &rec.name != name || &rec.shape != shape || rec.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} with shape {:?} where {} {:?} was expected",
                    rec.name, rec.shape, name, shape
                )));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", rec.name)));
            }
        }
        for (slot, rec) in model.tensors_mut().into_iter().zip(&self.tensors) {
            for (dst, &src) in slot.iter_mut().zip(&rec.data) {
                *dst = T::lit(src);
            }
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config("rho must be finite and non-negative".into()));
        }
        Ok(model)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
