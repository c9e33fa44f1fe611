//! Logit manipulation loss, the training-time prior sampler and a toy training loop.
//!
//! The loss multiplies each class logit `s_j` by the negated alignment between the
//! injected prior `E` and the sample's own statistics `E_x`:
//! `L_j = s_j * (1/K) sum_i [-sign(E_x - E0)(i, j) * (E - E0)(i, j)]`, total
//! `gamma * sum_j L_j / K`. Misleading priors push present-class logits down, accurate
//! ones push them up.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::califormer::{CaliDet, FormerConfig};
use crate::detector::{Detection, DetectionSet};
use crate::edge::{delta, edge_from_label_sets, flat_prior, flip_edge, sign_vs_flat, EdgeMatrix, LabelSet};
use crate::error::{Error, Result};
use crate::eval::{average_precision, EvalConfig, PriorKind};
use crate::ingest::Dataset;
use crate::scalar::Scalar;
use crate::seed::{stream, substream, Stream};
use crate::simworld::{gen_images, gen_world, SyntheticImage, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LomaConfig {
    pub gamma: f64,
}

impl Default for LomaConfig {
    fn default() -> Self {
        LomaConfig { gamma: 20.0 }
    }
}

fn check_layout<T: Scalar>(k: usize, e: &EdgeMatrix<T>, e_x: &EdgeMatrix<T>) -> Result<()> {
    if e.k() != k || e_x.k() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} logits, prior of {} classes, sample edge of {}",
            e.k(),
            e_x.k()
        )));
    }
    Ok(())
}

/// Per-class alignment `(1/K) sum_i sign(E_x - E0)(i, j) * (E - E0)(i, j)`.
pub fn alignment<T: Scalar>(e: &EdgeMatrix<T>, e_x: &EdgeMatrix<T>) -> Result<Vec<T>> {
    check_layout(e.k(), e, e_x)?;
    let k = e.k();
    let kk = T::lit(k as f64);
    Ok((0..k)
        .map(|j| (0..k).map(|i| sign_vs_flat(e_x, i, j) * (e.get(i, j) - T::HALF)).sum::<T>() / kk)
        .collect())
}

/// Gradient of [`loma_loss`] with respect to the logits. The loss is linear in them.
pub fn loma_grad<T: Scalar>(e: &EdgeMatrix<T>, e_x: &EdgeMatrix<T>, gamma: T) -> Result<Vec<T>> {
    let kk = T::lit(e.k() as f64);
    Ok(alignment(e, e_x)?.into_iter().map(|m| -gamma * m / kk).collect())
}

pub fn loma_loss<T: Scalar>(s: &[T], e: &EdgeMatrix<T>, e_x: &EdgeMatrix<T>, gamma: T) -> Result<T> {
    check_layout(s.len(), e, e_x)?;
    Ok(loma_grad(e, e_x, gamma)?.iter().zip(s).map(|(&g, &v)| g * v).sum())
}

/// Which statistics the sampler may draw from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceSet {
    pub sample: bool,
    pub batch: bool,
    pub train: bool,
}

impl Default for SourceSet {
    fn default() -> Self {
        SourceSet {
            sample: true,
            batch: true,
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeSamplerConfig {
    pub sigma: f64,
    pub sources: SourceSet,
}

impl Default for EdgeSamplerConfig {
    fn default() -> Self {
        EdgeSamplerConfig {
            sigma: 0.16,
            sources: SourceSet::default(),
        }
    }
}

impl EdgeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config("sampler sigma must be finite and non-negative".into()));
        }
        let s = &self.sources;
        if !(s.sample || s.batch || s.train) {
            return Err(Error::Config("enable at least one sampler source".into()));
        }
        Ok(())
    }
}

/// Picks one enabled source uniformly, adds Gaussian noise to every entry, clips to
/// `[0, 1]` and resets the diagonal.
pub fn sample_edge<T: Scalar, R: Rng + ?Sized>(
    e_x: &EdgeMatrix<T>,
    e_b: &EdgeMatrix<T>,
    e_t: &EdgeMatrix<T>,
    cfg: &EdgeSamplerConfig,
    rng: &mut R,
) -> Result<EdgeMatrix<T>> {
    cfg.validate()?;
    e_x.same_layout(e_b)?;
    e_x.same_layout(e_t)?;
    let s = &cfg.sources;
    let pool: Vec<&EdgeMatrix<T>> = [(s.sample, e_x), (s.batch, e_b), (s.train, e_t)]
        .into_iter()
        .filter_map(|(on, e)| on.then_some(e))
        .collect();
    let chosen = pool[rng.random_range(0..pool.len())];
    let mut values = chosen.values().to_vec();
    if cfg.sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut values {
            *v += T::lit(noise.sample(rng));
        }
    }
    EdgeMatrix::clipped(chosen.class_ids().to_vec(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// How toy features are synthesized from an image's latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Amplitude of the per-class presence evidence.
    pub label_signal: f64,
    /// Noise on the per-class evidence before projection.
    pub label_noise: f64,
    /// Noise added after projection.
    pub feature_noise: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            label_signal: 0.5,
            label_noise: 1.0,
            feature_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub k: usize,
    pub scenes: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loma: LomaConfig,
    pub sampler: EdgeSamplerConfig,
    pub rho: f64,
    pub optimizer: Optimizer,
    pub train_images: usize,
    pub test_images: usize,
    pub features: FeatureConfig,
    /// Rescales each mini-batch gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            k: 10,
            scenes: 4,
            d: 16,
            heads: 2,
            layers: 3,
            epochs: 20,
            learning_rate: 3e-4,
            batch_size: 32,
            seed: 1,
            loma: LomaConfig::default(),
            sampler: EdgeSamplerConfig::default(),
            rho: 0.2,
            optimizer: Optimizer::default(),
            train_images: 2000,
            test_images: 500,
            features: FeatureConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl ToyTrainConfig {
    /// The ablation: no logit manipulation loss and only the training prior, noise free.
    pub fn ablation(&self) -> Self {
        ToyTrainConfig {
            loma: LomaConfig { gamma: 0.0 },
            sampler: EdgeSamplerConfig {
                sigma: 0.0,
                sources: SourceSet {
                    sample: false,
                    batch: false,
                    train: true,
                },
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.scenes == 0 || self.epochs == 0 || self.batch_size == 0 || self.train_images == 0 || self.test_images == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.d < 2 {
            return Err(Error::Config("toy features need d >= 2".into()));
        }
        let rates = [
            self.learning_rate,
            self.rho,
            self.loma.gamma,
            self.features.label_signal,
            self.features.label_noise,
            self.features.feature_noise,
        ];
        if rates.iter().any(|v| !v.is_finite()) || self.learning_rate <= 0.0 || self.loma.gamma < 0.0 {
            return Err(Error::Config(
                "rates must be finite, learning rate positive, gamma non-negative".into(),
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("gradient clip must be finite and positive".into()));
        }
        self.sampler.validate()?;
        self.former().validate()
    }

    pub fn former(&self) -> FormerConfig {
        FormerConfig {
            d: self.d,
            head_count: self.heads,
            layers: self.layers,
            ..FormerConfig::default()
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generated world, fixed feature map and train/test images of one toy run.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub world: WorldSpec,
    pub train: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
    /// `n x d` features; the last coordinate is a constant 1.
    pub train_features: Array2<f64>,
    pub test_features: Array2<f64>,
    /// Training statistics.
    pub e_t: EdgeMatrix<f64>,
}

fn features(images: &[SyntheticImage], projection: &Array2<f64>, j: usize, k: usize, cfg: &FeatureConfig, seed: u64) -> Array2<f64> {
    let d = projection.nrows() + 1;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Array2::zeros((images.len(), d));
    for (row, im) in images.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::image_seed(seed, im.image_id));
        let mut latent = Array1::zeros(j + k);
        latent[im.scene] = 1.0;
        for c in 0..k {
            let sign = if im.labels.contains(c) { 1.0 } else { -1.0 };
            latent[j + c] = sign * cfg.label_signal + cfg.label_noise * noise.sample(&mut rng);
        }
        let mut h = projection.dot(&latent);
        h.mapv_inplace(|v| v + cfg.feature_noise * noise.sample(&mut rng));
        out.slice_mut(ndarray::s![row, ..d - 1]).assign(&h);
        out[[row, d - 1]] = 1.0;
    }
    out
}

impl ToyData {
    pub fn generate(cfg: &ToyTrainConfig) -> Result<Self> {
        let world = gen_world(cfg.k, cfg.scenes, stream(cfg.seed, Stream::World))?;
        let data_seed = substream(cfg.seed, "data");
        let train = gen_images(&world, cfg.train_images, substream(data_seed, "train"));
        let test = gen_images(&world, cfg.test_images, substream(data_seed, "test"));
        let j = cfg.scenes;
        let mut rng = ChaCha8Rng::seed_from_u64(substream(data_seed, "projection"));
        let scale = Normal::new(0.0, (1.0 / (j + cfg.k) as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let projection = Array2::from_shape_simple_fn((cfg.d - 1, j + cfg.k), || scale.sample(&mut rng));
        let noise_seed = stream(cfg.seed, Stream::Noise);
        let train_features = features(&train, &projection, j, cfg.k, &cfg.features, substream(noise_seed, "train"));
        let test_features = features(&test, &projection, j, cfg.k, &cfg.features, substream(noise_seed, "test"));
        let e_t = edge_from_label_sets(cfg.k, train.iter().map(|i| &i.labels))?;
        Ok(ToyData {
            world,
            train,
            test,
            train_features,
            test_features,
            e_t,
        })
    }

    fn test_dataset(&self) -> Result<Dataset> {
        let (ids, names) = self.world.dataset_classes();
        Dataset::new(ids, names, self.test.iter().map(SyntheticImage::record).collect())
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub classification_loss: f64,
    pub loma_loss: f64,
    pub total_loss: f64,
    /// Test mAP keyed by prior code.
    pub map: BTreeMap<String, f64>,
}

/// The priors the toy run is scored under.
pub const TOY_PRIORS: [PriorKind; 4] = [PriorKind::FlippedSample, PriorKind::Flat, PriorKind::Train, PriorKind::Sample];

/// Outcome of the ordering check `flipped < flat < train <= sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub holds: bool,
    pub flipped_margin: f64,
    pub sample_margin: f64,
}

/// Required gap, in mAP points, between the flat prior and each of the flipped and
/// sample priors.
pub const ORDERING_MARGIN: f64 = 1.0;

pub fn ordering_check(map: &BTreeMap<String, f64>) -> Result<OrderingCheck> {
    let get = |k: PriorKind| {
        map.get(k.code())
            .copied()
            .ok_or_else(|| Error::Config(format!("metrics lack prior {}", k.code())))
    };
    let (bar, flat, train, sample) = (
        get(PriorKind::FlippedSample)?,
        get(PriorKind::Flat)?,
        get(PriorKind::Train)?,
        get(PriorKind::Sample)?,
    );
    let flipped_margin = flat - bar;
    let sample_margin = sample - flat;
    Ok(OrderingCheck {
        holds: flipped_margin >= ORDERING_MARGIN && flat < train && train <= sample && sample_margin >= ORDERING_MARGIN,
        flipped_margin,
        sample_margin,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence { step, what },
        other => other,
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(model: &mut CaliDet<f64>, grad: &[f64], cfg: &ToyTrainConfig, adam: &mut AdamState) -> Result<()> {
    let mut params = model.flatten();
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= cfg.learning_rate * g;
            }
        }
        Optimizer::Adam => {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
            adam.t += 1;
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for (n, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                adam.m[n] = b1 * adam.m[n] + (1.0 - b1) * g;
                adam.v[n] = b2 * adam.v[n] + (1.0 - b2) * g * g;
                *p -= cfg.learning_rate * (adam.m[n] / c1) / ((adam.v[n] / c2).sqrt() + eps);
            }
        }
    }
    model.assign(&params)
}

fn bce(logit: f64, target: f64) -> (f64, f64) {
    // log(1 + exp(s)) - y s, computed stably.
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let p = 1.0 / (1.0 + (-logit).exp());
    (loss, p - target)
}

/// Scores that keep ranking information for very large logits.
fn squash(logit: f64) -> f64 {
    0.5 + logit.atan() / std::f64::consts::PI
}

/// Test-set mAP of the model under each requested prior.
pub fn evaluate(model: &CaliDet<f64>, data: &ToyData, priors: &[PriorKind]) -> Result<BTreeMap<String, f64>> {
    let dataset = data.test_dataset()?;
    let k = model.k();
    let flat = flat_prior::<f64>(k)?;
    let global = |e: &EdgeMatrix<f64>| -> Result<Array2<f64>> { model.calibration(&delta(e)) };
    let cfg = EvalConfig::default();
    let mut out = BTreeMap::new();
    for &kind in priors {
        let shared = match kind {
            PriorKind::Flat => Some(global(&flat)?),
            PriorKind::Train => Some(global(&data.e_t)?),
            PriorKind::Validation => Some(global(&edge_from_label_sets(k, data.test.iter().map(|i| &i.labels))?)?),
            PriorKind::Sample | PriorKind::FlippedSample => None,
            PriorKind::Batch => return Err(Error::Config("toy evaluation does not support the batch prior".into())),
        };
        let mut preds = Vec::with_capacity(data.test.len());
        for (row, im) in data.test.iter().enumerate() {
            let v = match &shared {
                Some(v) => v.clone(),
                None => {
                    let own = edge_from_label_sets(k, [&im.labels])?;
                    let e = if kind == PriorKind::Sample { own } else { flip_edge(&own) };
                    global(&e)?
                }
            };
            let logits = crate::califormer::calibrate_logits(&model.head, v.view(), data.test_features.row(row))?;
            preds.push(toy_detections(im, &logits));
        }
        let m = average_precision(&dataset, &preds, &cfg)?;
        out.insert(kind.code().to_string(), m.ap);
    }
    Ok(out)
}

/// One detection per class: the ground-truth box when present, a dummy box otherwise.
fn toy_detections(im: &SyntheticImage, logits: &Array1<f64>) -> DetectionSet {
    let detections = (0..logits.len())
        .map(|c| Detection {
            class: c,
            score: squash(logits[c]),
            bbox: im.boxes.iter().find(|b| b.class == c).map_or([0.0, 0.0, 1.0, 1.0], |b| b.bbox),
        })
        .collect();
    DetectionSet {
        image_id: im.image_id,
        detections,
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub model: CaliDet<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub data: ToyData,
}

/// Trains the calibration model on the toy task; `sink` receives each epoch's metrics.
///
/// Every image in a mini-batch draws its own prior from the sampler, since the sample
/// statistics differ per image.
pub fn train_toy(cfg: &ToyTrainConfig, mut sink: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<ToyOutcome> {
    cfg.validate()?;
    let data = ToyData::generate(cfg)?;
    let k = cfg.k;
    let mut init_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "init"));
    let mut model = CaliDet::<f64>::init(k, cfg.former(), cfg.rho, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, Stream::Sampler));
    let mut adam = AdamState {
        m: vec![0.0; model.parameter_count()],
        v: vec![0.0; model.parameter_count()],
        t: 0,
    };
    let gamma = cfg.loma.gamma;
    let sample_edges: Vec<EdgeMatrix<f64>> = data
        .train
        .iter()
        .map(|im| edge_from_label_sets(k, [&im.labels]))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cls_total, mut loma_total) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<&LabelSet> = batch.iter().map(|&n| &data.train[n].labels).collect();
            let e_b = edge_from_label_sets(k, labels.iter().copied())?;
            let mut grads = model.zero_grads();
            let (mut cls_batch, mut loma_batch) = (0.0, 0.0);
            for &n in batch {
                let e_x = &sample_edges[n];
                let e = sample_edge(e_x, &e_b, &data.e_t, &cfg.sampler, &mut rng)?;
                let h = data.train_features.slice(ndarray::s![n..n + 1, ..]);
                let pass = model.forward(&delta(&e), h).map_err(|e| diverged(step, e))?;
                let logits = pass.logits.row(0);
                let lg = loma_grad(&e, e_x, gamma)?;
                let mut dl = Array2::zeros((1, k));
                for c in 0..k {
                    let y = if data.train[n].labels.contains(c) { 1.0 } else { 0.0 };
                    let (l, g) = bce(logits[c], y);
                    cls_batch += l;
                    loma_batch += lg[c] * logits[c];
                    dl[[0, c]] = g + lg[c];
                }
                grads.accumulate(&model.backward(&pass, dl.view())?);
            }
            let size = batch.len() as f64;
            let loss = (cls_batch + loma_batch) / size;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("loss {loss}"),
                });
            }
            grads.scale(1.0 / size);
            if let Some(limit) = cfg.grad_clip {
                let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            apply_update(&mut model, &grads.flatten(), cfg, &mut adam)?;
            cls_total += cls_batch;
            loma_total += loma_batch;
            step += 1;
        }
        let n = data.train.len() as f64;
        let record = EpochMetrics {
            epoch,
            classification_loss: cls_total / n,
            loma_loss: loma_total / n,
            total_loss: (cls_total + loma_total) / n,
            map: evaluate(&model, &data, &TOY_PRIORS)?,
        };
        log::info!("epoch {epoch}: loss {:.4} map {:?}", record.total_loss, record.map);
        sink(&record)?;
        metrics.push(record);
    }
    Ok(ToyOutcome { model, metrics, data })
}

/// Writes metrics as JSON lines.
pub fn write_metrics(out: &mut impl Write, m: &EpochMetrics) -> Result<()> {
    let line = serde_json::to_string(m)?;
    writeln!(out, "{line}").map_err(|e| Error::io("metrics", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_edge_of(k: usize, classes: &[usize]) -> EdgeMatrix<f64> {
        edge_from_label_sets(k, [&LabelSet::new(k, classes.iter().copied()).unwrap()]).unwrap()
    }

    #[test]
    fn loma_hand_examples() {
        let e_x = sample_edge_of(3, &[0, 2]);
        let s = [2.0, -1.0, 3.0];
        let m = alignment(&e_x, &e_x).unwrap();
        assert_eq!(m, vec![1.0 / 3.0, 0.0, 1.0 / 3.0]);
        assert!((loma_loss(&s, &e_x, &e_x, 1.0).unwrap() + 5.0 / 9.0).abs() < 1e-15);
        assert!((loma_loss(&s, &flip_edge(&e_x), &e_x, 1.0).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert_eq!(loma_loss(&s, &flat_prior(3).unwrap(), &e_x, 1.0).unwrap(), 0.0);
        assert!(loma_loss(&s[..2], &e_x, &e_x, 1.0).is_err());
    }

    #[test]
    fn loma_is_linear_in_logits() {
        let e_x = sample_edge_of(4, &[1, 2]);
        let e = sample_edge_of(4, &[1, 3]);
        let g = loma_grad(&e, &e_x, 2.0).unwrap();
        let s = [0.3, -1.2, 2.0, 0.7];
        let direct: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        assert!((loma_loss(&s, &e, &e_x, 2.0).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn sampler_without_noise_returns_the_source() {
        let (e_x, e_b) = (sample_edge_of(3, &[0, 1]), sample_edge_of(3, &[2]));
        let e_t = EdgeMatrix::from_values(vec![0, 1, 2], vec![1.0, 0.3, 0.6, 0.2, 1.0, 0.9, 0.4, 0.7, 1.0]).unwrap();
        let cfg = EdgeSamplerConfig {
            sigma: 0.0,
            sources: SourceSet {
                sample: false,
                batch: false,
                train: true,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_edge(&e_x, &e_b, &e_t, &cfg, &mut rng).unwrap(), e_t);
    }

    #[test]
    fn sampler_is_replayable_and_valid() {
        let (e_x, e_b, e_t) = (sample_edge_of(3, &[0, 1]), sample_edge_of(3, &[2]), flat_prior(3).unwrap());
        let cfg = EdgeSamplerConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_edge(&e_x, &e_b, &e_t, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        for e in &a {
            assert!(e.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((0..3).all(|i| e.get(i, i) == 1.0));
        }
        let none = EdgeSamplerConfig {
            sources: SourceSet {
                sample: false,
                batch: false,
                train: false,
            },
            ..cfg
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn ordering_check_margins() {
        let map = |v: [f64; 4]| -> BTreeMap<String, f64> { ["ebar", "e0", "et", "ex"].iter().map(|s| s.to_string()).zip(v).collect() };
        assert!(ordering_check(&map([50.0, 52.0, 53.0, 54.0])).unwrap().holds);
        assert!(!ordering_check(&map([51.5, 52.0, 53.0, 54.0])).unwrap().holds);
        assert!(!ordering_check(&map([50.0, 52.0, 53.0, 52.5])).unwrap().holds);
        assert!(!ordering_check(&map([50.0, 52.0, 51.0, 54.0])).unwrap().holds);
        let mut partial = map([50.0, 52.0, 53.0, 54.0]);
        partial.remove("et");
        assert!(ordering_check(&partial).is_err());
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let cfg = ToyTrainConfig {
            k: 4,
            scenes: 2,
            d: 8,
            epochs: 2,
            train_images: 64,
            test_images: 32,
            ..ToyTrainConfig::default()
        };
        let mut seen = 0;
        let a = train_toy(&cfg, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 2);
        let b = train_toy(&cfg, |_| Ok(())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model.flatten(), b.model.flatten());
        let mut out = Vec::new();
        write_metrics(&mut out, &a.metrics[0]).unwrap();
        let back: EpochMetrics = serde_json::from_slice(&out).unwrap();
        assert_eq!(back, a.metrics[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = ToyTrainConfig {
            k: 4,
            scenes: 2,
            d: 8,
            epochs: 3,
            train_images: 64,
            test_images: 16,
            learning_rate: 1e200,
            grad_clip: None,
            optimizer: Optimizer::Sgd,
            ..ToyTrainConfig::default()
        };
        assert!(matches!(train_toy(&cfg, |_| Ok(())), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ToyTrainConfig::default().validate().is_ok());
        assert!(ToyTrainConfig {
            k: 0,
            ..ToyTrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(ToyTrainConfig {
            learning_rate: f64::NAN,
            ..ToyTrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(ToyTrainConfig {
            grad_clip: Some(0.0),
            ..ToyTrainConfig::default()
        }
        .validate()
        .is_err());
        let abl = ToyTrainConfig::default().ablation();
        assert_eq!(abl.loma.gamma, 0.0);
        assert_eq!(abl.sampler.sigma, 0.0);
    }
}
