//! Synthetic detection world: a mixture of latent scenes generating co-occurring labels
//! with boxes, and an analytic detector whose confidences respond to an injected prior.
//!
//! The detector shifts each class logit by `lambda * m_j`, where `m_j` is the alignment
//! between the injected prior and the image's own single-sample edge in column `j`:
//! `m_j = (1/K) sum_i sign(E_x - E0)(i, j) * (injected - E0)(i, j)`.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectionSet, Detector};
use crate::edge::{edge_from_label_sets, EdgeMatrix, LabelSet};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, GtBox, ImageRecord};
use crate::seed::{image_seed, substream};

/// Side of the square canvas every synthetic image lives on.
pub const CANVAS: f64 = 1000.0;

/// Images used to measure a world's reference edge.
pub const REFERENCE_IMAGES: usize = 10_000;

/// Detector response parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Response {
    pub base_logit_present: f64,
    pub base_logit_absent: f64,
    pub lambda: f64,
    /// Standard deviation of the Gaussian logit noise.
    pub noise_std: f64,
    /// Expected IoU between a jittered box and its ground truth, before clipping to
    /// the canvas. 1 disables jitter.
    pub target_iou: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
}

impl Default for Response {
    fn default() -> Self {
        Response {
            base_logit_present: 0.5,
            base_logit_absent: -1.0,
            lambda: 4.0,
            noise_std: 1.0,
            target_iou: 0.85,
            fp_rate: 2.0,
        }
    }
}

impl Response {
    fn validate(&self) -> Result<()> {
        let finite = [
            self.base_logit_present,
            self.base_logit_absent,
            self.lambda,
            self.noise_std,
            self.target_iou,
            self.fp_rate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.lambda < 0.0 || self.noise_std < 0.0 || self.fp_rate < 0.0 {
            return Err(Error::Config(
                "response parameters must be finite; lambda, noise and fp rate non-negative".into(),
            ));
        }
        if !(self.target_iou > MIN_TARGET_IOU && self.target_iou <= 1.0) {
            return Err(Error::Config(format!("target IoU must lie in ({MIN_TARGET_IOU}, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub k: usize,
    /// `J` rows of per-class presence probabilities.
    pub scenes: Vec<Vec<f64>>,
    pub scene_weights: Vec<f64>,
    pub response: Response,
    pub seed: u64,
    /// Edge measured over [`REFERENCE_IMAGES`] generated images.
    pub reference: EdgeMatrix<f64>,
    /// Jitter range solved from the target IoU.
    #[serde(skip)]
    jitter: f64,
}

impl WorldSpec {
    /// Validates the scene model and measures its reference edge.
    pub fn new(scenes: Vec<Vec<f64>>, scene_weights: Vec<f64>, response: Response, seed: u64) -> Result<Self> {
        let k = scenes.first().map_or(0, Vec::len);
        if k == 0 || scenes.is_empty() {
            return Err(Error::InvalidDimension("a world needs at least one scene and one class".into()));
        }
        if scenes.iter().any(|s| s.len() != k) || scene_weights.len() != scenes.len() {
            return Err(Error::ShapeMismatch("scene rows and weights disagree".into()));
        }
        if scenes.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("scene probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = scene_weights.iter().sum();
        if scene_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("scene weights must be non-negative and sum to 1".into()));
        }
        response.validate()?;
        let mut world = WorldSpec {
            k,
            scenes,
            scene_weights,
            response,
            seed,
            reference: crate::edge::flat_prior(k)?,
            jitter: 0.0,
        };
        world.jitter = jitter_for_iou(world.response.target_iou);
        let images = gen_images(&world, REFERENCE_IMAGES, substream(seed, "reference"));
        world.reference = edge_from_label_sets(k, images.iter().map(|i| &i.labels))?;
        Ok(world)
    }

    /// Same world with a different scene mixture; the reference edge is re-measured.
    pub fn with_scene_weights(&self, weights: Vec<f64>) -> Result<Self> {
        WorldSpec::new(self.scenes.clone(), weights, self.response.clone(), self.seed)
    }

    pub fn with_response(&self, response: Response) -> Result<Self> {
        response.validate()?;
        Ok(WorldSpec {
            jitter: jitter_for_iou(response.target_iou),
            response,
            ..self.clone()
        })
    }

    pub fn j(&self) -> usize {
        self.scenes.len()
    }

    /// Relative shift and log-scale range used to jitter detected boxes.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut w: WorldSpec = serde_json::from_str(&text)?;
        w.check()?;
        w.jitter = jitter_for_iou(w.response.target_iou);
        Ok(w)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check(&self) -> Result<()> {
        if self.scenes.first().map_or(0, Vec::len) != self.k || self.reference.k() != self.k {
            return Err(Error::ShapeMismatch("world k disagrees with its scenes or reference".into()));
        }
        if self.scenes.iter().any(|s| s.len() != self.k) || self.scenes.len() != self.scene_weights.len() {
            return Err(Error::ShapeMismatch("scene rows and weights disagree".into()));
        }
        let total: f64 = self.scene_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.scene_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("scene weights must be non-negative and sum to 1".into()));
        }
        if self.scenes.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("scene probabilities must lie in [0, 1]".into()));
        }
        self.response.validate()
    }

    pub fn dataset_classes(&self) -> (Vec<u64>, Vec<String>) {
        ((0..self.k as u64).collect(), (0..self.k).map(|c| format!("class{c}")).collect())
    }
}

/// Seeded world of `k` classes spread over `j` scenes.
///
/// Each class has a home scene where it is very likely (0.85 to 0.98) and is rare
/// elsewhere (below 0.04). Classes sharing a home scene nearly always co-occur; classes
/// with different home scenes are nearly exclusive.
pub fn gen_world(k: usize, j: usize, seed: u64) -> Result<WorldSpec> {
    if k == 0 || j == 0 {
        return Err(Error::InvalidDimension("k and j must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "world"));
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut home = vec![0; k];
    for (slot, &class) in order.iter().enumerate() {
        home[class] = slot % j;
    }
    let scenes = (0..j)
        .map(|s| {
            (0..k)
                .map(|c| {
                    if home[c] == s {
                        rng.random_range(0.85..0.98)
                    } else {
                        rng.random_range(0.0..0.04)
                    }
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    WorldSpec::new(scenes, weights, Response::default(), seed)
}

/// One generated image with its latent scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: u64,
    pub scene: usize,
    pub labels: LabelSet,
    pub boxes: Vec<GtBox>,
}

impl SyntheticImage {
    pub fn record(&self) -> ImageRecord {
        ImageRecord::new(self.image_id, CANVAS, CANVAS, self.boxes.clone())
    }
}

fn random_box<R: Rng>(rng: &mut R) -> [f64; 4] {
    let w = rng.random_range(20.0..400.0);
    let h = rng.random_range(20.0..400.0);
    [rng.random_range(0.0..CANVAS - w), rng.random_range(0.0..CANVAS - h), w, h]
}

fn gen_image(world: &WorldSpec, image_id: u64, seed: u64, scene_pick: &WeightedIndex<f64>) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id));
    let scene = scene_pick.sample(&mut rng);
    let mut boxes = Vec::new();
    for (class, &p) in world.scenes[scene].iter().enumerate() {
        if rng.random::<f64>() < p {
            boxes.push(GtBox {
                class,
                bbox: random_box(&mut rng),
            });
        }
    }
    SyntheticImage {
        image_id,
        scene,
        labels: boxes.iter().map(|b| b.class).collect(),
        boxes,
    }
}

/// Images `1..=n`, each drawn from its own seed so generation is order independent.
pub fn gen_images(world: &WorldSpec, n: usize, seed: u64) -> Vec<SyntheticImage> {
    let pick = WeightedIndex::new(&world.scene_weights).expect("validated weights");
    (1..=n as u64).into_par_iter().map(|id| gen_image(world, id, seed, &pick)).collect()
}

pub fn gen_dataset(world: &WorldSpec, n: usize, seed: u64) -> Result<Dataset> {
    let (ids, names) = world.dataset_classes();
    Dataset::new(ids, names, gen_images(world, n, seed).iter().map(SyntheticImage::record).collect())
}

/// Alignment of the injected prior with each column of the image's single-sample edge.
pub fn alignment(labels: &LabelSet, injected: &EdgeMatrix<f64>) -> Vec<f64> {
    let k = injected.k();
    (0..k)
        .map(|j| {
            if !labels.contains(j) {
                return 0.0;
            }
            let sum: f64 = (0..k)
                .filter(|&i| i != j)
                .map(|i| {
                    let sign = if labels.contains(i) { 1.0 } else { -1.0 };
                    sign * (injected.get(i, j) - 0.5)
                })
                .sum();
            sum / k as f64
        })
        .collect()
}

/// Lowest accepted target IoU; the jitter search range does not reach below it.
pub const MIN_TARGET_IOU: f64 = 0.3;

const JITTER_SAMPLES: usize = 4096;

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Mean IoU of a unit box against its jittered copy under range `a`, over a fixed set of
/// draws so the estimate is deterministic and monotone in `a`.
fn mean_jitter_iou(a: f64, draws: &[[f64; 4]]) -> f64 {
    let total: f64 = draws
        .iter()
        .map(|[ux, uy, usx, usy]| {
            let (w, h) = ((usx * a).exp(), (usy * a).exp());
            let (cx, cy) = (0.5 + ux * a, 0.5 + uy * a);
            let inter = interval_overlap(0.0, 1.0, cx - w / 2.0, cx + w / 2.0) * interval_overlap(0.0, 1.0, cy - h / 2.0, cy + h / 2.0);
            inter / (1.0 + w * h - inter)
        })
        .sum();
    total / draws.len() as f64
}

/// Jitter range whose expected IoU matches `target`, by bisection.
pub fn jitter_for_iou(target: f64) -> f64 {
    if target >= 1.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<[f64; 4]> = (0..JITTER_SAMPLES)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
        .collect();
    let (mut lo, mut hi) = (0.0, 2.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_jitter_iou(mid, &draws) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn jitter_box<R: Rng>(rng: &mut R, b: [f64; 4], a: f64, width: f64, height: f64) -> [f64; 4] {
    if a == 0.0 {
        return b;
    }
    let [x, y, w, h] = b;
    let (dx, dy) = (rng.random_range(-a..=a) * w, rng.random_range(-a..=a) * h);
    let (sw, sh) = (rng.random_range(-a..=a).exp(), rng.random_range(-a..=a).exp());
    let (nw, nh) = (w * sw, h * sh);
    let cx = x + w / 2.0 + dx;
    let cy = y + h / 2.0 + dy;
    let x0 = (cx - nw / 2.0).clamp(0.0, width);
    let y0 = (cy - nh / 2.0).clamp(0.0, height);
    let x1 = (cx + nw / 2.0).clamp(0.0, width);
    let y1 = (cy + nh / 2.0).clamp(0.0, height);
    [x0, y0, x1 - x0, y1 - y0]
}

/// Simulated detections of one image under an injected prior.
///
/// Random draws depend only on `(seed, image_id)`, never on the prior, so two priors
/// evaluated with the same seed see identical noise.
pub fn sim_detect(world: &WorldSpec, image: &ImageRecord, injected: &EdgeMatrix<f64>, seed: u64) -> Result<DetectionSet> {
    let k = world.k;
    if injected.k() != k {
        return Err(Error::ShapeMismatch(format!(
            "prior has k = {} but the world has {k}",
            injected.k()
        )));
    }
    let r = &world.response;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image.image_id));
    let noise = Normal::new(0.0, r.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let m = alignment(&image.labels, injected);
    let mut detections = Vec::with_capacity(image.boxes.len());
    for gt in &image.boxes {
        let eps = noise.sample(&mut rng);
        let bbox = jitter_box(&mut rng, gt.bbox, world.jitter, image.width, image.height);
        let logit = r.base_logit_present + r.lambda * m[gt.class] + eps;
        detections.push(Detection {
            class: gt.class,
            score: sigmoid(logit),
            bbox,
        });
    }
    let false_positives = if r.fp_rate > 0.0 {
        Poisson::new(r.fp_rate).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..false_positives {
        let class = rng.random_range(0..k);
        let w = rng.random_range(20.0..400.0_f64).min(image.width);
        let h = rng.random_range(20.0..400.0_f64).min(image.height);
        let bbox = [
            rng.random_range(0.0..=image.width - w),
            rng.random_range(0.0..=image.height - h),
            w,
            h,
        ];
        let logit = r.base_logit_absent + r.lambda * m[class] + noise.sample(&mut rng);
        detections.push(Detection {
            class,
            score: sigmoid(logit),
            bbox,
        });
    }
    Ok(DetectionSet {
        image_id: image.image_id,
        detections,
    })
}

/// The simulator behind the [`Detector`] interface.
#[derive(Debug, Clone)]
pub struct SimDetector {
    pub world: WorldSpec,
    pub seed: u64,
}

impl SimDetector {
    pub fn new(world: WorldSpec, seed: u64) -> Self {
        SimDetector { world, seed }
    }
}

impl Detector for SimDetector {
    fn k(&self) -> usize {
        self.world.k
    }

    fn detect(&self, image: &ImageRecord, prior: &EdgeMatrix<f64>) -> Result<DetectionSet> {
        sim_detect(&self.world, image, prior, self.seed)
    }
}
