//! COCO-style average precision, prior sweeps and subset evaluation.
//!
//! Results are reported on a 0 to 100 scale.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionSet, Detector};
use crate::edge::{edge_from_label_sets_with_ids, edge_mae, flat_prior_with_ids, flip_edge, EdgeMatrix};
use crate::error::{Error, Result};
use crate::ingest::{dataset_edge, split_subsets, Dataset, ImageRecord};

/// Intersection over union of two `[x, y, w, h]` boxes; 0 when the union is empty.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Area breakpoints for small, medium and large objects.
pub const AREA_SMALL: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Detections scoring below this are dropped before matching.
    pub score_threshold: f64,
    /// Per image and class cap on detections, highest scores first.
    pub max_detections: Option<usize>,
    /// Also report small/medium/large AP.
    pub area_ranges: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            score_threshold: 0.0,
            max_detections: None,
            area_ranges: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing in (0, 1]".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("need at least two recall points".into()));
        }
        if self.max_detections == Some(0) {
            return Err(Error::Config("max detections must be positive".into()));
        }
        Ok(())
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|v| (v - t).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_small: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_large: Option<f64>,
    /// AP at each configured IoU threshold.
    pub per_threshold: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Det {
    score: f64,
    image: usize,
    order: usize,
    bbox: [f64; 4],
}

struct ClassData {
    dets: Vec<Det>,
    gts: HashMap<usize, Vec<[f64; 4]>>,
}

fn area(b: &[f64; 4]) -> f64 {
    b[2] * b[3]
}

fn collect_classes(gts: &Dataset, preds: &[DetectionSet], cfg: &EvalConfig) -> Vec<ClassData> {
    let k = gts.k();
    let index: HashMap<u64, usize> = gts.images.iter().enumerate().map(|(n, im)| (im.image_id, n)).collect();
    let mut classes: Vec<ClassData> = (0..k)
        .map(|_| ClassData {
            dets: Vec::new(),
            gts: HashMap::new(),
        })
        .collect();
    for (n, im) in gts.images.iter().enumerate() {
        for b in &im.boxes {
            classes[b.class].gts.entry(n).or_default().push(b.bbox);
        }
    }
    for set in preds {
        let Some(&image) = index.get(&set.image_id) else {
            log::warn!("predictions for unknown image {} ignored", set.image_id);
            continue;
        };
        let mut per_class: HashMap<usize, Vec<Det>> = HashMap::new();
        for (order, d) in set.detections.iter().enumerate() {
            if d.class < k && d.score >= cfg.score_threshold {
                per_class.entry(d.class).or_default().push(Det {
                    score: d.score,
                    image,
                    order,
                    bbox: d.bbox,
                });
            }
        }
        for (class, mut dets) in per_class {
            if let Some(cap) = cfg.max_detections {
                dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order.cmp(&b.order)));
                dets.truncate(cap);
            }
            classes[class].dets.extend(dets);
        }
    }
    let ids: Vec<u64> = gts.images.iter().map(|im| im.image_id).collect();
    for c in &mut classes {
        c.dets.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(ids[a.image].cmp(&ids[b.image]))
                .then(a.order.cmp(&b.order))
        });
    }
    classes
}

/// AP of one class at one IoU threshold, or `None` when no ground truth counts.
fn class_ap(data: &ClassData, threshold: f64, range: Option<(f64, f64)>, points: usize) -> Option<f64> {
    let inside = |b: &[f64; 4]| range.is_none_or(|(lo, hi)| area(b) >= lo && area(b) < hi);
    let npos: usize = data.gts.values().flatten().filter(|b| inside(b)).count();
    if npos == 0 {
        return None;
    }
    let mut matched: HashMap<usize, Vec<bool>> = data.gts.iter().map(|(&m, g)| (m, vec![false; g.len()])).collect();
    let mut flags = Vec::with_capacity(data.dets.len());
    for d in &data.dets {
        // (ignored, iou, gt index): prefer counted ground truth, then higher IoU, then lower index.
        let mut best: Option<(bool, f64, usize)> = None;
        if let Some(boxes) = data.gts.get(&d.image) {
            let used = &matched[&d.image];
            for (g, gb) in boxes.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&d.bbox, gb);
                if v < threshold {
                    continue;
                }
                let ignored = !inside(gb);
                let better = match best {
                    None => true,
                    Some((bi, bv, _)) => (bi && !ignored) || (bi == ignored && v > bv),
                };
                if better {
                    best = Some((ignored, v, g));
                }
            }
        }
        match best {
            Some((ignored, _, g)) => {
                matched.get_mut(&d.image).expect("image with gts")[g] = true;
                if !ignored {
                    flags.push(true);
                }
            }
            None => {
                if inside(&d.bbox) {
                    flags.push(false);
                }
            }
        }
    }
    Some(interpolated_ap(&flags, npos, points))
}

/// Area under the interpolated precision envelope, sampled at evenly spaced recalls.
fn interpolated_ap(flags: &[bool], npos: usize, points: usize) -> f64 {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for p in 0..points {
        let r = p as f64 / (points - 1) as f64;
        let at = recall.partition_point(|&v| v < r);
        if at < precision.len() {
            total += precision[at];
        }
    }
    total / points as f64
}

fn mean_over_classes(classes: &[ClassData], threshold: f64, range: Option<(f64, f64)>, points: usize) -> Option<f64> {
    let aps: Vec<f64> = classes.iter().filter_map(|c| class_ap(c, threshold, range, points)).collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

fn mean_over_thresholds(classes: &[ClassData], cfg: &EvalConfig, range: Option<(f64, f64)>) -> (Option<f64>, Vec<f64>) {
    let per: Vec<Option<f64>> = cfg
        .iou_thresholds
        .par_iter()
        .map(|&t| mean_over_classes(classes, t, range, cfg.recall_points))
        .collect();
    if per.iter().any(Option::is_none) {
        return (None, vec![0.0; per.len()]);
    }
    let per: Vec<f64> = per.into_iter().map(|v| v.expect("checked") * 100.0).collect();
    (Some(per.iter().sum::<f64>() / per.len() as f64), per)
}

/// COCO-style AP of `preds` against the boxes of `gts`.
///
/// A dataset without any ground-truth box scores 0.
pub fn average_precision(gts: &Dataset, preds: &[DetectionSet], cfg: &EvalConfig) -> Result<Metrics> {
    cfg.validate()?;
    let classes = collect_classes(gts, preds, cfg);
    let (ap, per_threshold) = mean_over_thresholds(&classes, cfg, None);
    let at = |t: f64| cfg.threshold_index(t).map(|i| per_threshold[i]);
    let mut m = Metrics {
        ap: ap.unwrap_or(0.0),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: None,
        ap_medium: None,
        ap_large: None,
        per_threshold: per_threshold.clone(),
    };
    if cfg.area_ranges {
        m.ap_small = mean_over_thresholds(&classes, cfg, Some((0.0, AREA_SMALL))).0;
        m.ap_medium = mean_over_thresholds(&classes, cfg, Some((AREA_SMALL, AREA_MEDIUM))).0;
        m.ap_large = mean_over_thresholds(&classes, cfg, Some((AREA_MEDIUM, f64::INFINITY))).0;
    }
    Ok(m)
}

/// Runs a detector over every image, each under the prior `prior_of` returns.
pub fn detect_all<'a, D, F>(detector: &D, images: &'a [ImageRecord], prior_of: F) -> Result<Vec<DetectionSet>>
where
    D: Detector + ?Sized,
    F: Fn(&'a ImageRecord) -> Result<std::borrow::Cow<'a, EdgeMatrix<f64>>> + Sync,
{
    images
        .par_iter()
        .map(|im| {
            let prior = prior_of(im)?;
            let set = detector.detect(im, &prior)?;
            set.validate(detector.k())?;
            Ok(set)
        })
        .collect()
}

/// Priors of the standard comparison, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Each image's own statistics with every off-diagonal entry flipped.
    FlippedSample,
    Flat,
    Train,
    Validation,
    /// Statistics of the subset each image falls in.
    Batch,
    /// Each image's own statistics.
    Sample,
}

impl PriorKind {
    pub const ALL: [PriorKind; 6] = [
        PriorKind::FlippedSample,
        PriorKind::Flat,
        PriorKind::Train,
        PriorKind::Validation,
        PriorKind::Batch,
        PriorKind::Sample,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PriorKind::FlippedSample => "ebar",
            PriorKind::Flat => "e0",
            PriorKind::Train => "et",
            PriorKind::Validation => "ev",
            PriorKind::Batch => "eb",
            PriorKind::Sample => "ex",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        PriorKind::ALL
            .into_iter()
            .find(|p| p.code() == code.trim())
            .ok_or_else(|| Error::Config(format!("unknown prior {code:?}; expected one of ebar, e0, et, ev, eb, ex")))
    }
}

/// Either one edge for every image or one edge per image id.
#[derive(Debug, Clone)]
pub enum PriorSource {
    Global(EdgeMatrix<f64>),
    PerImage(HashMap<u64, EdgeMatrix<f64>>),
}

impl PriorSource {
    pub fn for_image(&self, image_id: u64) -> Result<&EdgeMatrix<f64>> {
        match self {
            PriorSource::Global(e) => Ok(e),
            PriorSource::PerImage(map) => map.get(&image_id).ok_or(Error::Detector {
                image_id,
                reason: "no prior for this image".into(),
            }),
        }
    }
}

/// Builds one of the standard priors for `dataset`.
///
/// `batch` gives the subset size and shuffle seed for [`PriorKind::Batch`]; images left
/// over after the last full subset share the statistics of the remainder.
pub fn standard_prior(kind: PriorKind, dataset: &Dataset, e_t: &EdgeMatrix<f64>, batch: (usize, u64)) -> Result<PriorSource> {
    let ids = dataset.class_ids().to_vec();
    let own = |im: &ImageRecord| edge_from_label_sets_with_ids::<f64>(ids.clone(), [&im.labels]);
    Ok(match kind {
        PriorKind::Flat => PriorSource::Global(flat_prior_with_ids(ids.clone())?),
        PriorKind::Train => PriorSource::Global(e_t.clone()),
        PriorKind::Validation => PriorSource::Global(dataset_edge(dataset)?),
        PriorKind::Sample => PriorSource::PerImage(dataset.images.iter().map(|im| Ok((im.image_id, own(im)?))).collect::<Result<_>>()?),
        PriorKind::FlippedSample => PriorSource::PerImage(
            dataset
                .images
                .iter()
                .map(|im| Ok((im.image_id, flip_edge(&own(im)?))))
                .collect::<Result<_>>()?,
        ),
        PriorKind::Batch => {
            let (size, seed) = batch;
            if size == 0 {
                return Err(Error::Config("batch size must be at least 1".into()));
            }
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut map = HashMap::new();
            for chunk in order.chunks(size) {
                let e = edge_from_label_sets_with_ids::<f64>(ids.clone(), chunk.iter().map(|&i| &dataset.images[i].labels))?;
                for &i in chunk {
                    map.insert(dataset.images[i].image_id, e.clone());
                }
            }
            PriorSource::PerImage(map)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prior: PriorKind,
    /// Mean absolute difference from the training prior, averaged over images.
    pub epsilon: f64,
    pub metrics: Metrics,
    /// AP minus AP under the training prior, when that row is present.
    pub delta_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSweepReport {
    pub images: usize,
    pub rows: Vec<SweepRow>,
}

impl PriorSweepReport {
    pub fn row(&self, kind: PriorKind) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.prior == kind)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6} {:>8} {:>7} {:>7} {:>7} {:>9}\n", "prior", "eps", "AP", "AP50", "AP75", "dAP");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let delta = r.delta_ap.map_or(String::new(), |d| format!("({d:+.2})"));
            let _ = writeln!(
                s,
                "{:<6} {:>8.4} {:>7.2} {:>7} {:>7} {:>9}",
                r.prior.code(),
                r.epsilon,
                r.metrics.ap,
                opt(r.metrics.ap50),
                opt(r.metrics.ap75),
                delta
            );
        }
        s
    }
}

fn mean_epsilon(source: &PriorSource, dataset: &Dataset, e_t: &EdgeMatrix<f64>) -> Result<f64> {
    match source {
        PriorSource::Global(e) => Ok(edge_mae(e, e_t)?.mae),
        PriorSource::PerImage(_) => {
            if dataset.is_empty() {
                return Ok(0.0);
            }
            let mut total = 0.0;
            for im in &dataset.images {
                total += edge_mae(source.for_image(im.image_id)?, e_t)?.mae;
            }
            Ok(total / dataset.len() as f64)
        }
    }
}

/// Evaluates the detector once per prior and tabulates AP with the distance from `e_t`.
pub fn prior_sweep<D: Detector + ?Sized>(
    detector: &D,
    dataset: &Dataset,
    priors: &[(PriorKind, PriorSource)],
    e_t: &EdgeMatrix<f64>,
    cfg: &EvalConfig,
) -> Result<PriorSweepReport> {
    let mut order: Vec<&(PriorKind, PriorSource)> = priors.iter().collect();
    order.sort_by_key(|(kind, _)| *kind);
    let mut rows = Vec::with_capacity(order.len());
    for (kind, source) in order {
        let preds = detect_all(detector, &dataset.images, |im| {
            source.for_image(im.image_id).map(std::borrow::Cow::Borrowed)
        })?;
        rows.push(SweepRow {
            prior: *kind,
            epsilon: mean_epsilon(source, dataset, e_t)?,
            metrics: average_precision(dataset, &preds, cfg)?,
            delta_ap: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.prior == PriorKind::Train).map(|r| r.metrics.ap) {
        for r in &mut rows {
            r.delta_ap = Some(r.metrics.ap - base);
        }
    }
    Ok(PriorSweepReport {
        images: dataset.len(),
        rows,
    })
}

/// Mean of the headline metrics over subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

impl MeanMetrics {
    fn of(all: &[Metrics]) -> MeanMetrics {
        let n = all.len().max(1) as f64;
        let mean_opt = |f: fn(&Metrics) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = all.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
        };
        MeanMetrics {
            ap: all.iter().map(|m| m.ap).sum::<f64>() / n,
            ap50: mean_opt(|m| m.ap50),
            ap75: mean_opt(|m| m.ap75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset_size: usize,
    pub subsets: usize,
    /// Mean distance between each subset's statistics and the training prior.
    pub mean_epsilon: f64,
    pub train_prior: MeanMetrics,
    pub subset_prior: MeanMetrics,
    pub delta_ap: f64,
}

/// Splits the dataset into equal subsets and compares the training prior against each
/// subset's own statistics, averaging metrics over subsets.
pub fn subset_eval<D: Detector + ?Sized>(
    detector: &D,
    dataset: &Dataset,
    subset_size: usize,
    seed: u64,
    e_t: &EdgeMatrix<f64>,
    cfg: &EvalConfig,
) -> Result<SubsetReport> {
    let subsets = split_subsets(dataset, subset_size, seed)?;
    let mut eps = 0.0;
    let mut under_train = Vec::with_capacity(subsets.len());
    let mut under_subset = Vec::with_capacity(subsets.len());
    for subset in &subsets {
        let e_b = dataset_edge::<f64>(subset)?;
        eps += edge_mae(&e_b, e_t)?.mae;
        let preds = detect_all(detector, &subset.images, |_| Ok(std::borrow::Cow::Borrowed(e_t)))?;
        under_train.push(average_precision(subset, &preds, cfg)?);
        let preds = detect_all(detector, &subset.images, |_| Ok(std::borrow::Cow::Borrowed(&e_b)))?;
        under_subset.push(average_precision(subset, &preds, cfg)?);
    }
    let n = subsets.len().max(1) as f64;
    let train_prior = MeanMetrics::of(&under_train);
    let subset_prior = MeanMetrics::of(&under_subset);
    Ok(SubsetReport {
        subset_size,
        subsets: subsets.len(),
        mean_epsilon: eps / n,
        delta_ap: subset_prior.ap - train_prior.ap,
        train_prior,
        subset_prior,
    })
}

pub fn subset_table(reports: &[SubsetReport]) -> String {
    let mut s = format!(
        "{:>6} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
        "size", "subsets", "eps", "AP(et)", "AP(eb)", "dAP"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>8.4} {:>9.2} {:>9.2} {:>9}",
            r.subset_size,
            r.subsets,
            r.mean_epsilon,
            r.train_prior.ap,
            r.subset_prior.ap,
            format!("({:+.2})", r.delta_ap)
        );
    }
    s
}
