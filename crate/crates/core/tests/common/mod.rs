//! Reference implementations written independently of the library, plus fixtures.
#![allow(dead_code)]

use calidet::califormer::{CaliDet, CaliFormerParams, FormerConfig, NormOrder};
use calidet::detector::{Detection, DetectionSet};
use calidet::ingest::{Dataset, GtBox, ImageRecord};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major `P(i|j)` by direct counting over boolean presence tables.
pub fn brute_edge(k: usize, samples: &[Vec<usize>]) -> Vec<f64> {
    let present: Vec<Vec<bool>> = samples.iter().map(|s| (0..k).map(|c| s.contains(&c)).collect()).collect();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                out[i * k + j] = 1.0;
                continue;
            }
            let mut both = 0u64;
            let mut given = 0u64;
            for p in &present {
                if p[j] {
                    given += 1;
                    if p[i] {
                        both += 1;
                    }
                }
            }
            out[i * k + j] = if given == 0 { 0.5 } else { both as f64 / given as f64 };
        }
    }
    out
}

pub fn random_label_sets(rng: &mut impl Rng, k: usize, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let density = rng.random_range(0.0..1.0);
            (0..k).filter(|_| rng.random_bool(density)).collect()
        })
        .collect()
}

fn layer_norm(x: &[f64], gain: &[f64], offset: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().enumerate().map(|(c, v)| (v - mean) * inv * gain[c] + offset[c]).collect()
}

/// `x W + b` for one row, `W` stored `in x out`.
fn affine(x: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.ncols())
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[[i, o]]).sum::<f64>())
        .collect()
}

fn plain_attention(tokens: &[Vec<f64>], p: &calidet::califormer::AttentionParams<f64>, heads: usize) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| affine(t, &p.query.weight, p.query.bias.as_slice().unwrap()))
        .collect();
    let k: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| affine(t, &p.key.weight, p.key.bias.as_slice().unwrap()))
        .collect();
    let v: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| affine(t, &p.value.weight, p.value.bias.as_slice().unwrap()))
        .collect();
    let n = tokens.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for a in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|b| cols.clone().map(|c| q[a][c] * k[b][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                concat[a][c] = (0..n).map(|b| exps[b] / z * v[b][c]).sum();
            }
        }
    }
    concat
        .iter()
        .map(|row| affine(row, &p.output.weight, p.output.bias.as_slice().unwrap()))
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Encoder without any prior bias, written with plain loops. Returns `d x K`.
pub fn plain_encoder(params: &CaliFormerParams<f64>, v: &Array2<f64>) -> Array2<f64> {
    let cfg = &params.config;
    let (d, k) = v.dim();
    let mut tokens: Vec<Vec<f64>> = (0..k).map(|c| (0..d).map(|r| v[[r, c]]).collect()).collect();
    for layer in &params.layers {
        let ln = |x: &[f64], norm: &calidet::califormer::LayerNorm<f64>| {
            layer_norm(x, norm.gain.as_slice().unwrap(), norm.offset.as_slice().unwrap(), cfg.norm_eps)
        };
        let ff = |x: &[f64]| {
            let hidden: Vec<f64> = affine(x, &layer.ff_in.weight, layer.ff_in.bias.as_slice().unwrap())
                .into_iter()
                .map(|h| h.max(0.0))
                .collect();
            affine(&hidden, &layer.ff_out.weight, layer.ff_out.bias.as_slice().unwrap())
        };
        tokens = match cfg.norm_order {
            NormOrder::PreNorm => {
                let normed: Vec<Vec<f64>> = tokens.iter().map(|t| ln(t, &layer.norm1)).collect();
                let att = plain_attention(&normed, &layer.attention, cfg.head_count);
                let mid: Vec<Vec<f64>> = tokens.iter().zip(&att).map(|(t, a)| add(t, a)).collect();
                mid.iter().map(|m| add(m, &ff(&ln(m, &layer.norm2)))).collect()
            }
            NormOrder::PostNorm => {
                let att = plain_attention(&tokens, &layer.attention, cfg.head_count);
                let mid: Vec<Vec<f64>> = tokens.iter().zip(&att).map(|(t, a)| ln(&add(t, a), &layer.norm1)).collect();
                mid.iter().map(|m| ln(&add(m, &ff(m)), &layer.norm2)).collect()
            }
        };
    }
    Array2::from_shape_fn((d, k), |(r, c)| tokens[c][r])
}

/// Model with every tensor perturbed so biases and norm parameters are non-trivial.
pub fn random_model(k: usize, cfg: FormerConfig, rho: f64, seed: u64) -> CaliDet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CaliDet::<f64>::init(k, cfg, rho, &mut rng).unwrap();
    let flat: Vec<f64> = model.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    model.assign(&flat).unwrap();
    let nodes = model.nodes.values.mapv(|_| rng.random_range(-1.0..1.0));
    model.nodes.values = nodes;
    model
}

fn corners(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    (b[0], b[1], b[0] + b[2], b[1] + b[3])
}

pub fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = w * h;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detections of one class in evaluation order: score descending, then image id, then
/// position within the image's list.
fn ranked(gts: &Dataset, preds: &[DetectionSet], class: usize) -> Vec<(u64, [f64; 4], f64, usize)> {
    let known: Vec<u64> = gts.images.iter().map(|im| im.image_id).collect();
    let mut out: Vec<(u64, [f64; 4], f64, usize)> = Vec::new();
    for set in preds.iter().filter(|s| known.contains(&s.image_id)) {
        for (pos, d) in set.detections.iter().enumerate() {
            if d.class == class {
                out.push((set.image_id, d.bbox, d.score, pos));
            }
        }
    }
    out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.3.cmp(&b.3)));
    out
}

/// True positives among the first `n` ranked detections, matching each to the unused
/// ground truth of highest IoU at or above `t` (lowest index on ties).
fn true_positives(gts: &Dataset, dets: &[(u64, [f64; 4], f64, usize)], class: usize, t: f64, n: usize) -> usize {
    let mut used: Vec<(u64, usize)> = Vec::new();
    let mut tp = 0;
    for &(image_id, bbox, _, _) in &dets[..n] {
        let im = gts.images.iter().find(|im| im.image_id == image_id).unwrap();
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in im.boxes.iter().enumerate() {
            if gt.class != class || used.contains(&(image_id, g)) {
                continue;
            }
            let v = oracle_iou(&bbox, &gt.bbox);
            if v >= t && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            used.push((image_id, g));
            tp += 1;
        }
    }
    tp
}

/// AP over thresholds, on the 0 to 100 scale, by enumerating every cut-off of the
/// ranked list and taking the best precision at each sampled recall.
pub fn exhaustive_ap(gts: &Dataset, preds: &[DetectionSet], thresholds: &[f64], points: usize) -> f64 {
    let k = gts.k();
    let mut per_threshold = Vec::new();
    for &t in thresholds {
        let mut class_aps = Vec::new();
        for class in 0..k {
            let npos = gts.images.iter().flat_map(|im| &im.boxes).filter(|b| b.class == class).count();
            if npos == 0 {
                continue;
            }
            let dets = ranked(gts, preds, class);
            let curve: Vec<(f64, f64)> = (1..=dets.len())
                .map(|n| {
                    let tp = true_positives(gts, &dets, class, t, n) as f64;
                    (tp / npos as f64, tp / n as f64)
                })
                .collect();
            let ap: f64 = (0..points)
                .map(|p| {
                    let r = p as f64 / (points - 1) as f64;
                    curve.iter().filter(|(rec, _)| *rec >= r).map(|(_, prec)| *prec).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / points as f64;
            class_aps.push(ap);
        }
        if class_aps.is_empty() {
            return 0.0;
        }
        per_threshold.push(class_aps.iter().sum::<f64>() / class_aps.len() as f64 * 100.0);
    }
    per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
}

fn grid_box(rng: &mut impl Rng) -> [f64; 4] {
    [
        rng.random_range(0..4) as f64,
        rng.random_range(0..4) as f64,
        rng.random_range(1..4) as f64,
        rng.random_range(1..4) as f64,
    ]
}

/// Up to 3 images and 4 detections on a coarse grid, with repeated scores so ties occur.
pub fn micro_instance(rng: &mut impl Rng) -> (Dataset, Vec<DetectionSet>) {
    let k = rng.random_range(1..=2);
    let n_images = rng.random_range(1..=3);
    let images: Vec<ImageRecord> = (0..n_images)
        .map(|n| {
            let boxes = (0..rng.random_range(0..=2))
                .map(|_| GtBox {
                    class: rng.random_range(0..k),
                    bbox: grid_box(rng),
                })
                .collect();
            ImageRecord::new(n as u64 * 3 + 1, 8.0, 8.0, boxes)
        })
        .collect();
    let ids: Vec<u64> = images.iter().map(|im| im.image_id).collect();
    let mut preds: Vec<DetectionSet> = ids.iter().map(|&id| DetectionSet::empty(id)).collect();
    for _ in 0..rng.random_range(0..=4) {
        let at = rng.random_range(0..preds.len());
        preds[at].detections.push(Detection {
            class: rng.random_range(0..k),
            score: rng.random_range(1..=4) as f64 / 4.0,
            bbox: grid_box(rng),
        });
    }
    let dataset = Dataset::new((0..k as u64).collect(), (0..k).map(|c| format!("c{c}")).collect(), images).unwrap();
    (dataset, preds)
}

/// Small encoder configuration with `d <= 8`, covering both norm orders and bias placements.
pub fn small_config(rng: &mut impl Rng) -> FormerConfig {
    let head_count = rng.random_range(1..=2);
    let d = head_count * rng.random_range(2 / head_count..=8 / head_count);
    FormerConfig {
        d,
        head_count,
        layers: rng.random_range(1..=2),
        ff_mult: rng.random_range(1..=2),
        norm_order: if rng.random_bool(0.5) {
            NormOrder::PreNorm
        } else {
            NormOrder::PostNorm
        },
        bias_placement: if rng.random_bool(0.5) {
            calidet::califormer::BiasPlacement::AfterScale
        } else {
            calidet::califormer::BiasPlacement::BeforeScale
        },
        norm_eps: 1e-5,
    }
}

pub fn random_edge(rng: &mut impl Rng, k: usize) -> calidet::Edge {
    let values = (0..k * k).map(|_| rng.random_range(0.0..=1.0)).collect();
    calidet::Edge::clipped((0..k as u64).collect(), values).unwrap()
}

/// Largest relative error between the analytic gradient of `sum(w * logits)` and a
/// fourth-order central difference, over every parameter.
pub fn gradient_check(model: &CaliDet<f64>, bias: &calidet::Delta, features: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let pass = model.forward(bias, features.view()).unwrap();
    let analytic = model.backward(&pass, w.view()).unwrap().flatten();
    let base = model.flatten();
    let mut probe = base.clone();
    let mut loss_at = |p: usize, offset: f64| {
        probe[p] = base[p] + offset;
        let mut m = model.clone();
        m.assign(&probe).unwrap();
        probe[p] = base[p];
        let logits = m.forward(bias, features.view()).unwrap().logits;
        (&logits * w).sum()
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (p, a) in analytic.iter().enumerate() {
        let numeric = (8.0 * (loss_at(p, h) - loss_at(p, -h)) - (loss_at(p, 2.0 * h) - loss_at(p, -2.0 * h))) / (12.0 * h);
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}
