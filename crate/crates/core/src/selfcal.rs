//! Self-calibration: re-estimating the injected prior from the detector's own predictions.
//!
//! Starting from the training prior, each iteration runs the detector under the current
//! prior `E_c`, turns its confident predictions into statistics `E_i`, and moves `E_c`
//! toward them with a step weighted by mean per-class confidence:
//! `E_c <- clip(E_c + eta * Z * (E_i - E_c))`, diagonal reset to 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionSet, Detector};
use crate::edge::{edge_from_label_sets, EdgeMatrix, LabelSet};
use crate::error::{Error, Result};
use crate::eval::{average_precision, detect_all, EvalConfig, Metrics};
use crate::ingest::Dataset;

/// Axis along which the confidence vector is repeated to form `Z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZAxis {
    /// `Z(i, j) = z_j`: column `j` moves with the confidence in class `j`.
    #[default]
    Column,
    /// `Z(i, j) = z_i`
    Row,
}

/// How `E_i` is estimated from predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Statistics {
    /// Statistics of the current iteration's predictions only.
    #[default]
    Full,
    /// Exponential moving average over iterations: `E = decay * E_prev + (1 - decay) * E_i`.
    Running { decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfCalConfig {
    pub eta: f64,
    pub max_iterations: usize,
    pub presence_threshold: f64,
    pub confidence_floor: f64,
    /// Stop once the largest entry change falls below this.
    pub tolerance: f64,
    pub z_axis: ZAxis,
    pub statistics: Statistics,
}

impl Default for SelfCalConfig {
    fn default() -> Self {
        SelfCalConfig {
            eta: 4.0,
            max_iterations: 50,
            presence_threshold: 0.5,
            confidence_floor: 0.0,
            tolerance: 1e-6,
            z_axis: ZAxis::default(),
            statistics: Statistics::default(),
        }
    }
}

impl SelfCalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.presence_threshold) || !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::Config("presence threshold and confidence floor must lie in [0, 1]".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        if let Statistics::Running { decay } = self.statistics {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config("running decay must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Highest confidence per class among detections scoring at least `floor`, else 0.
pub fn z_vector(preds: &DetectionSet, k: usize, floor: f64) -> Vec<f64> {
    let mut z = vec![0.0f64; k];
    for d in &preds.detections {
        if d.class < k && d.score >= floor {
            z[d.class] = z[d.class].max(d.score);
        }
    }
    z
}

/// [`z_vector`] averaged over images.
pub fn mean_z(all: &[DetectionSet], k: usize, floor: f64) -> Vec<f64> {
    let mut z = vec![0.0; k];
    for set in all {
        for (acc, v) in z.iter_mut().zip(z_vector(set, k, floor)) {
            *acc += v;
        }
    }
    if !all.is_empty() {
        z.iter_mut().for_each(|v| *v /= all.len() as f64);
    }
    z
}

/// Statistics of the predicted presence sets: classes with any detection scoring at
/// least `tau`.
pub fn predictions_to_edge(all: &[DetectionSet], k: usize, tau: f64) -> Result<EdgeMatrix<f64>> {
    let sets: Vec<LabelSet> = all
        .iter()
        .map(|s| s.detections.iter().filter(|d| d.score >= tau).map(|d| d.class).collect())
        .collect();
    edge_from_label_sets(k, &sets)
}

/// One damped update of the calibrated prior.
pub fn selfcal_step(e_c: &EdgeMatrix<f64>, e_i: &EdgeMatrix<f64>, z_bar: &[f64], eta: f64, axis: ZAxis) -> Result<EdgeMatrix<f64>> {
    e_c.same_layout(e_i)?;
    let k = e_c.k();
    if z_bar.len() != k {
        return Err(Error::ShapeMismatch(format!("{} confidences for {k} classes", z_bar.len())));
    }
    let values = (0..k * k)
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            let z = match axis {
                ZAxis::Column => z_bar[j],
                ZAxis::Row => z_bar[i],
            };
            e_c.values()[idx] + eta * z * (e_i.values()[idx] - e_c.values()[idx])
        })
        .collect();
    EdgeMatrix::clipped(e_c.class_ids().to_vec(), values)
}

/// Mean and maximum absolute entry change between two priors.
pub fn step_size(a: &EdgeMatrix<f64>, b: &EdgeMatrix<f64>) -> Result<(f64, f64)> {
    a.same_layout(b)?;
    let diffs = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs());
    let (sum, max) = diffs.fold((0.0, 0.0f64), |(s, m), d| (s + d, m.max(d)));
    Ok((sum / a.values().len() as f64, max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Prior the detector ran under in this iteration.
    pub edge: EdgeMatrix<f64>,
    pub step_mae: f64,
    pub step_max: f64,
    /// `eta * z_j` per class.
    pub effective_step: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrace {
    pub iterations: Vec<IterationRecord>,
    /// Prior after the last update.
    pub final_edge: EdgeMatrix<f64>,
    pub converged: bool,
}

impl CalibrationTrace {
    /// One JSON line per iteration.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.iterations {
            let line = serde_json::to_string(r)?;
            writeln!(out, "{line}").map_err(|e| Error::io("trace", e))?;
        }
        Ok(())
    }
}

/// A run that stopped on a detector error, with everything recorded up to that point.
#[derive(Debug)]
pub struct SelfCalFailure {
    pub trace: CalibrationTrace,
    pub error: Error,
}

impl std::fmt::Display for SelfCalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "self-calibration aborted after {} iteration(s): {}",
            self.trace.iterations.len(),
            self.error
        )
    }
}

impl std::error::Error for SelfCalFailure {}

/// Iterates the calibration from `e_t`. With `eval`, each iteration's predictions are
/// also scored against the dataset's boxes.
#[allow(clippy::result_large_err)]
pub fn selfcal_run<D: Detector + ?Sized>(
    detector: &D,
    images: &Dataset,
    cfg: &SelfCalConfig,
    e_t: &EdgeMatrix<f64>,
    eval: Option<&EvalConfig>,
) -> std::result::Result<CalibrationTrace, SelfCalFailure> {
    let mut trace = CalibrationTrace {
        iterations: Vec::new(),
        final_edge: e_t.clone(),
        converged: false,
    };
    match run_into(detector, images, cfg, e_t, eval, &mut trace) {
        Ok(()) => Ok(trace),
        Err(error) => Err(SelfCalFailure { trace, error }),
    }
}

fn run_into<D: Detector + ?Sized>(
    detector: &D,
    images: &Dataset,
    cfg: &SelfCalConfig,
    e_t: &EdgeMatrix<f64>,
    eval: Option<&EvalConfig>,
    trace: &mut CalibrationTrace,
) -> Result<()> {
    cfg.validate()?;
    let k = e_t.k();
    if detector.k() != k {
        return Err(Error::ShapeMismatch(format!(
            "detector predicts {} classes, prior has {k}",
            detector.k()
        )));
    }
    let ids = e_t.class_ids().to_vec();
    let mut e_c = e_t.clone();
    let mut running: Option<EdgeMatrix<f64>> = None;
    for iteration in 0..cfg.max_iterations {
        let preds = detect_all(detector, &images.images, |_| Ok(std::borrow::Cow::Borrowed(&e_c)))?;
        let metrics = eval.map(|c| average_precision(images, &preds, c)).transpose()?;
        let fresh = predictions_to_edge(&preds, k, cfg.presence_threshold)?.with_class_ids(ids.clone())?;
        let e_i = match (cfg.statistics, &running) {
            (Statistics::Running { decay }, Some(prev)) => {
                let values = prev
                    .values()
                    .iter()
                    .zip(fresh.values())
                    .map(|(p, f)| decay * p + (1.0 - decay) * f)
                    .collect();
                EdgeMatrix::clipped(ids.clone(), values)?
            }
            _ => fresh,
        };
        if matches!(cfg.statistics, Statistics::Running { .. }) {
            running = Some(e_i.clone());
        }
        let z = mean_z(&preds, k, cfg.confidence_floor);
        let next = selfcal_step(&e_c, &e_i, &z, cfg.eta, cfg.z_axis)?;
        let (step_mae, step_max) = step_size(&next, &e_c)?;
        log::info!("iteration {iteration}: step mae {step_mae:.3e} max {step_max:.3e}");
        trace.iterations.push(IterationRecord {
            iteration,
            edge: e_c,
            step_mae,
            step_max,
            effective_step: z.iter().map(|v| cfg.eta * v).collect(),
            metrics,
        });
        e_c = next;
        trace.final_edge = e_c.clone();
        if step_max < cfg.tolerance {
            trace.converged = true;
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{ConstantDetector, Detection};
    use crate::edge::flat_prior;
    use crate::ingest::{GtBox, ImageRecord};

    fn set(image_id: u64, d: &[(usize, f64)]) -> DetectionSet {
        DetectionSet {
            image_id,
            detections: d
                .iter()
                .map(|&(class, score)| Detection {
                    class,
                    score,
                    bbox: [0.0, 0.0, 10.0, 10.0],
                })
                .collect(),
        }
    }

    fn cell(k: usize, i: usize, j: usize, v: f64) -> EdgeMatrix<f64> {
        let mut values = flat_prior::<f64>(k).unwrap().values().to_vec();
        values[i * k + j] = v;
        EdgeMatrix::from_values((0..k as u64).collect(), values).unwrap()
    }

    #[test]
    fn z_vector_examples() {
        let preds = set(1, &[(0, 0.9), (0, 0.7), (2, 0.4)]);
        assert_eq!(z_vector(&preds, 3, 0.0), vec![0.9, 0.0, 0.4]);
        assert_eq!(z_vector(&preds, 3, 0.5), vec![0.9, 0.0, 0.0]);
        assert_eq!(z_vector(&set(1, &[]), 3, 0.0), vec![0.0; 3]);
        assert_eq!(mean_z(&[preds.clone(), set(2, &[(1, 0.6)])], 3, 0.0), vec![0.45, 0.3, 0.2]);
    }

    #[test]
    fn step_examples() {
        let z = [0.0, 0.2];
        let out = selfcal_step(&cell(2, 0, 1, 0.5), &cell(2, 0, 1, 1.0), &z, 4.0, ZAxis::Column).unwrap();
        assert!((out.get(0, 1) - 0.9).abs() < 1e-15);
        let z = [0.0, 0.5];
        let out = selfcal_step(&cell(2, 0, 1, 0.2), &cell(2, 0, 1, 1.0), &z, 4.0, ZAxis::Column).unwrap();
        assert_eq!(out.get(0, 1), 1.0);
        let e = cell(3, 2, 0, 0.3);
        assert_eq!(selfcal_step(&e, &e, &[1.0, 0.5, 0.2], 4.0, ZAxis::Column).unwrap(), e);
    }

    #[test]
    fn axis_choice() {
        // Only class 0 is confident: column 0 moves, row 0 does not under Column.
        let (e_c, e_i) = (cell(2, 1, 0, 0.5), cell(2, 1, 0, 1.0));
        let col = selfcal_step(&e_c, &e_i, &[0.25, 0.0], 1.0, ZAxis::Column).unwrap();
        assert_eq!(col.get(1, 0), 0.625);
        let row = selfcal_step(&e_c, &e_i, &[0.25, 0.0], 1.0, ZAxis::Row).unwrap();
        assert_eq!(row.get(1, 0), 0.5);
    }

    #[test]
    fn predictions_to_edge_thresholds() {
        let preds = [set(1, &[(0, 0.9), (2, 0.8), (1, 0.3)])];
        let e = predictions_to_edge(&preds, 3, 0.5).unwrap();
        let direct = crate::edge::edge_from_label_sets(3, [&LabelSet::new(3, [0, 2]).unwrap()]).unwrap();
        assert_eq!(e, direct);
    }

    fn fixture(eta_z: f64) -> (ConstantDetector, Dataset, SelfCalConfig) {
        // Two images; image 1 sees classes 0 and 1 confidently, image 2 sees nothing.
        // Mean confidence is score / 2 for both classes.
        let score = 0.8;
        let images = vec![
            ImageRecord::new(
                1,
                10.0,
                10.0,
                vec![GtBox {
                    class: 0,
                    bbox: [0.0, 0.0, 10.0, 10.0],
                }],
            ),
            ImageRecord::new(2, 10.0, 10.0, vec![]),
        ];
        let data = Dataset::new(vec![0, 1], vec!["a".into(), "b".into()], images).unwrap();
        let det = ConstantDetector::new(2, [set(1, &[(0, score), (1, score)])]).unwrap();
        let cfg = SelfCalConfig {
            eta: eta_z / (score / 2.0),
            ..SelfCalConfig::default()
        };
        (det, data, cfg)
    }

    #[test]
    fn constant_oracle_converges_geometrically() {
        let (det, data, cfg) = fixture(0.5);
        let e_t = EdgeMatrix::from_values(vec![0, 1], vec![1.0, 0.2, 0.1, 1.0]).unwrap();
        let trace = selfcal_run(&det, &data, &cfg, &e_t, None).unwrap();
        for w in trace.iterations.windows(2).take(10) {
            assert!((w[1].step_mae / w[0].step_mae - 0.5).abs() < 1e-9);
        }
        assert!(trace.converged);
        assert!(trace.final_edge.values().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn unit_effective_step_jumps() {
        let (det, data, cfg) = fixture(1.0);
        let e_t = flat_prior::<f64>(2).unwrap();
        let trace = selfcal_run(&det, &data, &cfg, &e_t, None).unwrap();
        assert_eq!(trace.iterations.len(), 2);
        assert!(trace.converged);
        assert_eq!(trace.iterations[1].edge.values(), &[1.0; 4]);
        assert!(trace.iterations[0].effective_step.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn large_steps_hit_the_clip() {
        let (det, data, cfg) = fixture(2.5);
        let e_t = EdgeMatrix::from_values(vec![0, 1], vec![1.0, 0.2, 0.1, 1.0]).unwrap();
        let trace = selfcal_run(&det, &data, &cfg, &e_t, None).unwrap();
        // 0.2 + 2.5 * 0.8 = 2.2, clipped to the target 1.0.
        assert_eq!(trace.iterations[1].edge.values(), &[1.0; 4]);
    }

    #[test]
    fn detector_failure_keeps_partial_trace() {
        struct Flaky;
        impl Detector for Flaky {
            fn k(&self) -> usize {
                2
            }
            fn detect(&self, image: &crate::ingest::ImageRecord, prior: &EdgeMatrix<f64>) -> Result<DetectionSet> {
                if prior.get(0, 1) != 0.5 {
                    return Err(Error::Detector {
                        image_id: image.image_id,
                        reason: "down".into(),
                    });
                }
                Ok(set(image.image_id, &[(0, 0.9), (1, 0.9)]))
            }
        }
        let (_, data, cfg) = fixture(0.5);
        let failure = selfcal_run(&Flaky, &data, &cfg, &flat_prior(2).unwrap(), None).unwrap_err();
        assert_eq!(failure.trace.iterations.len(), 1);
        assert!(matches!(failure.error, Error::Detector { .. }));
    }

    #[test]
    fn running_statistics_and_validation() {
        let (det, data, mut cfg) = fixture(0.5);
        cfg.statistics = Statistics::Running { decay: 0.5 };
        let trace = selfcal_run(&det, &data, &cfg, &flat_prior(2).unwrap(), None).unwrap();
        assert!(trace.converged);
        cfg.statistics = Statistics::Running { decay: 1.0 };
        assert!(cfg.validate().is_err());
        assert!(SelfCalConfig {
            eta: 0.0,
            ..SelfCalConfig::default()
        }
        .validate()
        .is_err());
        assert!(SelfCalConfig {
            presence_threshold: 1.5,
            ..SelfCalConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn trace_jsonl_has_one_line_per_iteration() {
        let (det, data, cfg) = fixture(0.5);
        let trace = selfcal_run(&det, &data, &cfg, &flat_prior(2).unwrap(), None).unwrap();
        let mut out = Vec::new();
        trace.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), trace.iterations.len());
        let first: IterationRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, trace.iterations[0]);
    }
}
