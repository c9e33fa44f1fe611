//! Prediction sources that accept an injected prior.
//!
//! A detector maps `(image, edge)` to a [`DetectionSet`]. The in-process simulator lives in
//! [`crate::simworld`]; [`ConstantDetector`] replays fixed predictions and
//! [`HttpDetector`] talks to an external service speaking the same JSON.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::edge::EdgeMatrix;
use crate::error::{Error, Result};
use crate::ingest::ImageRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(image_id: u64) -> Self {
        DetectionSet {
            image_id,
            detections: Vec::new(),
        }
    }

    /// Checks scores, class indices and box extents.
    pub fn validate(&self, k: usize) -> Result<()> {
        for (n, d) in self.detections.iter().enumerate() {
            let reason = if d.class >= k {
                Some(format!("detection {n} has class {} but k = {k}", d.class))
            } else if !(0.0..=1.0).contains(&d.score) {
                Some(format!("detection {n} has score {} outside [0, 1]", d.score))
            } else if d.bbox.iter().any(|v| !v.is_finite()) || d.bbox[2] < 0.0 || d.bbox[3] < 0.0 {
                Some(format!("detection {n} has invalid box {:?}", d.bbox))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::Detector {
                    image_id: self.image_id,
                    reason,
                });
            }
        }
        Ok(())
    }
}

pub trait Detector: Sync {
    /// Number of classes the detector predicts.
    fn k(&self) -> usize;

    fn detect(&self, image: &ImageRecord, prior: &EdgeMatrix<f64>) -> Result<DetectionSet>;
}

/// Returns the same predictions whatever prior is injected.
#[derive(Debug, Clone)]
pub struct ConstantDetector {
    k: usize,
    sets: HashMap<u64, DetectionSet>,
}

impl ConstantDetector {
    pub fn new(k: usize, sets: impl IntoIterator<Item = DetectionSet>) -> Result<Self> {
        let mut map = HashMap::new();
        for set in sets {
            set.validate(k)?;
            let id = set.image_id;
            if map.insert(id, set).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(ConstantDetector { k, sets: map })
    }

    /// Reads one detection set per line.
    pub fn read_jsonl(k: usize, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sets = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                sets.push(serde_json::from_str(&line)?);
            }
        }
        ConstantDetector::new(k, sets)
    }
}

impl Detector for ConstantDetector {
    fn k(&self) -> usize {
        self.k
    }

    fn detect(&self, image: &ImageRecord, _prior: &EdgeMatrix<f64>) -> Result<DetectionSet> {
        Ok(self
            .sets
            .get(&image.image_id)
            .cloned()
            .unwrap_or_else(|| DetectionSet::empty(image.image_id)))
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_id: u64,
    edge: &'a EdgeMatrix<f64>,
}

/// Client for a detection service: `POST {"image_id", "edge"}` returns a detection set.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    k: usize,
    url: String,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpDetector {
    pub fn new(k: usize, url: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpDetector {
            k,
            url: url.into(),
            retries,
            agent,
        }
    }

    fn attempt(&self, image_id: u64, prior: &EdgeMatrix<f64>) -> std::result::Result<DetectionSet, String> {
        let body = serde_json::to_string(&DetectRequest { image_id, edge: prior }).map_err(|e| e.to_string())?;
        let mut response = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let text = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| format!("bad response: {e}"))
    }
}

impl Detector for HttpDetector {
    fn k(&self) -> usize {
        self.k
    }

    fn detect(&self, image: &ImageRecord, prior: &EdgeMatrix<f64>) -> Result<DetectionSet> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(image.image_id, prior) {
                Ok(set) => {
                    if set.image_id != image.image_id {
                        return Err(Error::Detector {
                            image_id: image.image_id,
                            reason: format!("response is for image {}", set.image_id),
                        });
                    }
                    set.validate(self.k)?;
                    return Ok(set);
                }
                Err(e) => {
                    log::debug!("image {} attempt {attempt} failed: {e}", image.image_id);
                    last = e;
                }
            }
        }
        Err(Error::Detector {
            image_id: image.image_id,
            reason: format!("{} attempt(s) failed, last: {last}", self.retries + 1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::flat_prior;

    fn det(class: usize, score: f64) -> Detection {
        Detection {
            class,
            score,
            bbox: [1.0, 2.0, 3.0, 4.0],
        }
    }

    #[test]
    fn validation() {
        let ok = DetectionSet {
            image_id: 3,
            detections: vec![det(0, 0.5), det(1, 1.0)],
        };
        assert!(ok.validate(2).is_ok());
        for bad in [det(2, 0.5), det(0, 1.5), det(0, f64::NAN)] {
            let set = DetectionSet {
                image_id: 3,
                detections: vec![bad],
            };
            assert!(matches!(set.validate(2), Err(Error::Detector { image_id: 3, .. })));
        }
        let mut neg = det(0, 0.5);
        neg.bbox[2] = -1.0;
        assert!(DetectionSet {
            image_id: 1,
            detections: vec![neg]
        }
        .validate(2)
        .is_err());
    }

    #[test]
    fn constant_detector_replays() {
        let set = DetectionSet {
            image_id: 7,
            detections: vec![det(1, 0.8)],
        };
        let d = ConstantDetector::new(2, [set.clone()]).unwrap();
        let prior = flat_prior(2).unwrap();
        assert_eq!(d.detect(&ImageRecord::new(7, 10.0, 10.0, vec![]), &prior).unwrap(), set);
        assert_eq!(
            d.detect(&ImageRecord::new(8, 10.0, 10.0, vec![]), &prior).unwrap(),
            DetectionSet::empty(8)
        );
        assert!(matches!(ConstantDetector::new(2, [set.clone(), set]), Err(Error::DuplicateId(7))));
    }

    #[test]
    fn constant_detector_reads_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        std::fs::write(
            &path,
            "{\"image_id\":1,\"detections\":[{\"class\":0,\"score\":0.9,\"bbox\":[0,0,1,1]}]}\n\n{\"image_id\":2,\"detections\":[]}\n",
        )
        .unwrap();
        let d = ConstantDetector::read_jsonl(1, &path).unwrap();
        let got = d.detect(&ImageRecord::new(1, 1.0, 1.0, vec![]), &flat_prior(1).unwrap()).unwrap();
        assert_eq!(got.detections.len(), 1);
        assert!(ConstantDetector::read_jsonl(1, dir.path().join("missing.jsonl")).is_err());
    }
}
