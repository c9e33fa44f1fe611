//! COCO-format annotation ingestion, class remapping and evaluation subsets.
//!
//! External category ids are sorted ascending and mapped onto contiguous class indices;
//! the id list travels with the [`Dataset`] and with every edge computed from it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::{edge_from_label_sets_with_ids, EdgeMatrix, LabelSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One ground-truth box, in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub labels: LabelSet,
    pub boxes: Vec<GtBox>,
}

impl ImageRecord {
    /// Builds a record whose label set is derived from its boxes.
    pub fn new(image_id: u64, width: f64, height: f64, boxes: Vec<GtBox>) -> Self {
        let labels = boxes.iter().map(|b| b.class).collect();
        ImageRecord {
            image_id,
            width,
            height,
            labels,
            boxes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_ids: Vec<u64>,
    class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(class_ids: Vec<u64>, class_names: Vec<String>, images: Vec<ImageRecord>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::InvalidDimension("dataset needs at least one class".into()));
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidEdge("class ids must be strictly increasing".into()));
        }
        if class_names.len() != class_ids.len() {
            return Err(Error::ShapeMismatch("one name per class id required".into()));
        }
        let k = class_ids.len();
        let mut seen = HashSet::new();
        for img in &images {
            if !seen.insert(img.image_id) {
                return Err(Error::DuplicateId(img.image_id));
            }
            for b in &img.boxes {
                if b.class >= k {
                    return Err(Error::ClassOutOfRange { index: b.class, k });
                }
                if b.bbox.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("box on image {}", img.image_id)));
                }
            }
            if let Some(max) = img.labels.max_index() {
                if max >= k {
                    return Err(Error::ClassOutOfRange { index: max, k });
                }
            }
        }
        Ok(Dataset {
            class_ids,
            class_names,
            images,
        })
    }

    pub fn k(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }

    /// Same taxonomy, different images.
    pub fn with_images(&self, images: Vec<ImageRecord>) -> Dataset {
        Dataset {
            class_ids: self.class_ids.clone(),
            class_names: self.class_names.clone(),
            images,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_annotations(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_coco_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Serializes as COCO-format JSON. Annotation ids are assigned sequentially.
    pub fn to_coco_json(&self) -> Result<String> {
        let images = self
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.image_id,
                width: i.width,
                height: i.height,
                file_name: None,
            })
            .collect();
        let mut annotations = Vec::new();
        for img in &self.images {
            for b in &img.boxes {
                annotations.push(CocoAnnotation {
                    id: Some(annotations.len() as u64 + 1),
                    image_id: img.image_id,
                    category_id: self.class_ids[b.class],
                    bbox: b.bbox.to_vec(),
                    area: Some(b.bbox[2] * b.bbox[3]),
                    iscrowd: Some(0),
                });
            }
        }
        let categories = self
            .class_ids
            .iter()
            .zip(&self.class_names)
            .map(|(&id, name)| CocoCategory { id, name: name.clone() })
            .collect();
        let doc = CocoDocument {
            images,
            annotations,
            categories,
        };
        Ok(serde_json::to_string(&doc)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    width: f64,
    #[serde(default)]
    height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    #[serde(default)]
    name: String,
}

/// Parses a COCO-format annotation document.
///
/// Only `bbox` and `category_id` are consumed from annotations. Images without
/// annotations are kept with an empty label set.
pub fn parse_annotations(document: &str) -> Result<Dataset> {
    let doc: CocoDocument = serde_json::from_str(document)?;

    let mut categories: Vec<(u64, String)> = doc.categories.into_iter().map(|c| (c.id, c.name)).collect();
    categories.sort_by_key(|c| c.0);
    if let Some(w) = categories.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateId(w[0].0));
    }
    let class_index: HashMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.0, i)).collect();

    let mut image_index = HashMap::new();
    let mut images = Vec::with_capacity(doc.images.len());
    for img in doc.images {
        if image_index.insert(img.id, images.len()).is_some() {
            return Err(Error::DuplicateId(img.id));
        }
        images.push(ImageRecord::new(img.id, img.width, img.height, Vec::new()));
    }

    for (n, ann) in doc.annotations.into_iter().enumerate() {
        let &slot = image_index.get(&ann.image_id).ok_or(Error::UnknownImage {
            annotation: n,
            image_id: ann.image_id,
        })?;
        let &class = class_index.get(&ann.category_id).ok_or(Error::UnknownCategory {
            annotation: n,
            category_id: ann.category_id,
        })?;
        if ann.bbox.len() != 4 {
            return Err(Error::ShapeMismatch(format!("annotation {n}: bbox needs 4 numbers")));
        }
        if ann.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bbox of annotation {n}")));
        }
        let rec = &mut images[slot];
        rec.labels.insert(class);
        rec.boxes.push(GtBox {
            class,
            bbox: [ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]],
        });
    }

    let (ids, names) = categories.into_iter().unzip();
    Dataset::new(ids, names, images)
}

/// Many-to-one class mapping between taxonomies. Unlisted sources are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping {
    pub entries: Vec<MappingEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub source: u64,
    pub target: u64,
}

impl ClassMapping {
    pub fn identity(ids: &[u64]) -> Self {
        ClassMapping {
            entries: ids.iter().map(|&id| MappingEntry { source: id, target: id }).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Sorted, de-duplicated target ids.
    pub fn targets(&self) -> Vec<u64> {
        let mut t: Vec<u64> = self.entries.iter().map(|e| e.target).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub images_before: usize,
    pub images_after: usize,
    pub annotations_before: usize,
    pub annotations_after: usize,
    /// Percent, rounded to 0.1.
    pub image_retention_pct: f64,
    pub annotation_retention_pct: f64,
}

fn retention(before: usize, after: usize) -> f64 {
    if before == 0 {
        return 100.0;
    }
    (after as f64 / before as f64 * 1000.0).round() / 10.0
}

/// Moves a dataset into another taxonomy.
///
/// Annotations of unmapped classes are removed, and images that lose all of their
/// annotations this way are removed too. Images that had no annotations to begin with
/// are kept.
pub fn remap_dataset(d: &Dataset, m: &ClassMapping, target_ids: &[u64]) -> Result<(Dataset, FilterReport)> {
    let mut sorted_targets = target_ids.to_vec();
    sorted_targets.sort_unstable();
    sorted_targets.dedup();
    let target_index: HashMap<u64, usize> = sorted_targets.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut by_source: HashMap<u64, usize> = HashMap::new();
    for e in &m.entries {
        let &t = target_index.get(&e.target).ok_or(Error::UnknownTarget(e.target))?;
        if by_source.insert(e.source, t).is_some() {
            return Err(Error::DuplicateMapping(e.source));
        }
    }

    // Target names borrow the name of their lowest mapped source class.
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for (idx, &src) in d.class_ids().iter().enumerate() {
        if let Some(&t) = by_source.get(&src) {
            names.entry(t).or_insert_with(|| d.class_names()[idx].clone());
        }
    }
    let target_names = (0..sorted_targets.len())
        .map(|t| names.get(&t).cloned().unwrap_or_default())
        .collect();

    let mut images = Vec::new();
    for img in &d.images {
        let boxes: Vec<GtBox> = img
            .boxes
            .iter()
            .filter_map(|b| by_source.get(&d.class_ids()[b.class]).map(|&class| GtBox { class, bbox: b.bbox }))
            .collect();
        if boxes.is_empty() && !img.boxes.is_empty() {
            continue;
        }
        images.push(ImageRecord::new(img.image_id, img.width, img.height, boxes));
    }

    let out = Dataset::new(sorted_targets, target_names, images)?;
    let report = FilterReport {
        images_before: d.len(),
        images_after: out.len(),
        annotations_before: d.annotation_count(),
        annotations_after: out.annotation_count(),
        image_retention_pct: retention(d.len(), out.len()),
        annotation_retention_pct: retention(d.annotation_count(), out.annotation_count()),
    };
    Ok((out, report))
}

/// Shuffles images with a seeded generator and cuts them into equal-sized,
/// non-overlapping subsets. The remainder is discarded.
pub fn split_subsets(d: &Dataset, subset_size: usize, seed: u64) -> Result<Vec<Dataset>> {
    if subset_size == 0 {
        return Err(Error::Config("subset size must be at least 1".into()));
    }
    if subset_size > d.len() {
        log::warn!("subset size {subset_size} exceeds dataset size {}; no subsets produced", d.len());
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let count = d.len() / subset_size;
    Ok(order[..count * subset_size]
        .chunks(subset_size)
        .map(|chunk| d.with_images(chunk.iter().map(|&i| d.images[i].clone()).collect()))
        .collect())
}

/// Conditional-probability statistics over all images of a dataset.
pub fn dataset_edge<T: Scalar>(d: &Dataset) -> Result<EdgeMatrix<T>> {
    edge_from_label_sets_with_ids(d.class_ids().to_vec(), d.images.iter().map(|i| &i.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::flat_prior_with_ids;

    const REGISTRY: &str = r#"[{"id":33,"name":"kite"},{"id":16,"name":"bird"},{"id":31,"name":"handbag"}]"#;

    fn doc(images: &str, annotations: &str) -> String {
        format!(r#"{{"images":{images},"annotations":{annotations},"categories":{REGISTRY}}}"#)
    }

    #[test]
    fn image_without_annotations_is_kept() {
        let d = parse_annotations(&doc(r#"[{"id":7,"width":640,"height":480}]"#, "[]")).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.images[0].labels.is_empty());
        assert_eq!(d.class_ids(), &[16, 31, 33]);
    }

    #[test]
    fn category_ids_sorted_to_indices() {
        let d = parse_annotations(&doc(
            r#"[{"id":1,"width":100,"height":100}]"#,
            r#"[{"id":1,"image_id":1,"category_id":31,"bbox":[0,0,5,5],"iscrowd":0,"segmentation":[[1,2]]},
                {"id":2,"image_id":1,"category_id":16,"bbox":[1,1,5,5]}]"#,
        ))
        .unwrap();
        let labels: Vec<usize> = d.images[0].labels.iter().collect();
        assert_eq!(labels, vec![0, 1]);
        assert_eq!(d.class_names()[0], "bird");
    }

    #[test]
    fn referential_errors() {
        let missing_image = doc(
            r#"[{"id":1,"width":100,"height":100}]"#,
            r#"[{"image_id":2,"category_id":16,"bbox":[0,0,1,1]}]"#,
        );
        assert!(matches!(
            parse_annotations(&missing_image),
            Err(Error::UnknownImage { image_id: 2, .. })
        ));
        let missing_cat = doc(
            r#"[{"id":1,"width":100,"height":100}]"#,
            r#"[{"image_id":1,"category_id":99,"bbox":[0,0,1,1]}]"#,
        );
        assert!(matches!(
            parse_annotations(&missing_cat),
            Err(Error::UnknownCategory { category_id: 99, .. })
        ));
        assert!(matches!(parse_annotations("{not json"), Err(Error::Json(_))));
        let dup = doc(r#"[{"id":1},{"id":1}]"#, "[]");
        assert!(matches!(parse_annotations(&dup), Err(Error::DuplicateId(1))));
    }

    fn fixture() -> Dataset {
        let b = |class| GtBox {
            class,
            bbox: [0.0, 0.0, 10.0, 10.0],
        };
        Dataset::new(
            vec![16, 31, 33],
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                ImageRecord::new(1, 100.0, 100.0, vec![b(0), b(2)]),
                ImageRecord::new(2, 100.0, 100.0, vec![b(1), b(2)]),
                ImageRecord::new(3, 100.0, 100.0, vec![b(0), b(1), b(2)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_remap_is_lossless() {
        let d = fixture();
        let (out, report) = remap_dataset(&d, &ClassMapping::identity(d.class_ids()), d.class_ids()).unwrap();
        assert_eq!(out, d);
        assert_eq!(report.image_retention_pct, 100.0);
        assert_eq!(report.annotation_retention_pct, 100.0);
    }

    #[test]
    fn remap_dropping_everything() {
        let d = fixture();
        let (out, report) = remap_dataset(&d, &ClassMapping { entries: vec![] }, &[1]).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.images_after, 0);
        assert_eq!(report.image_retention_pct, 0.0);
        assert_eq!(report.annotation_retention_pct, 0.0);
    }

    #[test]
    fn remap_merges_and_reports() {
        let d = fixture();
        let m = ClassMapping {
            entries: vec![MappingEntry { source: 16, target: 5 }, MappingEntry { source: 31, target: 5 }],
        };
        let (out, report) = remap_dataset(&d, &m, &[5]).unwrap();
        assert_eq!(out.k(), 1);
        assert_eq!(out.len(), 3);
        assert_eq!(report.annotations_before, 7);
        assert_eq!(report.annotations_after, 4);
        assert_eq!(report.annotation_retention_pct, 57.1);

        let dup = ClassMapping {
            entries: vec![MappingEntry { source: 16, target: 5 }, MappingEntry { source: 16, target: 6 }],
        };
        assert!(matches!(remap_dataset(&d, &dup, &[5, 6]), Err(Error::DuplicateMapping(16))));
        assert!(matches!(remap_dataset(&d, &m, &[6]), Err(Error::UnknownTarget(5))));
    }

    #[test]
    fn dataset_edges() {
        let d = fixture();
        let e: EdgeMatrix<f64> = dataset_edge(&d).unwrap();
        assert_eq!(e.get(0, 2), 2.0 / 3.0);
        assert_eq!(e.class_ids(), &[16, 31, 33]);
        let single = d.with_images(vec![d.images[0].clone()]);
        assert_eq!(dataset_edge::<f64>(&single).unwrap().column(0), vec![1.0, 0.0, 1.0]);
        let empty = d.with_images(vec![]);
        assert_eq!(dataset_edge::<f64>(&empty).unwrap(), flat_prior_with_ids(vec![16, 31, 33]).unwrap());
    }

    fn numbered(n: usize) -> Dataset {
        let images = (0..n as u64).map(|i| ImageRecord::new(i, 10.0, 10.0, vec![])).collect();
        Dataset::new(vec![0], vec!["x".into()], images).unwrap()
    }

    #[test]
    fn subsets_partition() {
        let d = numbered(10);
        let s = split_subsets(&d, 5, 3).unwrap();
        assert_eq!(s.len(), 2);
        let mut all: Vec<u64> = s.iter().flat_map(|x| x.images.iter().map(|i| i.image_id)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let s4 = split_subsets(&d, 4, 3).unwrap();
        assert_eq!(s4.len(), 2);
        assert!(s4.iter().all(|x| x.len() == 4));
        let ids: HashSet<u64> = s4.iter().flat_map(|x| x.images.iter().map(|i| i.image_id)).collect();
        assert_eq!(ids.len(), 8);

        assert_eq!(split_subsets(&d, 4, 3).unwrap(), s4);
        assert!(split_subsets(&d, 11, 3).unwrap().is_empty());
        assert!(split_subsets(&d, 0, 3).is_err());
    }

    #[test]
    fn coco_round_trip() {
        let d = fixture();
        let back = parse_annotations(&d.to_coco_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
