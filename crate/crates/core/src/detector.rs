//! Box sources for inference: a jittered ground-truth oracle and precomputed
//! box files from an external two-class detector.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{jitter_box, tight_box, BoxPrompt, PlaneAnnotation, RgbdSample};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DETS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetLabel {
    Plane,
    NonPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxPrompt,
    pub score: f32,
    pub label: DetLabel,
}

/// One jittered tight box per plane mask, score 1.
pub fn oracle_boxes<R: Rng + ?Sized>(
    annotation: &PlaneAnnotation,
    noise_frac: f32,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    annotation
        .plane_masks()
        .filter_map(tight_box)
        .map(|b| {
            Ok(Detection {
                bbox: jitter_box(&b, noise_frac, width, height, rng)?,
                score: 1.0,
                label: DetLabel::Plane,
            })
        })
        .collect()
}

/// Something that turns an image into plane detections.
pub trait BoxDetector {
    fn detect(&mut self, sample: &RgbdSample) -> Result<Vec<Detection>>;
}

/// Ground-truth boxes with coordinate noise; needs annotated samples.
pub struct OracleDetector<R> {
    pub noise_frac: f32,
    pub rng: R,
}

impl<R: Rng> BoxDetector for OracleDetector<R> {
    fn detect(&mut self, sample: &RgbdSample) -> Result<Vec<Detection>> {
        let ann = sample
            .annotation
            .as_ref()
            .ok_or_else(|| Error::Input(format!("oracle boxes need an annotation for `{}`", sample.id)))?;
        oracle_boxes(ann, self.noise_frac, sample.width(), sample.height(), &mut self.rng)
    }
}

/// One record of a box file (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: String,
    pub boxes: Vec<[f32; 4]>,
    #[serde(default)]
    pub scores: Option<Vec<f32>>,
    #[serde(default)]
    pub labels: Option<Vec<DetLabel>>,
}

/// Detections read from a box file, keyed by image id.
pub struct BoxFileDetector {
    by_id: HashMap<String, Vec<Detection>>,
}

impl BoxFileDetector {
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let mut by_id = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: BoxRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let dets = record_detections(&rec)?;
            by_id.insert(rec.image_id, dets);
        }
        Ok(BoxFileDetector { by_id })
    }

    pub fn from_records(records: &[BoxRecord]) -> Result<Self> {
        let by_id = records
            .iter()
            .map(|r| Ok((r.image_id.clone(), record_detections(r)?)))
            .collect::<Result<_>>()?;
        Ok(BoxFileDetector { by_id })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

fn record_detections(rec: &BoxRecord) -> Result<Vec<Detection>> {
    let n = rec.boxes.len();
    let bad_len = |what: &str| Error::Format(format!("`{}`: {what} length differs from boxes", rec.image_id));
    if rec.scores.as_ref().is_some_and(|s| s.len() != n) {
        return Err(bad_len("scores"));
    }
    if rec.labels.as_ref().is_some_and(|s| s.len() != n) {
        return Err(bad_len("labels"));
    }
    rec.boxes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let score = rec.scores.as_ref().map_or(1.0, |s| s[i]);
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Format(format!("`{}`: score {score} outside [0, 1]", rec.image_id)));
            }
            Ok(Detection {
                bbox: BoxPrompt::from_array(b).map_err(|e| Error::Format(format!("`{}`: {e}", rec.image_id)))?,
                score,
                label: rec.labels.as_ref().map_or(DetLabel::Plane, |l| l[i]),
            })
        })
        .collect()
}

impl BoxDetector for BoxFileDetector {
    fn detect(&mut self, sample: &RgbdSample) -> Result<Vec<Detection>> {
        self.by_id
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no boxes for image `{}`", sample.id)))
    }
}

/// Run a detector, clip boxes to the image, drop degenerate ones and sort by
/// descending score (stable).
pub fn detect_planes(sample: &RgbdSample, model: Option<&mut dyn BoxDetector>) -> Result<Vec<Detection>> {
    let model = model.ok_or_else(|| Error::config("detector.kind", "no detector loaded"))?;
    let (w, h) = (sample.width(), sample.height());
    let mut dets: Vec<Detection> = model
        .detect(sample)?
        .into_iter()
        .filter_map(|d| d.bbox.clip(w, h).map(|bbox| Detection { bbox, ..d }))
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets)
}

/// Plane detections scoring at least `score_thresh`, order kept, at most
/// `max_dets`.
pub fn filter_detections(dets: &[Detection], score_thresh: f32, max_dets: usize) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.label == DetLabel::Plane && d.score >= score_thresh)
        .take(max_dets)
        .copied()
        .collect()
}

/// Training recipe for an external two-class detector. Recorded so that a
/// detector trained elsewhere can be plugged in; nothing here trains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub optimizer: String,
    pub lr0: f64,
    pub schedule: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            optimizer: "sgd".into(),
            lr0: 0.02,
            schedule: "cosine".into(),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_synthetic_scene, Mask, SceneConfig};

    fn rect(r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> Mask {
        Array2::from_shape_fn((32, 32), |(y, x)| r.contains(&y) && c.contains(&x))
    }

    fn four_planes() -> PlaneAnnotation {
        PlaneAnnotation::new(
            vec![rect(0..8, 0..8), rect(0..8, 10..20), rect(12..30, 0..6), rect(20..30, 10..30), rect(9..11, 25..31)],
            vec![true, true, true, true, false],
        )
        .unwrap()
    }

    fn det(score: f32, label: DetLabel) -> Detection {
        Detection {
            bbox: BoxPrompt::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            score,
            label,
        }
    }

    #[test]
    fn oracle_without_noise_is_tight() {
        let ann = four_planes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dets = oracle_boxes(&ann, 0.0, 32, 32, &mut rng).unwrap();
        assert_eq!(dets.len(), 4);
        for (d, m) in dets.iter().zip(ann.plane_masks()) {
            assert_eq!(d.bbox, tight_box(m).unwrap());
            assert_eq!(d.score, 1.0);
            assert_eq!(d.label, DetLabel::Plane);
        }
        assert!(oracle_boxes(&PlaneAnnotation::empty(), 0.1, 32, 32, &mut rng).unwrap().is_empty());
        assert!(oracle_boxes(&ann, 0.5, 32, 32, &mut rng).is_err());
    }

    #[test]
    fn oracle_noise_bound() {
        let ann = four_planes();
        let tight: Vec<BoxPrompt> = ann.plane_masks().map(|m| tight_box(m).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            for (d, t) in oracle_boxes(&ann, 0.1, 32, 32, &mut rng).unwrap().iter().zip(&tight) {
                let (dx, dy) = (0.1 * t.width() + 1e-4, 0.1 * t.height() + 1e-4);
                assert!((d.bbox.x_min - t.x_min).abs() <= dx && (d.bbox.x_max - t.x_max).abs() <= dx);
                assert!((d.bbox.y_min - t.y_min).abs() <= dy && (d.bbox.y_max - t.y_max).abs() <= dy);
                assert!(d.bbox.is_valid_for(32, 32));
            }
        }
    }

    #[test]
    fn oracle_adapter_matches_and_sorts() {
        let sample = generate_synthetic_scene(3, &SceneConfig::default()).unwrap();
        let mut oracle = OracleDetector {
            noise_frac: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        let dets = detect_planes(&sample, Some(&mut oracle)).unwrap();
        let direct = oracle_boxes(sample.annotation.as_ref().unwrap(), 0.0, 64, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(dets, direct);
        assert!(detect_planes(&sample, None).is_err());

        let empty = RgbdSample {
            annotation: Some(PlaneAnnotation::empty()),
            ..sample.clone()
        };
        assert!(detect_planes(&empty, Some(&mut oracle)).unwrap().is_empty());

        let rec = BoxRecord {
            image_id: sample.id.clone(),
            boxes: vec![[0.0, 0.0, 5.0, 5.0], [1.0, 1.0, 9.0, 9.0], [2.0, 2.0, 3.0, 3.0]],
            scores: Some(vec![0.2, 0.9, 0.5]),
            labels: None,
        };
        let mut file = BoxFileDetector::from_records(&[rec]).unwrap();
        let dets = detect_planes(&sample, Some(&mut file)).unwrap();
        let scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.5, 0.2]);
        let missing = RgbdSample {
            id: "other".into(),
            ..sample
        };
        assert!(detect_planes(&missing, Some(&mut file)).is_err());
    }

    #[test]
    fn box_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.jsonl");
        let rec = BoxRecord {
            image_id: "a".into(),
            boxes: vec![[1.0, 2.0, 3.0, 4.0]],
            scores: Some(vec![0.7]),
            labels: Some(vec![DetLabel::NonPlane]),
        };
        std::fs::write(&path, serde_json::to_string(&rec).unwrap() + "\n").unwrap();
        let f = BoxFileDetector::open(&path).unwrap();
        assert!(f.contains("a"));
        assert_eq!(f.by_id["a"][0].label, DetLabel::NonPlane);
        std::fs::write(&path, "{\"image_id\":\"a\",\"boxes\":[[0,0,1,1]],\"scores\":[0.1,0.2]}\n").unwrap();
        assert!(BoxFileDetector::open(&path).is_err());
    }

    #[test]
    fn filter_cases() {
        let dets = vec![det(0.9, DetLabel::Plane), det(0.4, DetLabel::Plane), det(0.2, DetLabel::Plane)];
        assert_eq!(filter_detections(&dets, 0.0, 30), dets);
        assert!(filter_detections(&dets, 1.01, 30).is_empty());
        assert_eq!(filter_detections(&dets, 0.5, 30).len(), 1);
        assert_eq!(filter_detections(&dets, 0.0, 2).len(), 2);
        let mixed = vec![det(0.8, DetLabel::NonPlane), det(0.3, DetLabel::Plane)];
        assert_eq!(filter_detections(&mixed, 0.0, 30), vec![mixed[1]]);
    }

    proptest! {
        #[test]
        fn filter_keeps_order(scores in proptest::collection::vec(0.0f32..=1.0, 0..20), t in 0.0f32..=1.0) {
            let dets: Vec<Detection> = scores.iter().map(|&s| det(s, DetLabel::Plane)).collect();
            let kept = filter_detections(&dets, t, DEFAULT_MAX_DETS);
            let expect: Vec<f32> = scores.iter().copied().filter(|&s| s >= t).take(DEFAULT_MAX_DETS).collect();
            prop_assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), expect);
        }
    }
}
