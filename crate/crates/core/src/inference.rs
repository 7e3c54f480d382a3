//! Prompted prediction of full plane partitions and dataset evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxPrompt, RgbdSample};
use crate::detector::{detect_planes, filter_detections, BoxDetector, Detection, OracleDetector};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, DatasetMetrics, Partition};
use crate::model::{build_partition, select_mask, PlaneSegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub image_id: String,
    pub prompt: usize,
    #[serde(rename = "box")]
    pub bbox: BoxPrompt,
    pub det_score: f32,
    pub selected: usize,
    pub iou_scores: [f32; 3],
    pub area: usize,
}

#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub id: String,
    pub partition: Partition,
    pub prompts: Vec<PromptSummary>,
}

/// One selected mask per detection, merged into a label raster.
pub fn predict_partition(model: &PlaneSegModel, sample: &RgbdSample, dets: &[Detection]) -> Result<ImagePrediction> {
    let boxes: Vec<BoxPrompt> = dets.iter().map(|d| d.bbox).collect();
    let triplets = model.predict(sample, &boxes)?;
    let mut masks = Vec::with_capacity(dets.len());
    let mut prompts = Vec::with_capacity(dets.len());
    for (k, (t, d)) in triplets.iter().zip(dets).enumerate() {
        let sel = select_mask(t, &d.bbox);
        let m = t.binary(sel);
        prompts.push(PromptSummary {
            image_id: sample.id.clone(),
            prompt: k,
            bbox: d.bbox,
            det_score: d.score,
            selected: sel,
            iou_scores: t.iou_scores,
            area: crate::data::mask_area(&m),
        });
        masks.push((m, t.iou_scores[sel]));
    }
    Ok(ImagePrediction {
        id: sample.id.clone(),
        partition: build_partition(&masks, sample.height(), sample.width())?,
        prompts,
    })
}

/// Detect, filter, predict.
pub fn predict_with_detector(
    model: &PlaneSegModel,
    sample: &RgbdSample,
    detector: &mut dyn BoxDetector,
    score_thresh: f32,
    max_dets: usize,
) -> Result<ImagePrediction> {
    let dets = detect_planes(sample, Some(detector))?;
    predict_partition(model, sample, &filter_detections(&dets, score_thresh, max_dets))
}

/// Metrics of the model on annotated samples with oracle boxes at the given
/// noise level. The oracle is seeded once per call.
pub fn evaluate_with_oracle(model: &PlaneSegModel, samples: &[RgbdSample], noise_frac: f32, seed: u64) -> Result<DatasetMetrics> {
    let mut oracle = OracleDetector {
        noise_frac,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let ann = s
            .annotation
            .as_ref()
            .ok_or_else(|| Error::Input("evaluation needs annotated samples".into()).for_image(&s.id))?;
        let p = predict_with_detector(model, s, &mut oracle, 0.0, usize::MAX).map_err(|e| e.for_image(&s.id))?;
        preds.push(p.partition);
        gts.push(ann.to_partition(s.height(), s.width()));
    }
    evaluate_dataset(samples.iter().zip(preds.iter().zip(&gts)).map(|(s, (p, g))| (s.id.as_str(), p, g)))
}
