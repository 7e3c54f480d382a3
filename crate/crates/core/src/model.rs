//! The assembled network: dual backbone, prompt encoder, mask decoder.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, DualBackbone, ImageEmbedding};
use crate::data::{normalize_depth, tight_box, BoxPrompt, Mask, RgbdSample};
use crate::error::{Error, Result};
use crate::nn::{no_grad, ParamStore};
use crate::promptdecoder::{
    to_triplets, DecoderConfig, MaskDecoder, MaskOutput, MaskTriplet, PromptEncoder, NUM_MASKS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Positional terms in the encoder, the prompt encoder and the decoder.
    pub positional: bool,
    /// Depth normalisation ceiling in metres.
    pub depth_max: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            positional: true,
            depth_max: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            decoder: DecoderConfig {
                heads: 2,
                mlp_ratio: 2.0,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate(self.backbone.embed_dim)?;
        if !(self.depth_max > 0.0) {
            return Err(Error::config("data.depth_max", "must be > 0"));
        }
        Ok(())
    }
}

pub struct PlaneSegModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: DualBackbone,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    image_pe: Tensor,
}

impl PlaneSegModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let bb = &cfg.backbone;
        let backbone = DualBackbone::new(&mut store, bb, cfg.positional, &mut rng)?;
        let prompt = PromptEncoder::new(&mut store, bb.embed_dim, bb.image_size, cfg.positional, &mut rng)?;
        let decoder = MaskDecoder::new(&mut store, bb.embed_dim, bb.image_size, &cfg.decoder, &mut rng)?;
        let image_pe = prompt.dense_pe(bb.grid(), dtype)?;
        Ok(PlaneSegModel {
            cfg: cfg.clone(),
            store,
            backbone,
            prompt,
            decoder,
            image_pe,
        })
    }

    pub fn image_size(&self) -> usize {
        self.cfg.backbone.image_size
    }

    /// Stack samples into `[B, 3, S, S]` RGB and `[B, 1, S, S]` normalised depth.
    pub fn sample_tensors(&self, samples: &[&RgbdSample]) -> Result<(Tensor, Tensor)> {
        let s = self.image_size();
        let mut rgb: Vec<f32> = Vec::with_capacity(samples.len() * 3 * s * s);
        let mut depth: Vec<f32> = Vec::with_capacity(samples.len() * s * s);
        for sample in samples {
            if sample.height() != s || sample.width() != s {
                return Err(Error::Shape(format!(
                    "sample `{}` is {}x{}, model expects {s}x{s}",
                    sample.id,
                    sample.height(),
                    sample.width()
                )));
            }
            for ch in 0..3 {
                rgb.extend(sample.rgb.index_axis(ndarray::Axis(2), ch).iter());
            }
            depth.extend(normalize_depth(&sample.depth, self.cfg.depth_max)?.iter());
        }
        let dev = self.store.device();
        let dt = self.store.dtype();
        Ok((
            Tensor::from_vec(rgb, (samples.len(), 3, s, s), dev)?.to_dtype(dt)?,
            Tensor::from_vec(depth, (samples.len(), 1, s, s), dev)?.to_dtype(dt)?,
        ))
    }

    pub fn embed(&self, rgb: &Tensor, depth: &Tensor) -> Result<ImageEmbedding> {
        self.backbone.forward(&self.store, rgb, depth)
    }

    pub fn decode(&self, embedding: &ImageEmbedding, boxes: &[BoxPrompt]) -> Result<MaskOutput> {
        let prompts = self.prompt.encode_boxes(&self.store, boxes)?;
        let dense = self.store.get(&self.prompt.no_mask_embed)?;
        self.decoder.decode_masks(&self.store, embedding, &prompts, &dense, &self.image_pe)
    }

    /// One box per image.
    pub fn forward(&self, rgb: &Tensor, depth: &Tensor, boxes: &[BoxPrompt]) -> Result<MaskOutput> {
        let emb = self.embed(rgb, depth)?;
        self.decode(&emb, boxes)
    }

    /// Same as [`Self::forward`] with the CNN branch removed.
    pub fn forward_rgb_only(&self, rgb: &Tensor, boxes: &[BoxPrompt]) -> Result<MaskOutput> {
        let emb = self.backbone.forward_rgb_only(&self.store, rgb)?;
        self.decode(&emb, boxes)
    }

    /// Inference: all prompts for one image share a single encoder pass.
    pub fn predict(&self, sample: &RgbdSample, boxes: &[BoxPrompt]) -> Result<Vec<MaskTriplet>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        no_grad(&self.store, || {
            let (rgb, depth) = self.sample_tensors(&[sample])?;
            let emb = self.embed(&rgb, &depth)?;
            let (_, n, e) = emb.tokens.dims3()?;
            let k = boxes.len();
            let emb = ImageEmbedding {
                tokens: emb.tokens.broadcast_as((k, n, e))?.contiguous()?,
                grid: emb.grid,
            };
            to_triplets(&self.decode(&emb, boxes)?)
        })
    }
}

/// Which of the three candidates to report for a prompt.
///
/// Highest IoU score wins. When all scores are equal (the IoU head is never
/// trained, so this is the normal case) the candidate whose binarised mask has
/// the tightest-box IoU closest to the prompt box wins; remaining ties go to
/// the lowest index.
pub fn select_mask(triplet: &MaskTriplet, prompt: &BoxPrompt) -> usize {
    let s = triplet.iou_scores;
    if s.iter().any(|&v| v != s[0]) {
        let mut best = 0;
        for i in 1..NUM_MASKS {
            if s[i] > s[best] {
                best = i;
            }
        }
        return best;
    }
    let mut best = 0;
    let mut best_iou = f32::NEG_INFINITY;
    for i in 0..NUM_MASKS {
        let iou = tight_box(&triplet.binary(i)).map_or(0.0, |b| b.iou(prompt));
        if iou > best_iou {
            best = i;
            best_iou = iou;
        }
    }
    best
}

/// Label raster from per-prompt binary masks: each pixel goes to the
/// highest-scored mask claiming it (lower prompt index on ties), labels
/// `1..=k` follow prompt order, 0 elsewhere.
pub fn build_partition(masks: &[(Mask, f32)], height: usize, width: usize) -> Result<Array2<u32>> {
    let mut out = Array2::<u32>::zeros((height, width));
    let mut best = Array2::<f32>::from_elem((height, width), f32::NEG_INFINITY);
    for (k, (m, score)) in masks.iter().enumerate() {
        if m.dim() != (height, width) {
            return Err(Error::Shape(format!("mask {k} is {:?}, expected {:?}", m.dim(), (height, width))));
        }
        for ((o, b), &v) in out.iter_mut().zip(best.iter_mut()).zip(m.iter()) {
            if v && *score > *b {
                *o = k as u32 + 1;
                *b = *score;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> Mask {
        Array2::from_shape_fn((h, w), |(y, x)| r.contains(&y) && c.contains(&x))
    }

    #[test]
    fn partition_overlap_goes_to_higher_score() {
        let a = rect(4, 4, 0..2, 0..4);
        let b = rect(4, 4, 1..4, 0..4);
        let p = build_partition(&[(a.clone(), 0.4), (b.clone(), 0.9)], 4, 4).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![1; 4]);
        assert_eq!(p.row(1).to_vec(), vec![2; 4]);
        let p = build_partition(&[(a, 0.5), (b, 0.5)], 4, 4).unwrap();
        assert_eq!(p.row(1).to_vec(), vec![1; 4]);
        assert!(build_partition(&[], 3, 3).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn selection_prefers_scores_then_box_agreement() {
        let mut logits = ndarray::Array3::<f32>::from_elem((3, 8, 8), -1.0);
        for r in 2..6 {
            for c in 2..6 {
                logits[[2, r, c]] = 1.0;
            }
        }
        logits.index_axis_mut(ndarray::Axis(0), 1).fill(1.0);
        let prompt = BoxPrompt::new(2.0, 2.0, 6.0, 6.0).unwrap();
        let t = MaskTriplet {
            logits: logits.clone(),
            iou_scores: [0.5; 3],
        };
        assert_eq!(select_mask(&t, &prompt), 2);
        let t = MaskTriplet {
            logits,
            iou_scores: [0.1, 0.7, 0.3],
        };
        assert_eq!(select_mask(&t, &prompt), 1);
        let empty = MaskTriplet {
            logits: ndarray::Array3::from_elem((3, 4, 4), -1.0),
            iou_scores: [0.5; 3],
        };
        assert_eq!(select_mask(&empty, &prompt), 0);
    }
}
